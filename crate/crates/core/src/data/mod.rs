//! Manifests, image loading, synthetic optical/SAR data, augmentation and
//! the cross-modal P x K batch sampler.

mod augment;
mod image_io;
mod manifest;
mod sampler;
mod synth;

pub use augment::{augment, AugmentConfig};
pub use image_io::{load_image, normalize_gray, write_pgm, ImageCache};
pub use manifest::{
    convert_hoss_tree, load_manifest, parse_manifest, save_manifest, Manifest, Modality, Role,
    SampleRecord, Split,
};
pub use sampler::{plan_batches, BatchPlan};
pub use synth::{generate_synthetic, write_dataset, GrayImage, SynthConfig, SyntheticDataset};
