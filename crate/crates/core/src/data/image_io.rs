use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use super::manifest::Manifest;
use crate::error::{Error, Result};

/// Pixel standardisation shared by both modalities: `(x / 255 - 0.5) / 0.5`.
fn standardize(v: u8) -> f32 {
    (v as f32 / 255.0 - 0.5) / 0.5
}

/// Replicates an 8-bit grayscale image to three standardised channels, `[3, H, W]`.
pub fn normalize_gray(pixels: &[u8]) -> Vec<f32> {
    let plane: Vec<f32> = pixels.iter().map(|&v| standardize(v)).collect();
    let mut out = Vec::with_capacity(plane.len() * 3);
    for _ in 0..3 {
        out.extend_from_slice(&plane);
    }
    out
}

/// Loads a grayscale or RGB image, resizing to `h x w` when needed, as `[3, H, W]`.
pub fn load_image(path: &Path, h: usize, w: usize) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let resize = |img: image::DynamicImage| {
        if img.height() as usize == h && img.width() as usize == w {
            img
        } else {
            img.resize_exact(w as u32, h as u32, FilterType::Triangle)
        }
    };
    if img.color().channel_count() < 3 {
        let gray = resize(img).to_luma8();
        Ok(normalize_gray(gray.as_raw()))
    } else {
        let rgb = resize(img).to_rgb8();
        let mut out = vec![0.0; 3 * h * w];
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                out[c * h * w + i] = standardize(px[c]);
            }
        }
        Ok(out)
    }
}

/// Binary (P5) portable graymap.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// All images of a manifest, loaded once and standardised.
#[derive(Debug, Clone)]
pub struct ImageCache {
    pub height: usize,
    pub width: usize,
    images: Vec<Vec<f32>>,
}

impl ImageCache {
    pub fn load(root: &Path, manifest: &Manifest, height: usize, width: usize) -> Result<Self> {
        let images = manifest
            .records
            .iter()
            .map(|r| {
                let path: PathBuf = root.join(&r.image_ref);
                load_image(&path, height, width)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            height,
            width,
            images,
        })
    }

    pub fn from_images(height: usize, width: usize, images: Vec<Vec<f32>>) -> Self {
        Self {
            height,
            width,
            images,
        }
    }

    /// Standardised `[3, H, W]` pixels of record `i`.
    pub fn get(&self, i: usize) -> &[f32] {
        &self.images[i]
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}
