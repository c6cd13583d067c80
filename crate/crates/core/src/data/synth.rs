//! Synthetic optical/SAR ship imagery.
//!
//! Each identity owns a fixed rigid geometry (hull outline, superstructure
//! blocks, strong scatterer sites). Optical views render it as a shaded
//! silhouette over a textured sea; SAR views render the same geometry as
//! backscatter with bright point returns and gamma speckle over dark clutter.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use super::image_io::write_pgm;
use super::manifest::{save_manifest, Manifest, Modality, Role, SampleRecord, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub images_per_identity_per_modality: usize,
    pub canvas_h: usize,
    pub canvas_w: usize,
    /// Number of looks of the multiplicative gamma speckle.
    pub speckle_looks: u32,
    /// Bright point reflectors per ship.
    pub scatterer_count: usize,
    pub sea_texture_scale: f64,
    pub seed: u64,
    /// How many of the identities are held out as the test split.
    pub test_identities: usize,
    /// Query images per test identity and modality; the rest are gallery.
    pub queries_per_identity: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_identities: 20,
            images_per_identity_per_modality: 8,
            canvas_h: 64,
            canvas_w: 32,
            speckle_looks: 4,
            scatterer_count: 6,
            sea_texture_scale: 1.0,
            seed: 7,
            test_identities: 10,
            queries_per_identity: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_identities", self.num_identities),
            ("images_per_identity_per_modality", self.images_per_identity_per_modality),
            ("canvas_h", self.canvas_h),
            ("canvas_w", self.canvas_w),
            ("speckle_looks", self.speckle_looks as usize),
            ("scatterer_count", self.scatterer_count),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.test_identities >= self.num_identities {
            return Err(Error::Config(format!(
                "test_identities {} leaves no training identities out of {}",
                self.test_identities, self.num_identities
            )));
        }
        if self.test_identities > 0
            && (self.queries_per_identity == 0
                || self.queries_per_identity >= self.images_per_identity_per_modality)
        {
            return Err(Error::Config(
                "queries_per_identity must leave at least one gallery image".into(),
            ));
        }
        if self.canvas_h < 16 || self.canvas_w < 8 {
            return Err(Error::Config("canvas must be at least 16x8".into()));
        }
        if self.sea_texture_scale < 0.0 {
            return Err(Error::Config("sea_texture_scale must be non-negative".into()));
        }
        Ok(())
    }

    pub fn num_train_identities(&self) -> usize {
        self.num_identities - self.test_identities
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Generated images with their hull masks, aligned with the manifest.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: SynthConfig,
    pub images: Vec<GrayImage>,
    /// Binarised hull silhouette of each image (coverage >= 0.5).
    pub hull_masks: Vec<Vec<bool>>,
    pub manifest: Manifest,
}

#[derive(Debug, Clone)]
struct Deck {
    center: f64,
    half_len: f64,
    half_width: f64,
    optical_tone: f64,
    sar_tone: f64,
}

#[derive(Debug, Clone)]
struct Scatterer {
    along: f64,
    across: f64,
    amplitude: f64,
}

/// Rigid per-identity geometry in ship coordinates (`along` toward the bow,
/// `across` toward starboard, both in pixels, origin at the hull centre).
#[derive(Debug, Clone)]
struct Ship {
    length: f64,
    beam: f64,
    bow_len: f64,
    stern_len: f64,
    stern_taper: f64,
    hull_tone: f64,
    decks: Vec<Deck>,
    scatterers: Vec<Scatterer>,
}

impl Ship {
    fn random(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.canvas_h as f64;
        let w = cfg.canvas_w as f64;
        let length = rng.random_range(0.55..0.85) * h;
        let beam = rng.random_range(0.22..0.45) * w;
        let bow_len = rng.random_range(0.12..0.3) * length;
        let stern_len = rng.random_range(0.05..0.15) * length;
        let stern_taper = rng.random_range(0.0..0.5);
        let n_decks = rng.random_range(1..=3);
        let decks = (0..n_decks)
            .map(|_| {
                let half_len = rng.random_range(0.05..0.14) * length;
                let span = length / 2.0 - bow_len - half_len;
                Deck {
                    center: rng.random_range(-span..span.max(-span + 1e-3)),
                    half_len,
                    half_width: rng.random_range(0.2..0.42) * beam,
                    optical_tone: rng.random_range(0.3..0.95),
                    sar_tone: rng.random_range(0.45..0.8),
                }
            })
            .collect();
        let mut ship = Self {
            length,
            beam,
            bow_len,
            stern_len,
            stern_taper,
            hull_tone: rng.random_range(0.5..0.85),
            decks,
            scatterers: Vec::new(),
        };
        while ship.scatterers.len() < cfg.scatterer_count {
            let along = rng.random_range(-0.5..0.5) * length;
            let across = rng.random_range(-0.5..0.5) * beam;
            if ship.hull_half_width(along) > across.abs() {
                ship.scatterers.push(Scatterer {
                    along,
                    across,
                    amplitude: rng.random_range(0.6..1.4),
                });
            }
        }
        ship
    }

    fn hull_half_width(&self, along: f64) -> f64 {
        let half = self.length / 2.0;
        let full = self.beam / 2.0;
        if along.abs() > half {
            0.0
        } else if along > half - self.bow_len {
            full * (half - along) / self.bow_len
        } else if along < -half + self.stern_len {
            full * (1.0 - self.stern_taper * (-half + self.stern_len - along) / self.stern_len)
        } else {
            full
        }
    }

    fn in_hull(&self, along: f64, across: f64) -> bool {
        across.abs() <= self.hull_half_width(along)
    }

    fn deck_at(&self, along: f64, across: f64) -> Option<&Deck> {
        self.decks
            .iter()
            .find(|d| (along - d.center).abs() <= d.half_len && across.abs() <= d.half_width)
    }
}

/// Per-image placement: 0/180 degree rotation plus sub-pixel shift.
#[derive(Debug, Clone, Copy)]
struct Pose {
    flipped: bool,
    dy: f64,
    dx: f64,
}

impl Pose {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            flipped: rng.random_bool(0.5),
            dy: rng.random_range(-0.5..0.5),
            dx: rng.random_range(-0.5..0.5),
        }
    }

    /// Image point (row, col) in ship coordinates.
    fn to_ship(self, cfg: &SynthConfig, row: f64, col: f64) -> (f64, f64) {
        let along = cfg.canvas_h as f64 / 2.0 - row - self.dy;
        let across = col - cfg.canvas_w as f64 / 2.0 - self.dx;
        if self.flipped {
            (-along, -across)
        } else {
            (along, across)
        }
    }
}

const SUPERSAMPLE: usize = 3;

/// Per-pixel hull and deck coverage plus deck tones.
struct Coverage {
    hull: Vec<f64>,
    deck: Vec<f64>,
    deck_optical: Vec<f64>,
    deck_sar: Vec<f64>,
}

fn coverage(cfg: &SynthConfig, ship: &Ship, pose: Pose) -> Coverage {
    let (h, w) = (cfg.canvas_h, cfg.canvas_w);
    let mut cov = Coverage {
        hull: vec![0.0; h * w],
        deck: vec![0.0; h * w],
        deck_optical: vec![0.0; h * w],
        deck_sar: vec![0.0; h * w],
    };
    let step = 1.0 / SUPERSAMPLE as f64;
    let weight = step * step;
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            for sr in 0..SUPERSAMPLE {
                for sc in 0..SUPERSAMPLE {
                    let y = r as f64 + (sr as f64 + 0.5) * step;
                    let x = c as f64 + (sc as f64 + 0.5) * step;
                    let (along, across) = pose.to_ship(cfg, y, x);
                    if ship.in_hull(along, across) {
                        cov.hull[i] += weight;
                        if let Some(d) = ship.deck_at(along, across) {
                            cov.deck[i] += weight;
                            cov.deck_optical[i] += weight * d.optical_tone;
                            cov.deck_sar[i] += weight * d.sar_tone;
                        }
                    }
                }
            }
        }
    }
    cov
}

fn sea_wave(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> impl Fn(usize, usize) -> f64 {
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let k: f64 = rng.random_range(0.5..1.3);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let k2: f64 = rng.random_range(1.5..2.5);
    let phase2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let scale = cfg.sea_texture_scale;
    move |r, c| {
        let u = c as f64 * theta.cos() + r as f64 * theta.sin();
        let v = -(c as f64) * theta.sin() + r as f64 * theta.cos();
        scale * (0.6 * (k * u + phase).sin() + 0.4 * (k2 * v + phase2).sin())
    }
}

fn render_optical(cfg: &SynthConfig, ship: &Ship, cov: &Coverage, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w) = (cfg.canvas_h, cfg.canvas_w);
    let sea_level = rng.random_range(0.18..0.35);
    let wave = sea_wave(cfg, rng);
    let gain = rng.random_range(0.8..1.2);
    let offset = rng.random_range(-0.05..0.05);
    let light = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let noise = Normal::new(0.0, 0.03).expect("valid sigma");
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let sea = sea_level + 0.05 * wave(r, c);
            let shade = 0.85 + 0.15 * light * ((c as f64 + 0.5) / w as f64 - 0.5) * 2.0;
            let hull = ship.hull_tone * shade;
            let deck = if cov.deck[i] > 0.0 {
                cov.deck_optical[i] / cov.deck[i] * shade
            } else {
                0.0
            };
            let v = sea * (1.0 - cov.hull[i]) + hull * (cov.hull[i] - cov.deck[i]) + deck * cov.deck[i];
            out[i] = gain * v + offset + noise.sample(rng);
        }
    }
    out
}

fn render_sar(
    cfg: &SynthConfig,
    ship: &Ship,
    pose: Pose,
    cov: &Coverage,
    rng: &mut ChaCha8Rng,
    speckle: bool,
) -> Vec<f64> {
    let (h, w) = (cfg.canvas_h, cfg.canvas_w);
    let wave = sea_wave(cfg, rng);
    let clutter_level = rng.random_range(0.04..0.08);
    // Scatterers in image coordinates; a few drop out per acquisition.
    let sites: Vec<(f64, f64, f64)> = ship
        .scatterers
        .iter()
        .filter_map(|s| {
            let keep = rng.random_bool(0.85);
            let jitter_r: f64 = rng.random_range(-0.3..0.3);
            let jitter_c: f64 = rng.random_range(-0.3..0.3);
            let amp: f64 = s.amplitude * rng.random_range(0.7..1.3);
            keep.then(|| {
                let (along, across) = if pose.flipped {
                    (-s.along, -s.across)
                } else {
                    (s.along, s.across)
                };
                let row = cfg.canvas_h as f64 / 2.0 - along - pose.dy + jitter_r;
                let col = across + cfg.canvas_w as f64 / 2.0 + pose.dx + jitter_c;
                (row, col, amp)
            })
        })
        .collect();
    let gamma = Gamma::new(cfg.speckle_looks as f64, 1.0 / cfg.speckle_looks as f64)
        .expect("positive looks");
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let clutter = clutter_level * (1.0 + 0.3 * wave(r, c));
            let hull = 0.3;
            let deck = if cov.deck[i] > 0.0 {
                cov.deck_sar[i] / cov.deck[i]
            } else {
                0.0
            };
            let mut v = clutter * (1.0 - cov.hull[i])
                + hull * (cov.hull[i] - cov.deck[i])
                + deck * cov.deck[i];
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            for &(sr, sc, amp) in &sites {
                let d2 = (y - sr).powi(2) + (x - sc).powi(2);
                v += amp * (-d2 / (2.0 * 0.7 * 0.7)).exp();
            }
            out[i] = if speckle { v * gamma.sample(rng) } else { v };
        }
    }
    out
}

fn quantize(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn ship_for(cfg: &SynthConfig, identity: usize) -> Ship {
    Ship::random(cfg, &mut rng_for(cfg.seed, (1 << 40) | identity as u64))
}

/// Renders one view. `speckle = false` gives the noise-free SAR backscatter.
fn render_view(
    cfg: &SynthConfig,
    identity: usize,
    modality: Modality,
    index: usize,
    speckle: bool,
) -> (Vec<f64>, Vec<bool>) {
    let ship = ship_for(cfg, identity);
    let stream = ((identity as u64) << 20) | ((u8::from(modality) as u64) << 16) | index as u64;
    let mut rng = rng_for(cfg.seed, stream);
    let pose = Pose::random(&mut rng);
    let cov = coverage(cfg, &ship, pose);
    let mask = cov.hull.iter().map(|&c| c >= 0.5).collect();
    let values = match modality {
        Modality::Optical => render_optical(cfg, &ship, &cov, &mut rng),
        Modality::Sar => render_sar(cfg, &ship, pose, &cov, &mut rng, speckle),
    };
    (values, mask)
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let n_train = cfg.num_train_identities();
    let mut images = Vec::new();
    let mut masks = Vec::new();
    let mut records = Vec::new();
    for identity in 0..cfg.num_identities {
        for modality in [Modality::Optical, Modality::Sar] {
            for index in 0..cfg.images_per_identity_per_modality {
                let (values, mask) = render_view(cfg, identity, modality, index, true);
                images.push(GrayImage {
                    width: cfg.canvas_w,
                    height: cfg.canvas_h,
                    pixels: quantize(&values),
                });
                masks.push(mask);
                let (split, role) = if identity < n_train {
                    (Split::Train, Role::None)
                } else if index < cfg.queries_per_identity {
                    (Split::Test, Role::Query)
                } else {
                    (Split::Test, Role::Gallery)
                };
                records.push(SampleRecord {
                    image_ref: format!("images/{identity:04}_{modality}_{index}.pgm"),
                    identity,
                    modality,
                    split,
                    role,
                });
            }
        }
    }
    Ok(SyntheticDataset {
        config: cfg.clone(),
        images,
        hull_masks: masks,
        manifest: Manifest::new(records),
    })
}

/// Writes `images/*.pgm` and `manifest.jsonl` under `dir`.
pub fn write_dataset(dir: &Path, data: &SyntheticDataset) -> Result<Vec<std::path::PathBuf>> {
    let image_dir = dir.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut written = Vec::with_capacity(data.images.len() + 1);
    for (img, rec) in data.images.iter().zip(&data.manifest.records) {
        let path = dir.join(&rec.image_ref);
        write_pgm(&path, img.width, img.height, &img.pixels)?;
        written.push(path);
    }
    let manifest_path = dir.join("manifest.jsonl");
    save_manifest(&manifest_path, &data.manifest)?;
    written.push(manifest_path);
    Ok(written)
}
