use rand::Rng;
use serde::{Deserialize, Serialize};

/// Training-time augmentation knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_p: f64,
    /// Border width (filled with -1, i.e. black) added before the random crop.
    pub pad: usize,
    pub erase_p: f64,
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_p: 0.5,
            pad: 4,
            erase_p: 0.2,
            erase_area: (0.02, 0.33),
            erase_aspect: (0.3, 3.3),
        }
    }
}

impl AugmentConfig {
    /// No-op configuration.
    pub fn off() -> Self {
        Self {
            flip_p: 0.0,
            pad: 0,
            erase_p: 0.0,
            ..Self::default()
        }
    }
}

const PAD_VALUE: f32 = -1.0;

fn hflip(image: &mut [f32], w: usize) {
    image.chunks_exact_mut(w).for_each(|row| row.reverse());
}

/// Shifts the image by `(dy, dx)` inside a `pad`-wide border, which is the
/// same as padding and then cropping at offset `(pad + dy, pad + dx)`.
fn pad_crop(image: &[f32], h: usize, w: usize, dy: isize, dx: isize) -> Vec<f32> {
    let channels = image.len() / (h * w);
    let mut out = vec![PAD_VALUE; image.len()];
    for c in 0..channels {
        for r in 0..h {
            let sr = r as isize + dy;
            if sr < 0 || sr >= h as isize {
                continue;
            }
            for col in 0..w {
                let sc = col as isize + dx;
                if sc >= 0 && sc < w as isize {
                    out[c * h * w + r * w + col] = image[c * h * w + sr as usize * w + sc as usize];
                }
            }
        }
    }
    out
}

/// Picks an erase rectangle `(top, left, height, width)`, or `None` after
/// repeated misfits.
fn erase_rect(h: usize, w: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Option<(usize, usize, usize, usize)> {
    let area = (h * w) as f64;
    for _ in 0..100 {
        let target = area * rng.random_range(cfg.erase_area.0..=cfg.erase_area.1);
        let aspect = rng.random_range(cfg.erase_aspect.0.ln()..=cfg.erase_aspect.1.ln()).exp();
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh >= 1 && ew >= 1 && eh < h && ew < w {
            let top = rng.random_range(0..=h - eh);
            let left = rng.random_range(0..=w - ew);
            return Some((top, left, eh, ew));
        }
    }
    None
}

/// Random flip, pad-and-crop and random erasing on a `[C, H, W]` image.
pub fn augment(image: &[f32], h: usize, w: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<f32> {
    let mut out = image.to_vec();
    if rng.random_bool(cfg.flip_p) {
        hflip(&mut out, w);
    }
    if cfg.pad > 0 {
        let p = cfg.pad as i64;
        let dy = rng.random_range(-p..=p) as isize;
        let dx = rng.random_range(-p..=p) as isize;
        out = pad_crop(&out, h, w, dy, dx);
    }
    if rng.random_bool(cfg.erase_p) {
        if let Some((top, left, eh, ew)) = erase_rect(h, w, cfg, rng) {
            let channels = out.len() / (h * w);
            for c in 0..channels {
                for r in top..top + eh {
                    for col in left..left + ew {
                        out[c * h * w + r * w + col] = rng.random_range(-1.0..=1.0);
                    }
                }
            }
        }
    }
    out
}
