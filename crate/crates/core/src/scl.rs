//! Structure-aware consistency: gradient-energy descriptors of an
//! intermediate feature grid and a cross-modal prototype alignment loss.
//!
//! Spatial gradients are central differences on the grid interior only; the
//! per-channel energy averages `|G|` over the interior cells.

use std::collections::BTreeMap;

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Epsilon inside the instance normalisation of descriptors.
pub const IN_EPS: f64 = 1e-5;

/// Per-sample structural descriptor, all `[B, C]`.
#[derive(Debug, Clone, Copy)]
pub struct StructDescriptor<'t, T: Scalar> {
    pub e_x: Var<'t, T>,
    pub e_y: Var<'t, T>,
    pub f_struct: Var<'t, T>,
    pub f_hat: Var<'t, T>,
}

/// Modality prototypes of one identity, each `[1, C]` when present.
#[derive(Debug, Clone, Copy)]
pub struct PrototypePair<'t, T: Scalar> {
    pub identity: usize,
    pub c_opt: Option<Var<'t, T>>,
    pub c_sar: Option<Var<'t, T>>,
}

fn grid_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] if h >= 3 && w >= 3 => Ok((b, c, h, w)),
        _ => Err(Error::Dimension(format!(
            "spatial gradients need a [B, C, H>=3, W>=3] grid, got {shape:?}"
        ))),
    }
}

/// Interior central differences `(G_x, G_y)`, each `[B, C, H-2, W-2]`.
pub fn spatial_gradients<'t, T: Scalar>(grid: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (_, _, h, w) = grid_dims(&grid.shape())?;
    let rows = grid.narrow(2, 1, h - 2)?;
    let gx = rows.narrow(3, 2, w - 2)?.sub(rows.narrow(3, 0, w - 2)?)?;
    let cols = grid.narrow(3, 1, w - 2)?;
    let gy = cols.narrow(2, 2, h - 2)?.sub(cols.narrow(2, 0, h - 2)?)?;
    Ok((gx, gy))
}

/// Mean absolute gradient per channel over the interior, `[B, C]` each.
pub fn gradient_energy<'t, T: Scalar>(gx: Var<'t, T>, gy: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let energy = |g: Var<'t, T>| -> Result<Var<'t, T>> {
        let s = g.shape();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(Error::Dimension(format!("empty interior in gradient of shape {s:?}")));
        }
        g.abs().reshape(&[s[0], s[1], s[2] * s[3]])?.mean_axis(2, false)
    };
    Ok((energy(gx)?, energy(gy)?))
}

/// Per-sample standardisation over channels: `(f - mean) / sqrt(var + eps)`.
pub fn instance_normalize<'t, T: Scalar>(f: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
    let shape = f.shape();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::Dimension(format!(
            "instance normalisation needs [B, C>=2], got {shape:?}"
        )));
    }
    f.layer_norm(None, None, T::from_f64_lossy(eps))
}

/// Full descriptor pipeline for a `[B, C, H', W']` grid.
pub fn describe<'t, T: Scalar>(grid: Var<'t, T>) -> Result<StructDescriptor<'t, T>> {
    let (gx, gy) = spatial_gradients(grid)?;
    let (e_x, e_y) = gradient_energy(gx, gy)?;
    let f_struct = e_x.add(e_y)?;
    let f_hat = instance_normalize(f_struct, IN_EPS)?;
    Ok(StructDescriptor {
        e_x,
        e_y,
        f_struct,
        f_hat,
    })
}

/// Per identity, the mean normalised descriptor of its optical and of its
/// SAR samples in the batch. Sorted by identity.
pub fn build_prototypes<'t, T: Scalar>(
    f_hat: Var<'t, T>,
    labels: &[usize],
    modalities: &[Modality],
) -> Result<Vec<PrototypePair<'t, T>>> {
    let shape = f_hat.shape();
    let b = shape[0];
    if b == 0 || labels.len() != b || modalities.len() != b {
        return Err(Error::Dimension(format!(
            "{} labels and {} modality flags for descriptors {shape:?}",
            labels.len(),
            modalities.len()
        )));
    }
    let mut groups: BTreeMap<(usize, u8), Vec<usize>> = BTreeMap::new();
    for (i, (&y, &m)) in labels.iter().zip(modalities).enumerate() {
        groups.entry((y, u8::from(m))).or_default().push(i);
    }
    // One averaging row per (identity, modality) group.
    let rows = groups.len();
    let mut avg = vec![T::zero(); rows * b];
    for (r, members) in groups.values().enumerate() {
        let wgt = T::one() / T::from_usize(members.len()).expect("count");
        for &i in members {
            avg[r * b + i] = wgt;
        }
    }
    let means = f_hat.tape().constant_from(&[rows, b], avg)?.matmul(f_hat)?;
    let mut pairs: BTreeMap<usize, PrototypePair<'t, T>> = BTreeMap::new();
    for (r, &(y, m)) in groups.keys().enumerate() {
        let proto = means.narrow(0, r, 1)?;
        let entry = pairs.entry(y).or_insert(PrototypePair {
            identity: y,
            c_opt: None,
            c_sar: None,
        });
        if m == u8::from(Modality::Optical) {
            entry.c_opt = Some(proto);
        } else {
            entry.c_sar = Some(proto);
        }
    }
    Ok(pairs.into_values().collect())
}

/// Mean over identities with both prototypes of `||c_opt - c_sar||^2`; zero
/// when no identity has both.
pub fn struct_loss<'t, T: Scalar>(tape: &'t Tape<T>, pairs: &[PrototypePair<'t, T>]) -> Result<Var<'t, T>> {
    let diffs = pairs
        .iter()
        .filter_map(|p| match (p.c_opt, p.c_sar) {
            (Some(o), Some(s)) => Some(o.sub(s)),
            _ => None,
        })
        .collect::<Result<Vec<_>>>()?;
    if diffs.is_empty() {
        return Ok(tape.scalar(T::zero()));
    }
    let n = T::from_usize(diffs.len()).expect("count");
    Ok(Var::concat(&diffs, 0)?.square().sum().scale(T::one() / n))
}

/// Structural energy map `sum_c (|G_x| + |G_y|)` per sample, `[H', W']`
/// row-major, zero on the border where gradients are undefined.
pub fn energy_maps<T: Scalar>(grid: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let (b, c, h, w) = grid_dims(grid.shape())?;
    let x = grid.data();
    let at = |n: usize, ch: usize, r: usize, col: usize| x[((n * c + ch) * h + r) * w + col].to_f64_lossy();
    let mut maps = vec![vec![0.0; h * w]; b];
    for (n, map) in maps.iter_mut().enumerate() {
        for r in 1..h - 1 {
            for col in 1..w - 1 {
                map[r * w + col] = (0..c)
                    .map(|ch| {
                        (at(n, ch, r, col + 1) - at(n, ch, r, col - 1)).abs()
                            + (at(n, ch, r + 1, col) - at(n, ch, r - 1, col)).abs()
                    })
                    .sum();
            }
        }
    }
    Ok(maps)
}

/// Scales a map to 8 bits (max -> 255) and enlarges it by pixel replication.
pub fn heatmap_pixels(map: &[f64], h: usize, w: usize, upscale: usize) -> Vec<u8> {
    let max = map.iter().cloned().fold(0.0, f64::max);
    let mut out = vec![0u8; h * w * upscale * upscale];
    let ow = w * upscale;
    for r in 0..h * upscale {
        for col in 0..ow {
            let v = map[(r / upscale) * w + col / upscale];
            out[r * ow + col] = if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 };
        }
    }
    out
}
