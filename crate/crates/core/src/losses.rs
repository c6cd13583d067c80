//! Identity losses and the weighted joint objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_orth: f64,
    pub lambda_struct: f64,
    pub label_smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_orth: 10.0,
            lambda_struct: 1.0,
            label_smoothing: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_orth >= 0.0 && self.lambda_struct >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Scalar values of every loss term of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_id: f64,
    pub l_ce: f64,
    pub l_tri: f64,
    pub l_orth: f64,
    pub l_struct: f64,
    pub total: f64,
}

/// Mean over the batch of `-sum_k q_k log softmax(z)_k` with
/// `q = (1 - eps) onehot + eps / K`.
pub fn smoothed_cross_entropy<'t, T: Scalar>(logits: Var<'t, T>, labels: &[usize], eps: f64) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    let (b, k) = match *shape {
        [b, k] if b == labels.len() => (b, k),
        _ => {
            return Err(Error::Dimension(format!(
                "logits {shape:?} for {} labels",
                labels.len()
            )))
        }
    };
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Usage(format!("label {bad} outside [0, {k})")));
    }
    let off = eps / k as f64;
    let mut q = vec![T::from_f64_lossy(off); b * k];
    for (i, &y) in labels.iter().enumerate() {
        q[i * k + y] = T::from_f64_lossy(1.0 - eps + off);
    }
    let q = logits.tape().constant_from(&[b, k], q)?;
    let inv_b = T::one() / T::from_usize(b).expect("batch");
    Ok(logits.log_softmax()?.mul(q)?.sum().scale(-inv_b))
}

/// Pairwise Euclidean distances of `[B, d]` rows, `[B, B]`.
pub fn pairwise_distance<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let (b, d) = (shape[0], shape[1]);
    let diff = x.reshape(&[b, 1, d])?.sub(x.reshape(&[1, b, d])?)?;
    Ok(diff.square().sum_axis(2, false)?.clamp_min(T::from_f64_lossy(1e-12)).sqrt())
}

/// Soft-margin triplet with softmax-weighted positive and negative distances.
///
/// For each anchor, positives (same label, excluding the anchor itself) are
/// weighted by a softmax over their distances and negatives by a softmax
/// over negated distances; the anchor loss is `softplus(d_p - d_n)`.
/// Anchors without a positive or without a negative are left out of the mean.
pub fn weighted_triplet<'t, T: Scalar>(features: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let shape = features.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Dimension(format!(
            "features {shape:?} for {} labels",
            labels.len()
        )));
    }
    let b = labels.len();
    let tape = features.tape();
    let mut pos = vec![false; b * b];
    let mut neg = vec![false; b * b];
    for i in 0..b {
        for j in 0..b {
            pos[i * b + j] = i != j && labels[i] == labels[j];
            neg[i * b + j] = labels[i] != labels[j];
        }
    }
    let valid: Vec<T> = (0..b)
        .map(|i| {
            let row = i * b..(i + 1) * b;
            let ok = pos[row.clone()].iter().any(|&v| v) && neg[row].iter().any(|&v| v);
            if ok { T::one() } else { T::zero() }
        })
        .collect();
    let count = valid.iter().filter(|&&v| v > T::zero()).count();
    if count == 0 {
        return Ok(tape.scalar(T::zero()));
    }
    let dist = pairwise_distance(features)?;
    let wp = dist.masked_softmax(&pos)?.mul(dist)?.sum_axis(1, false)?;
    let wn = dist.neg().masked_softmax(&neg)?.mul(dist)?.sum_axis(1, false)?;
    let per_anchor = wp.sub(wn)?.softplus();
    let valid = tape.constant_from(&[b], valid)?;
    let inv = T::one() / T::from_usize(count).expect("count");
    Ok(per_anchor.mul(valid)?.sum().scale(inv))
}

/// Combines the component losses into the weighted total.
///
/// Every component must be finite; otherwise a numeric error names it.
pub fn joint_loss<'t, T: Scalar>(
    ce: Var<'t, T>,
    tri: Var<'t, T>,
    orth: Var<'t, T>,
    structural: Var<'t, T>,
    weights: &LossWeights,
) -> Result<(Var<'t, T>, LossBreakdown)> {
    let parts = [("l_ce", ce), ("l_tri", tri), ("l_orth", orth), ("l_struct", structural)];
    for (name, v) in parts {
        let x = v.item().to_f64_lossy();
        if !x.is_finite() {
            return Err(Error::Numeric(format!("{name} is {x}")));
        }
    }
    let total = ce
        .add(tri)?
        .add(orth.scale(T::from_f64_lossy(weights.lambda_orth)))?
        .add(structural.scale(T::from_f64_lossy(weights.lambda_struct)))?;
    let v = |x: Var<'t, T>| x.item().to_f64_lossy();
    let breakdown = LossBreakdown {
        l_id: v(ce) + v(tri),
        l_ce: v(ce),
        l_tri: v(tri),
        l_orth: v(orth),
        l_struct: v(structural),
        total: v(total),
    };
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric(format!("total loss is {}", breakdown.total)));
    }
    Ok((total, breakdown))
}
