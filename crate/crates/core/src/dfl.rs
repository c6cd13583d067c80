//! Shared/specific disentanglement of the terminal representation.
//!
//! Two linear heads split `F^(L)` into a shared identity feature and a
//! modality-specific feature; an orthogonality penalty keeps them apart and
//! the retrieval feature is their elementwise sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Var};

/// Floor on row norms inside l2 normalisation.
pub const NORM_FLOOR: f64 = 1e-12;

/// How the retrieval feature is built from the two projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Additive,
    Concat,
    SharedOnly,
    SpecificOnly,
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::Additive => "additive",
            FusionMode::Concat => "concat",
            FusionMode::SharedOnly => "shared_only",
            FusionMode::SpecificOnly => "specific_only",
        })
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(FusionMode::Additive),
            "concat" => Ok(FusionMode::Concat),
            "shared_only" => Ok(FusionMode::SharedOnly),
            "specific_only" => Ok(FusionMode::SpecificOnly),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

/// Which terminal heads the model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub dfl_on: bool,
    pub fusion: FusionMode,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            dfl_on: true,
            fusion: FusionMode::Additive,
        }
    }
}

impl HeadConfig {
    pub fn feature_dim(&self, d: usize) -> usize {
        if self.dfl_on && self.fusion == FusionMode::Concat {
            2 * d
        } else {
            d
        }
    }
}

/// Row-wise `f / max(||f||, floor)` for `[B, d]`.
pub fn l2_normalize<'t, T: Scalar>(f: Var<'t, T>) -> Result<Var<'t, T>> {
    let norms = f
        .square()
        .sum_axis(1, true)?
        .sqrt()
        .clamp_min(T::from_f64_lossy(NORM_FLOOR));
    f.div(norms)
}

/// Mean over the batch of `|<f_sh/|f_sh|, f_sp/|f_sp|>|`, in `[0, 1]`.
pub fn orth_loss<'t, T: Scalar>(shared: Var<'t, T>, specific: Var<'t, T>) -> Result<Var<'t, T>> {
    if shared.shape() != specific.shape() || shared.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "orth_loss of {:?} and {:?}",
            shared.shape(),
            specific.shape()
        )));
    }
    let cos = l2_normalize(shared)?
        .mul(l2_normalize(specific)?)?
        .sum_axis(1, false)?;
    Ok(cos.abs().mean())
}

/// Parameter-free additive fusion.
pub fn fuse<'t, T: Scalar>(shared: Var<'t, T>, specific: Var<'t, T>) -> Result<Var<'t, T>> {
    if shared.shape() != specific.shape() {
        return Err(Error::Dimension(format!(
            "cannot fuse {:?} with {:?}",
            shared.shape(),
            specific.shape()
        )));
    }
    shared.add(specific)
}
