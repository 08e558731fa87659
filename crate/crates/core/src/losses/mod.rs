//! Training objectives as differentiable scalars on a [`crate::tensor::Graph`].
//!
//! Image layers are `[C, H, W]` variables. Elementwise L1/L2 norms are means over
//! elements so weights do not depend on resolution.

mod basic;
mod check;
mod feature;
mod sparse;
mod ssim;
mod temporal;

pub use check::{gradient_suite, GradCheckEntry, GRADCHECK_SHAPE, GRADCHECK_TOLERANCE};
pub use basic::{gradient_loss, image_gradients, reconstruction_loss};
pub use feature::{cosine_squared, fdc, fdd, feature_distance, rescale, rescale_center};
pub use sparse::{
    albedo_affinity, albedo_smoothness, default_margin, gray, ordinal_error, ordinal_loss, shading_smoothness,
    sinkhorn_affinity, SinkhornAffinity, SmoothnessParams, LOG_FLOOR, NEIGHBORS,
};
pub use ssim::{gaussian_window, ssim, window_side, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
pub use temporal::{temporal_loss, warp, warp_mask, warp_planar, TemporalSupport};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    /// Weights of reconstruction, gradient, FDD and FDC terms.
    pub lambda: [f64; 4],
    pub omega: Vec<f64>,
    pub alpha_fdd: f64,
    pub beta_fdd: f64,
    pub gamma: Vec<f64>,
    pub alpha_fdc: f64,
    pub beta_fdc: f64,
    pub ordinal: f64,
    pub albedo_smooth: f64,
    pub shading_smooth: f64,
    pub temporal_albedo: f64,
    pub temporal_shading: f64,
    pub margin: f64,
    pub smoothness: SmoothnessParams,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 30.0,
            ssim: 0.5,
            lambda: [1.0, 1.5, 0.1, 1.0],
            omega: vec![0.01, 0.1, 0.5, 0.7, 1.0],
            alpha_fdd: 0.3,
            beta_fdd: 0.1,
            gamma: vec![1.0; 5],
            alpha_fdc: 0.1,
            beta_fdc: 0.9,
            ordinal: 1.0,
            albedo_smooth: 1.0,
            shading_smooth: 1.0,
            temporal_albedo: 1.0,
            temporal_shading: 1.0,
            margin: default_margin(),
            smoothness: SmoothnessParams::default(),
        }
    }
}

impl LossWeights {
    /// Defaults for sparsely labelled data: FDC only on the two deepest levels.
    pub fn sparse_default() -> Self {
        LossWeights {
            gamma: vec![0.0, 0.0, 0.0, 1.0, 1.0],
            ..Default::default()
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.omega.len() != depth || self.gamma.len() != depth {
            return contract(format!(
                "omega ({}) and gamma ({}) must have one weight per encoder level ({depth})",
                self.omega.len(),
                self.gamma.len()
            ));
        }
        let scalars = [
            self.l1,
            self.ssim,
            self.alpha_fdd,
            self.beta_fdd,
            self.alpha_fdc,
            self.beta_fdc,
            self.ordinal,
            self.albedo_smooth,
            self.shading_smooth,
            self.temporal_albedo,
            self.temporal_shading,
            self.margin,
        ];
        let all = scalars.iter().chain(&self.lambda).chain(&self.omega).chain(&self.gamma);
        if let Some(w) = all.into_iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return contract(format!("loss weights must be finite and nonnegative, found {w}"));
        }
        Ok(())
    }
}

/// Individual objective terms; absent terms are `None`.
#[derive(Clone, Copy, Default)]
pub struct Terms<'g> {
    pub rec: Option<Var<'g>>,
    pub grad: Option<Var<'g>>,
    pub fdd: Option<Var<'g>>,
    pub fdc: Option<Var<'g>>,
    pub ordinal: Option<Var<'g>>,
    pub albedo_smooth: Option<Var<'g>>,
    pub shading_smooth: Option<Var<'g>>,
    pub temporal: Option<Var<'g>>,
}

fn weighted_sum<'g>(parts: &[(f64, Var<'g>)]) -> Result<Var<'g>> {
    let Some((_, first)) = parts.first() else {
        return contract("no loss terms to combine");
    };
    let mut total = first.graph().scalar(0.0);
    for &(w, v) in parts {
        total = total.add(v.scale(w)?)?;
    }
    Ok(total)
}

fn need<'g>(name: &str, v: Option<Var<'g>>) -> Result<Var<'g>> {
    v.ok_or_else(|| crate::Error::Contract(format!("missing loss term {name}")))
}

/// lambda1 rec + lambda2 grad + lambda3 fdd + lambda4 fdc.
pub fn total_loss_dense<'g>(t: &Terms<'g>, lambda: [f64; 4]) -> Result<Var<'g>> {
    weighted_sum(&[
        (lambda[0], need("rec", t.rec)?),
        (lambda[1], need("grad", t.grad)?),
        (lambda[2], need("fdd", t.fdd)?),
        (lambda[3], need("fdc", t.fdc)?),
    ])
}

/// The dense total (built without albedo ground truth) plus ordinal and smoothness terms.
pub fn total_loss_sparse<'g>(t: &Terms<'g>, w: &LossWeights) -> Result<Var<'g>> {
    let Some(ordinal) = t.ordinal else {
        return contract("sparse objective needs a judgement set (ordinal term missing)");
    };
    let base = total_loss_dense(t, w.lambda)?;
    weighted_sum(&[
        (1.0, base),
        (w.ordinal, ordinal),
        (w.albedo_smooth, need("albedo_smooth", t.albedo_smooth)?),
        (w.shading_smooth, need("shading_smooth", t.shading_smooth)?),
    ])
}
