//! Dataset refinement: rebuilds (I, A, S) triplets so that the image is exactly the product
//! of a gray shading and an albedo, with a temporal variant that pools statistics and
//! repair samples across optical-flow correspondences.

mod lle;
mod sequence;

pub use lle::{lle_reconstruct, lle_weights, LleParams};
pub use sequence::{refine_sequence, SequenceFrame};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::imageio::{gray_from_lightness, lab_to_rgb, lightness, rgb_to_lab, Image};

/// Lower clamp for every denominator in the pipeline.
pub const DENOM_FLOOR: f64 = 1e-6;

/// An input triplet: image, albedo (RGB) and shading (gray or RGB), all sRGB.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub image: Image,
    pub albedo: Image,
    pub shading: Image,
}

/// Per-frame record written next to each refined frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameStats {
    pub mu: f64,
    pub sigma: f64,
    pub mu_hat: f64,
    pub sigma_hat: f64,
    /// Pixels that entered the (mu_hat, sigma_hat) estimate.
    pub stat_pixels: usize,
    /// Pixels repaired by LLE.
    pub invalid_pixels: usize,
    /// Invalid pixels filled from adjacent frames (temporal mode only).
    #[serde(default)]
    pub propagated_pixels: usize,
    /// The albedo lightness was constant, so the shift collapsed it to mu_hat.
    pub constant_albedo: bool,
    /// MSE between the input image and the per-channel product of the input albedo and shading.
    pub input_mse: f64,
    /// MSE between the input image and the refined image.
    pub resynthesis_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinedTriplet {
    pub image: Image,
    pub albedo: Image,
    /// Single-channel sRGB whose lightness is the refined shading.
    pub shading: Image,
    /// Validity mask of step 3.
    pub mask: Vec<bool>,
    pub stats: FrameStats,
}

impl RefinedTriplet {
    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.stats)?)?;
        Ok(())
    }
}

/// Â = I/S and Ŝ = I/A on lightness, denominators clamped.
pub fn reconstruct(i_l: &[f64], a_l: &[f64], s_l: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let a_hat = i_l.iter().zip(s_l).map(|(i, s)| i / s.max(DENOM_FLOOR)).collect();
    let s_hat = i_l.iter().zip(a_l).map(|(i, a)| i / a.max(DENOM_FLOOR)).collect();
    (a_hat, s_hat)
}

pub fn validity_mask(a_hat: &[f64], s_hat: &[f64]) -> Vec<bool> {
    let open = |v: f64| v > 0.0 && v < 1.0;
    a_hat.iter().zip(s_hat).map(|(&a, &s)| open(a) && open(s)).collect()
}

/// Population mean and standard deviation.
pub fn moments(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Affine map of `a_l` from its own moments onto (`mu_hat`, `sigma_hat`), clamped to
/// [1e-6, 1]. Returns the shifted values and whether `a_l` was constant.
pub fn shift_distribution(a_l: &[f64], mu_hat: f64, sigma_hat: f64) -> (Vec<f64>, bool) {
    let (mu, sigma) = moments(a_l).unwrap_or((0.0, 0.0));
    shift_from(a_l, (mu, sigma), (mu_hat, sigma_hat))
}

/// As [`shift_distribution`] with explicit source moments.
pub fn shift_from(a_l: &[f64], (mu, sigma): (f64, f64), (mu_hat, sigma_hat): (f64, f64)) -> (Vec<f64>, bool) {
    let constant = sigma == 0.0;
    let shifted = a_l
        .iter()
        .map(|&a| {
            let v = if constant { mu_hat } else { sigma_hat * (a - mu) / sigma + mu_hat };
            v.clamp(DENOM_FLOOR, 1.0)
        })
        .collect();
    (shifted, constant)
}

/// Lightness planes and masks of one frame before any statistics are applied.
#[derive(Clone, Debug)]
pub(crate) struct Prepared {
    width: usize,
    height: usize,
    image: Image,
    albedo_lab: Image,
    i_l: Vec<f64>,
    a_l: Vec<f64>,
    a_hat: Vec<f64>,
    mask: Vec<bool>,
    input_mse: f64,
}

impl Prepared {
    pub(crate) fn new(t: &Triplet) -> Result<Self> {
        let (w, h) = (t.image.width, t.image.height);
        for (name, img) in [("albedo", &t.albedo), ("shading", &t.shading)] {
            if (img.width, img.height) != (w, h) {
                return contract(format!("{name} is {}x{}, image is {w}x{h}", img.width, img.height));
            }
        }
        let image = t.image.to_rgb();
        let albedo = t.albedo.to_rgb();
        let albedo_lab = rgb_to_lab(&albedo)?;
        let i_l = lightness(&image)?;
        let a_l = lightness(&albedo_lab)?;
        let s_l = lightness(&t.shading)?;
        let (a_hat, s_hat) = reconstruct(&i_l, &a_l, &s_l);
        let mask = validity_mask(&a_hat, &s_hat);
        let shading = t.shading.to_rgb();
        let product: Vec<f64> = albedo.data.iter().zip(&shading.data).map(|(a, s)| a * s).collect();
        let input_mse = mean_sq_diff(&image.data, &product);
        Ok(Prepared { width: w, height: h, image, albedo_lab, i_l, a_l, a_hat, mask, input_mse })
    }

    pub(crate) fn valid_a_hat(&self) -> impl Iterator<Item = f64> + '_ {
        self.a_hat.iter().zip(&self.mask).filter(|p| *p.1).map(|p| *p.0)
    }
}

/// Steps 5-6 for given target moments: the shifted albedo lightness, the implied shading
/// and which shading pixels need repair.
#[derive(Clone, Debug)]
pub(crate) struct Shifted {
    source: (f64, f64),
    target: (f64, f64),
    stat_pixels: usize,
    a_tilde: Vec<f64>,
    s_tilde: Vec<f64>,
    invalid: Vec<bool>,
    constant: bool,
}

impl Shifted {
    pub(crate) fn new(p: &Prepared, source: (f64, f64), target: (f64, f64), stat_pixels: usize) -> Self {
        let (a_tilde, constant) = shift_from(&p.a_l, source, target);
        let s_tilde: Vec<f64> = p.i_l.iter().zip(&a_tilde).map(|(i, a)| i / a.max(DENOM_FLOOR)).collect();
        let invalid = s_tilde.iter().zip(&p.mask).map(|(&s, &m)| !m || !(s > 0.0 && s < 1.0)).collect();
        Shifted { source, target, stat_pixels, a_tilde, s_tilde, invalid, constant }
    }
}

/// Steps 7-8.
pub(crate) fn finish(
    p: &Prepared,
    sh: &Shifted,
    params: &LleParams,
) -> Result<RefinedTriplet> {
    let (w, h) = (p.width, p.height);
    let s_star = lle_reconstruct(&sh.s_tilde, &sh.invalid, &p.i_l, w, h, params)?;
    let mut a_lab = p.albedo_lab.clone();
    let mut i_lab = p.albedo_lab.clone();
    for (k, (&a, &s)) in sh.a_tilde.iter().zip(&s_star).enumerate() {
        let (ca, cb) = (p.albedo_lab.data[3 * k + 1], p.albedo_lab.data[3 * k + 2]);
        a_lab.data[3 * k..3 * k + 3].copy_from_slice(&[100.0 * a, ca, cb]);
        i_lab.data[3 * k..3 * k + 3].copy_from_slice(&[100.0 * a * s, ca * s, cb * s]);
    }
    let albedo = lab_to_rgb(&a_lab)?;
    let image = lab_to_rgb(&i_lab)?;
    let shading = gray_from_lightness(w, h, &s_star)?;
    let stats = FrameStats {
        mu: sh.source.0,
        sigma: sh.source.1,
        mu_hat: sh.target.0,
        sigma_hat: sh.target.1,
        stat_pixels: sh.stat_pixels,
        invalid_pixels: sh.invalid.iter().filter(|&&b| b).count(),
        propagated_pixels: 0,
        constant_albedo: sh.constant,
        input_mse: p.input_mse,
        resynthesis_mse: mean_sq_diff(&p.image.data, &image.data),
    };
    Ok(RefinedTriplet { image, albedo, shading, mask: p.mask.clone(), stats })
}

fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

fn target_moments(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return contract(format!(
            "only {} pixel(s) pass the validity test; albedo statistics need at least 2",
            values.len()
        ));
    }
    Ok(moments(values).expect("non-empty"))
}

/// Single-frame refinement.
pub fn refine_frame(t: &Triplet) -> Result<RefinedTriplet> {
    refine_frame_with(t, &LleParams::default())
}

pub fn refine_frame_with(t: &Triplet, params: &LleParams) -> Result<RefinedTriplet> {
    let p = Prepared::new(t)?;
    let valid: Vec<f64> = p.valid_a_hat().collect();
    let target = target_moments(&valid)?;
    let source = moments(&p.a_l).expect("non-empty frame");
    let sh = Shifted::new(&p, source, target, valid.len());
    finish(&p, &sh, params)
}

/// Builds an image whose lightness is `A_L * S` with chroma scaled by `S`: the inverse of what
/// refinement assumes. `shading` is single-channel lightness in [0, 1].
pub fn compose(albedo: &Image, shading_l: &[f64]) -> Result<Image> {
    let mut lab = rgb_to_lab(&albedo.to_rgb())?;
    for (px, &s) in lab.data.chunks_exact_mut(3).zip(shading_l) {
        px.iter_mut().for_each(|v| *v *= s);
    }
    Ok(lab_to_rgb(&lab)?)
}
