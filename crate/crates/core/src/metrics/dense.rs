use crate::error::{contract, Result};
use crate::imageio::Image;
use crate::losses::{gaussian_window, window_side, SSIM_K1, SSIM_K2, SSIM_SIGMA};

fn check(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return contract(format!("metric inputs differ in size ({} vs {}) or are empty", pred.len(), gt.len()));
    }
    Ok(())
}

/// argmin_a |a pred - gt|^2, or `None` when `pred` is all zero.
pub fn scale_factor(pred: &[f64], gt: &[f64]) -> Option<f64> {
    let pp: f64 = pred.iter().map(|p| p * p).sum();
    let pg: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    (pp > 0.0).then(|| pg / pp)
}

fn sse(pred: &[f64], gt: &[f64], alpha: f64) -> f64 {
    pred.iter().zip(gt).map(|(p, g)| (alpha * p - g).powi(2)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MseValue {
    pub value: f64,
    /// The scale factor was undefined (all-zero prediction) and taken as 0.
    pub degenerate: bool,
}

/// Mean squared error; with `scale_invariant`, `pred` is first scaled by the least-squares
/// factor.
pub fn mse(pred: &[f64], gt: &[f64], scale_invariant: bool) -> Result<MseValue> {
    check(pred, gt)?;
    let (alpha, degenerate) = if scale_invariant {
        scale_factor(pred, gt).map_or((0.0, true), |a| (a, false))
    } else {
        (1.0, false)
    };
    Ok(MseValue {
        value: sse(pred, gt, alpha) / pred.len() as f64,
        degenerate,
    })
}

pub const LMSE_WINDOW: usize = 20;
pub const LMSE_STRIDE: usize = 10;

/// Mean over sliding windows of the scale-invariant MSE divided by mean(gt^2) of the window.
/// Windows over constant ground truth are skipped; all channels of a window share one scale.
pub fn lmse(pred: &Image, gt: &Image, window: usize, stride: usize) -> Result<f64> {
    check(&pred.data, &gt.data)?;
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return contract("lmse inputs differ in size");
    }
    if window == 0 || stride == 0 || gt.width < window || gt.height < window {
        return contract(format!("lmse needs at least one {window}x{window} window in a {}x{} image", gt.width, gt.height));
    }
    let c = gt.channels;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut p = Vec::with_capacity(window * window * c);
    let mut g = Vec::with_capacity(window * window * c);
    for y0 in (0..=gt.height - window).step_by(stride) {
        for x0 in (0..=gt.width - window).step_by(stride) {
            p.clear();
            g.clear();
            for y in y0..y0 + window {
                let row = (y * gt.width + x0) * c;
                p.extend_from_slice(&pred.data[row..row + window * c]);
                g.extend_from_slice(&gt.data[row..row + window * c]);
            }
            if g.iter().all(|&v| v == g[0]) {
                continue;
            }
            let n = g.len() as f64;
            let alpha = scale_factor(&p, &g).unwrap_or(0.0);
            let energy = g.iter().map(|v| v * v).sum::<f64>() / n;
            total += sse(&p, &g, alpha) / n / energy;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Mean SSIM evaluated window by window on planar `[c, h, w]` buffers.
pub fn ssim_plain(x: &[f64], y: &[f64], c: usize, h: usize, w: usize) -> f64 {
    let k = window_side(h, w);
    let win = gaussian_window(k, SSIM_SIGMA);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut total = 0.0;
    for ch in 0..c {
        let xp = &x[ch * h * w..(ch + 1) * h * w];
        let yp = &y[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..k {
                    for dx in 0..k {
                        let wt = win[dy * k + dx];
                        let i = (oy + dy) * w + ox + dx;
                        mx += wt * xp[i];
                        my += wt * yp[i];
                        sxx += wt * xp[i] * xp[i];
                        syy += wt * yp[i] * yp[i];
                        sxy += wt * xp[i] * yp[i];
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    total / (c * oh * ow) as f64
}

pub fn ssim_images(pred: &Image, gt: &Image) -> Result<f64> {
    check(&pred.data, &gt.data)?;
    if (pred.width, pred.height, pred.channels) != (gt.width, gt.height, gt.channels) {
        return contract("ssim inputs differ in shape");
    }
    let (p, g) = (pred.to_tensor(), gt.to_tensor());
    Ok(ssim_plain(p.data(), g.data(), gt.channels, gt.height, gt.width))
}

/// (1 - SSIM) / 2.
pub fn dssim(pred: &Image, gt: &Image) -> Result<f64> {
    Ok(dssim_from_ssim(ssim_images(pred, gt)?))
}

pub fn dssim_from_ssim(ssim: f64) -> f64 {
    (1.0 - ssim) / 2.0
}

/// 1 - SSIM, the variant without halving.
pub fn dssim_unhalved(pred: &Image, gt: &Image) -> Result<f64> {
    Ok(1.0 - ssim_images(pred, gt)?)
}
