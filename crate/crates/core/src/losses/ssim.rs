use crate::error::{contract, Result};
use crate::tensor::{Conv2dParams, Tensor, Var};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 2-D Gaussian of side `k` (row-major `k*k` values).
pub fn gaussian_window(k: usize, sigma: f64) -> Vec<f64> {
    let c = (k as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..k).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    let mut out = Vec::with_capacity(k * k);
    for a in &g {
        for b in &g {
            out.push(a * b / (s * s));
        }
    }
    out
}

/// Window side used for an `h x w` image: 11, or the smaller image side.
pub fn window_side(h: usize, w: usize) -> usize {
    SSIM_WINDOW.min(h).min(w)
}

fn filter<'g>(x: Var<'g>, kernel: Var<'g>) -> Result<Var<'g>> {
    let c = x.shape()[0];
    let g = x.graph();
    let params = Conv2dParams { stride: 1, pad: 0, dilation: 1 };
    let mut planes = Vec::with_capacity(c);
    for ch in 0..c {
        let shape = x.shape();
        let plane = x.slice(vec![(ch, ch + 1), (0, shape[1]), (0, shape[2])])?;
        planes.push(plane.conv2d(kernel, None, params)?);
    }
    Ok(if c == 1 { planes[0] } else { g.concat(&planes)? })
}

/// Mean SSIM over valid window positions of each channel of `[C, H, W]` inputs
/// (Gaussian window, dynamic range 1).
pub fn ssim<'g>(x: Var<'g>, y: Var<'g>) -> Result<Var<'g>> {
    let shape = x.shape();
    if shape != y.shape() || shape.len() != 3 {
        return contract(format!("ssim needs two [C, H, W] inputs of one shape, got {:?} and {:?}", shape, y.shape()));
    }
    let k = window_side(shape[1], shape[2]);
    let g = x.graph();
    let kernel = g.constant(Tensor::new(vec![1, 1, k, k], gaussian_window(k, SSIM_SIGMA))?);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mx = filter(x, kernel)?;
    let my = filter(y, kernel)?;
    let mxx = mx.square()?;
    let myy = my.square()?;
    let mxy = mx.mul(my)?;
    let sxx = filter(x.square()?, kernel)?.sub(mxx)?;
    let syy = filter(y.square()?, kernel)?.sub(myy)?;
    let sxy = filter(x.mul(y)?, kernel)?.sub(mxy)?;
    let num = mxy.scale(2.0)?.shift(c1)?.mul(sxy.scale(2.0)?.shift(c2)?)?;
    let den = mxx.add(myy)?.shift(c1)?.mul(sxx.add(syy)?.shift(c2)?)?;
    Ok(num.div(den)?.mean()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn checker(n: usize, invert: bool) -> Tensor {
        let data = (0..n * n)
            .map(|i| {
                let v = ((i / n + i % n) % 2) as f64;
                if invert {
                    1.0 - v
                } else {
                    v
                }
            })
            .collect();
        Tensor::new(vec![1, n, n], data).unwrap()
    }

    #[test]
    fn window_is_normalized() {
        let w = gaussian_window(11, 1.5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert_eq!(w[5 * 11 + 5], w.iter().cloned().fold(0.0, f64::max));
    }

    #[test]
    fn self_similarity_and_symmetry() {
        let g = Graph::new();
        let data: Vec<f64> = (0..3 * 12 * 13).map(|i| ((i * 7919) % 97) as f64 / 97.0).collect();
        let data2: Vec<f64> = (0..3 * 12 * 13).map(|i| ((i * 104729) % 89) as f64 / 89.0).collect();
        let x = g.constant(Tensor::new(vec![3, 12, 13], data).unwrap());
        let y = g.constant(Tensor::new(vec![3, 12, 13], data2).unwrap());
        assert!((ssim(x, x).unwrap().item() - 1.0).abs() < 1e-12);
        let a = ssim(x, y).unwrap().item();
        let b = ssim(y, x).unwrap().item();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn inverted_checkerboard_is_negative() {
        let g = Graph::new();
        let s = ssim(g.constant(checker(16, false)), g.constant(checker(16, true))).unwrap().item();
        assert!(s < 0.0, "{s}");
    }

    #[test]
    fn small_images_shrink_the_window() {
        let g = Graph::new();
        let x = g.constant(checker(4, false));
        assert!((ssim(x, x).unwrap().item() - 1.0).abs() < 1e-12);
        assert_eq!(window_side(4, 20), 4);
    }
}
