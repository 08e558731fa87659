use std::sync::Arc;

use crate::error::{contract, Result};
use crate::imageio::FlowField;
use crate::tensor::{bilinear_taps, Tensor, Var};

/// Pixels whose flow is known and whose target `i + u(i)` falls inside the frame.
pub fn warp_mask(flow: &FlowField) -> Vec<bool> {
    (0..flow.height * flow.width)
        .map(|i| {
            let (x, y) = ((i % flow.width) as f64, (i / flow.width) as f64);
            flow.valid[i] && bilinear_taps(x + flow.u[i], y + flow.v[i], flow.height, flow.width).is_some()
        })
        .collect()
}

fn flow_arrays(flow: &FlowField) -> (Arc<[f64]>, Arc<[f64]>) {
    // unknown flow is routed out of bounds so it samples nothing
    let fix = |d: &[f64]| -> Arc<[f64]> {
        d.iter()
            .zip(&flow.valid)
            .map(|(&x, &ok)| if ok { x } else { f64::INFINITY })
            .collect()
    };
    (fix(&flow.u), fix(&flow.v))
}

/// Bilinear backward warp `out(i) = frame(i + u(i))` with its validity mask; invalid
/// outputs are 0.
pub fn warp<'g>(frame: Var<'g>, flow: &FlowField) -> Result<(Var<'g>, Vec<bool>)> {
    let shape = frame.shape();
    if shape.len() != 3 || shape[1] != flow.height || shape[2] != flow.width {
        return contract(format!(
            "warp: frame {shape:?} does not match {}x{} flow",
            flow.width, flow.height
        ));
    }
    let (u, v) = flow_arrays(flow);
    Ok((frame.warp(u, v)?, warp_mask(flow)))
}

/// Plain-array version of [`warp`] on a planar `[c, h, w]` buffer.
pub fn warp_planar(frame: &[f64], c: usize, flow: &FlowField) -> (Vec<f64>, Vec<bool>) {
    let (h, w) = (flow.height, flow.width);
    let mut out = vec![0.0; c * h * w];
    let mask = warp_mask(flow);
    for i in 0..h * w {
        if !mask[i] {
            continue;
        }
        let (x, y) = ((i % w) as f64 + flow.u[i], (i / w) as f64 + flow.v[i]);
        let taps = bilinear_taps(x, y, h, w).expect("mask checked bounds");
        for ch in 0..c {
            out[ch * h * w + i] = taps.iter().map(|&(j, wt)| wt * frame[ch * h * w + j]).sum();
        }
    }
    (out, mask)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalSupport {
    pub valid_pixels: usize,
    /// Set when no pixel is valid; the loss is then defined as 0.
    pub empty: bool,
}

/// lambda_A * sum_i w(i)|warp(A_next)(i) - A_t(i)| + lambda_S * (same for S), normalized by
/// the number of valid elements. `occlusion_valid` is the per-pixel flow validity mask.
#[allow(clippy::too_many_arguments)]
pub fn temporal_loss<'g>(
    a_t: Var<'g>,
    a_next: Var<'g>,
    s_t: Var<'g>,
    s_next: Var<'g>,
    flow: &FlowField,
    occlusion_valid: Option<&[bool]>,
    lambda_a: f64,
    lambda_s: f64,
) -> Result<(Var<'g>, TemporalSupport)> {
    let mut flow = flow.clone();
    if let Some(m) = occlusion_valid {
        flow.restrict(m)?;
    }
    let g = a_t.graph();
    let mask = warp_mask(&flow);
    let valid_pixels = mask.iter().filter(|&&m| m).count();
    if valid_pixels == 0 {
        return Ok((g.scalar(0.0), TemporalSupport { valid_pixels, empty: true }));
    }
    let mut total = g.scalar(0.0);
    for (cur, next, lambda) in [(a_t, a_next, lambda_a), (s_t, s_next, lambda_s)] {
        if lambda == 0.0 {
            continue;
        }
        let (warped, _) = warp(next, &flow)?;
        let c = cur.shape()[0];
        let wmask: Vec<f64> = (0..c).flat_map(|_| mask.iter().map(|&m| f64::from(u8::from(m)))).collect();
        let wm = g.constant(Tensor::new(cur.shape(), wmask)?);
        let err = warped.sub(cur)?.abs()?.mul(wm)?.sum()?;
        total = total.add(err.scale(lambda / (valid_pixels * c) as f64)?)?;
    }
    Ok((total, TemporalSupport { valid_pixels, empty: false }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, Graph};

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(vec![c, h, w], (0..c * h * w).map(|i| (i % w) as f64 * 0.1 + (i / w % h) as f64 * 0.01).collect()).unwrap()
    }

    #[test]
    fn zero_flow_is_identity() {
        let g = Graph::new();
        let x = g.constant(ramp(2, 4, 5));
        let (y, mask) = warp(x, &FlowField::zeros(5, 4)).unwrap();
        assert_eq!(y.data(), x.data());
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn integer_and_half_pixel_shifts() {
        let g = Graph::new();
        let x = g.constant(ramp(1, 3, 5));
        let (y, mask) = warp(x, &FlowField::constant(5, 3, 1.0, 0.0)).unwrap();
        assert_eq!(&y.data()[..4], &x.data()[1..5]);
        assert!(!mask[4] && mask[3]);
        assert_eq!(y.data()[4], 0.0);
        let (z, _) = warp(x, &FlowField::constant(5, 3, 0.5, 0.0)).unwrap();
        for k in 0..4 {
            assert!((z.data()[k] - (k as f64 + 0.5) * 0.1).abs() < 1e-15);
        }
        let (plain, _) = warp_planar(&x.data(), 1, &FlowField::constant(5, 3, 0.5, 0.0));
        assert_eq!(plain, z.data());
    }

    #[test]
    fn temporal_loss_cases() {
        let g = Graph::new();
        let a = g.constant(ramp(3, 4, 4));
        let flow = FlowField::zeros(4, 4);
        let (l, info) = temporal_loss(a, a, a, a, &flow, None, 1.0, 1.0).unwrap();
        assert_eq!(l.item(), 0.0);
        assert!(!info.empty);
        let (l, info) = temporal_loss(a, a, a, a, &flow, Some(&[false; 16]), 1.0, 1.0).unwrap();
        assert_eq!(l.item(), 0.0);
        assert!(info.empty);
        // +0.2 on the valid top half only
        let mut shifted = ramp(3, 4, 4);
        shifted.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += if i % 16 < 8 { 0.2 } else { 0.0 });
        let b = g.constant(shifted);
        let valid: Vec<bool> = (0..16).map(|i| i < 8).collect();
        let (l, info) = temporal_loss(a, b, a, a, &flow, Some(&valid), 1.0, 1.0).unwrap();
        assert_eq!(info.valid_pixels, 8);
        assert!((l.item() - 0.2).abs() < 1e-12, "{}", l.item());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let next = ramp(3, 8, 8);
        let flow = FlowField::new(8, 8, (0..64).map(|i| 0.3 + 0.01 * i as f64).collect(), vec![-0.4; 64]);
        let s = Tensor::full(&[3, 8, 8], 0.5);
        let x = Tensor::new(vec![3, 8, 8], (0..192).map(|i| 0.17 + ((i * 31) % 53) as f64 / 60.0).collect()).unwrap();
        let r = finite_diff_check(
            |g, x| {
                let n = g.constant(next.clone());
                let sv = g.constant(s.clone());
                Ok(temporal_loss(x, n, sv, x, &flow, None, 1.0, 1.0).unwrap().0)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
    }
}
