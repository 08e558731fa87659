use crate::error::{contract, Result};
use crate::imageio::{ColorSpace, FlowField, Image};
use crate::losses::warp_planar;

/// Per-pixel squared warping error summed over channels: `prev(i) - cur(i + u(i))`, where
/// `flow` maps the previous frame onto the current one. Invalid pixels are `None`.
fn warp_errors(cur: &Image, prev: &Image, flow: &FlowField, mask: Option<&[bool]>) -> Result<Vec<Option<f64>>> {
    if (cur.width, cur.height, cur.channels) != (prev.width, prev.height, prev.channels)
        || (cur.width, cur.height) != (flow.width, flow.height)
    {
        return contract("tcm: frames and flow must share one size");
    }
    let mut flow = flow.clone();
    if let Some(m) = mask {
        flow.restrict(m)?;
    }
    let c = cur.channels;
    let plane = cur.pixels();
    let (warped, valid) = warp_planar(cur.to_tensor().data(), c, &flow);
    let prev_t = prev.to_tensor();
    Ok((0..plane)
        .map(|i| {
            valid[i].then(|| (0..c).map(|ch| (prev_t.data()[ch * plane + i] - warped[ch * plane + i]).powi(2)).sum())
        })
        .collect())
}

/// exp(-| E_O / E_V - 1 |) with E the summed squared warping error between consecutive
/// frames of the output (`o_*`) and input (`v_*`) videos. `flow` is the forward flow from the
/// previous frame to the current one; `mask` marks pixels whose flow is usable.
pub fn tcm(o_t: &Image, o_prev: &Image, v_t: &Image, v_prev: &Image, flow: &FlowField, mask: Option<&[bool]>) -> Result<f64> {
    let eo: f64 = warp_errors(o_t, o_prev, flow, mask)?.iter().flatten().sum();
    let ev: f64 = warp_errors(v_t, v_prev, flow, mask)?.iter().flatten().sum();
    if !(ev > 0.0) {
        return contract("tcm is undefined: the input video has zero warping error (static input)");
    }
    Ok((-(eo / ev - 1.0).abs()).exp())
}

/// Pointwise TCM; pixels with an invalid warp or an input error below 1e-12 are `None`.
pub fn tcm_map(
    o_t: &Image,
    o_prev: &Image,
    v_t: &Image,
    v_prev: &Image,
    flow: &FlowField,
    mask: Option<&[bool]>,
) -> Result<Vec<Option<f64>>> {
    let eo = warp_errors(o_t, o_prev, flow, mask)?;
    let ev = warp_errors(v_t, v_prev, flow, mask)?;
    Ok(eo
        .iter()
        .zip(&ev)
        .map(|(o, v)| match (o, v) {
            (Some(o), Some(v)) if *v >= 1e-12 => Some((-(o / v - 1.0).abs()).exp()),
            _ => None,
        })
        .collect())
}

pub const HEATMAP_KERNEL: usize = 65;

/// Jet colormap on [0, 1]: blue, cyan, yellow, red.
pub fn jet(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let ch = |offset: f64| (1.5 - (4.0 * t - offset).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Blurs the valid part of a map with a normalized Gaussian (size 65, sigma 65/6) and colors
/// it with the inverted jet map, so inconsistent regions are warm. Masked pixels are gray.
pub fn render_heatmap(map: &[Option<f64>], width: usize, height: usize) -> Image {
    let k = HEATMAP_KERNEL;
    let sigma = k as f64 / 6.0;
    let half = (k / 2) as isize;
    let taps: Vec<f64> = (-half..=half).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let values: Vec<f64> = map.iter().map(|v| v.unwrap_or(0.0)).collect();
    let weights: Vec<f64> = map.iter().map(|v| f64::from(u8::from(v.is_some()))).collect();
    let blur = |src: &[f64]| -> Vec<f64> {
        let mut tmp = vec![0.0; src.len()];
        for y in 0..height {
            for x in 0..width {
                tmp[y * width + x] = (-half..=half)
                    .filter_map(|d| {
                        let xx = x as isize + d;
                        (0..width as isize).contains(&xx).then(|| taps[(d + half) as usize] * src[y * width + xx as usize])
                    })
                    .sum();
            }
        }
        let mut out = vec![0.0; src.len()];
        for y in 0..height {
            for x in 0..width {
                out[y * width + x] = (-half..=half)
                    .filter_map(|d| {
                        let yy = y as isize + d;
                        (0..height as isize).contains(&yy).then(|| taps[(d + half) as usize] * tmp[yy as usize * width + x])
                    })
                    .sum();
            }
        }
        out
    };
    let num = blur(&values.iter().zip(&weights).map(|(v, w)| v * w).collect::<Vec<_>>());
    let den = blur(&weights);
    let mut data = Vec::with_capacity(3 * width * height);
    for i in 0..width * height {
        if map[i].is_none() || den[i] <= 0.0 {
            data.extend_from_slice(&[0.5, 0.5, 0.5]);
        } else {
            data.extend_from_slice(&jet(1.0 - num[i] / den[i]));
        }
    }
    Image::new(width, height, 3, data, ColorSpace::Srgb).expect("sized buffer")
}
