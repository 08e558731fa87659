use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::judgements::JudgementSet;
use crate::tensor::{Tensor, Var};

pub const LOG_FLOOR: f64 = 1e-6;

/// log(1.10): the hinge margin, matching the 10% equality band of WHDR.
pub fn default_margin() -> f64 {
    1.1f64.ln()
}

/// Single-pair ordinal penalty on albedo values `ai`, `aj`.
pub fn ordinal_error(ai: f64, aj: f64, relation: i8, weight: f64, margin: f64) -> f64 {
    let d = ai.max(LOG_FLOOR).ln() - aj.max(LOG_FLOOR).ln();
    weight
        * match relation {
            0 => d * d,
            1 => (margin - d).max(0.0).powi(2),
            _ => (margin + d).max(0.0).powi(2),
        }
}

/// Channel mean of a `[C, H, W]` map, shape `[1, H, W]`.
pub fn gray<'g>(x: Var<'g>) -> Result<Var<'g>> {
    let c = x.shape()[0];
    Ok(if c == 1 { x } else { x.sum_axis(0)?.scale(1.0 / c as f64)? })
}

/// Sum of ordinal penalties over all judgements, evaluated on the gray albedo.
pub fn ordinal_loss<'g>(a: Var<'g>, set: &JudgementSet, margin: f64) -> Result<Var<'g>> {
    let shape = a.shape();
    if shape.len() != 3 {
        return contract(format!("ordinal_loss expects [C, H, W] albedo, got {shape:?}"));
    }
    let g = a.graph();
    let mut total = g.scalar(0.0);
    if set.is_empty() {
        return Ok(total);
    }
    let log_a = gray(a)?.clamp_min(LOG_FLOOR)?.log()?;
    for relation in [-1i8, 0, 1] {
        let picked: Vec<_> = set.judgements.iter().filter(|j| j.relation == relation).collect();
        if picked.is_empty() {
            continue;
        }
        let (is, js): (Vec<usize>, Vec<usize>) = picked.iter().map(|j| j.pixels(shape[2], shape[1])).unzip();
        let w = g.constant(Tensor::from_vec(picked.iter().map(|j| j.weight).collect()));
        let d = log_a.gather(Arc::from(is))?.sub(log_a.gather(Arc::from(js))?)?;
        let per = match relation {
            0 => d.square()?,
            1 => d.rsub(margin)?.relu()?.square()?,
            _ => d.shift(margin)?.relu()?.square()?,
        };
        total = total.add(per.mul(w)?.sum()?)?;
    }
    Ok(total)
}

/// Bandwidths of the smoothness affinities; positions are normalized to [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothnessParams {
    pub sigma_p: f64,
    pub sigma_i: f64,
    pub sigma_c: f64,
    pub levels: usize,
    pub sinkhorn_iters: usize,
    /// The dense shading term runs on a map no larger than this per side.
    pub shading_max_side: usize,
}

impl Default for SmoothnessParams {
    fn default() -> Self {
        SmoothnessParams {
            sigma_p: 0.1,
            sigma_i: 0.1,
            sigma_c: 0.025,
            levels: 3,
            sinkhorn_iters: 10,
            shading_max_side: 32,
        }
    }
}

fn norm_coord(i: usize, n: usize) -> f64 {
    if n > 1 {
        i as f64 / (n - 1) as f64
    } else {
        0.0
    }
}

fn avgpool_planar(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let at = |dy: usize, dx: usize| x[ch * h * w + (2 * y + dy) * w + 2 * xx + dx];
                out[ch * oh * ow + y * ow + xx] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
            }
        }
    }
    out
}

/// Per-pixel guide features (intensity, chromaticity r, chromaticity g) of a planar RGB guide.
fn guide_features(guide: &[f64], c: usize, h: usize, w: usize) -> Vec<[f64; 3]> {
    let plane = h * w;
    (0..plane)
        .map(|i| {
            let px: Vec<f64> = (0..c).map(|ch| guide[ch * plane + i]).collect();
            let sum: f64 = px.iter().sum();
            let intensity = sum / c as f64;
            if c < 3 || sum < 1e-6 {
                [intensity, 1.0 / 3.0, 1.0 / 3.0]
            } else {
                [intensity, px[0] / sum, px[1] / sum]
            }
        })
        .collect()
}

/// Affinity between pixels `(y, x)` and `(y + dy, x + dx)` of an `h x w` level.
#[allow(clippy::too_many_arguments)]
pub fn albedo_affinity(fa: [f64; 3], fb: [f64; 3], dy: isize, dx: isize, h: usize, w: usize, p: &SmoothnessParams) -> f64 {
    let py = if h > 1 { dy as f64 / (h - 1) as f64 } else { 0.0 };
    let px = if w > 1 { dx as f64 / (w - 1) as f64 } else { 0.0 };
    let q = (px * px + py * py) / (p.sigma_p * p.sigma_p)
        + (fa[0] - fb[0]).powi(2) / (p.sigma_i * p.sigma_i)
        + ((fa[1] - fb[1]).powi(2) + (fa[2] - fb[2]).powi(2)) / (p.sigma_c * p.sigma_c);
    (-0.5 * q).exp()
}

pub const NEIGHBORS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// Multi-scale weighted L1 smoothness of log albedo over 8-neighborhoods; level l (1-based)
/// is scaled by 1/(N_l * l). `guide` is the input image, used only for the affinities.
pub fn albedo_smoothness<'g>(a: Var<'g>, guide: &Tensor, params: &SmoothnessParams) -> Result<Var<'g>> {
    let shape = a.shape();
    if shape.len() != 3 || guide.shape().len() != 3 || guide.shape()[1..] != shape[1..] {
        return contract(format!("albedo_smoothness: albedo {shape:?} and guide {:?} must share H, W", guide.shape()));
    }
    let g = a.graph();
    let c = shape[0];
    let gc = guide.shape()[0];
    let mut total = g.scalar(0.0);
    let mut level_a = a;
    let mut gdata = guide.data().to_vec();
    let (mut h, mut w) = (shape[1], shape[2]);
    for level in 1..=params.levels {
        if level > 1 {
            if h < 2 || w < 2 {
                break;
            }
            level_a = level_a.avgpool2x2()?;
            gdata = avgpool_planar(&gdata, gc, h, w);
            h /= 2;
            w /= 2;
        }
        let feats = guide_features(&gdata, gc, h, w);
        let log_a = level_a.clamp_min(LOG_FLOOR)?.log()?;
        let mut level_sum = g.scalar(0.0);
        for &(dy, dx) in &NEIGHBORS {
            let ys = (dy.max(0) as usize, (h as isize + dy.min(0)) as usize);
            let xs = (dx.max(0) as usize, (w as isize + dx.min(0)) as usize);
            if ys.0 >= ys.1 || xs.0 >= xs.1 {
                continue;
            }
            // pixel i ranges over the block whose (dy, dx) neighbor stays inside the image
            let (y0, y1) = ((ys.0 as isize - dy) as usize, (ys.1 as isize - dy) as usize);
            let (x0, x1) = ((xs.0 as isize - dx) as usize, (xs.1 as isize - dx) as usize);
            let (bh, bw) = (y1 - y0, x1 - x0);
            let mut v = Vec::with_capacity(c * bh * bw);
            for _ in 0..c {
                for y in y0..y1 {
                    for x in x0..x1 {
                        let j = ((y as isize + dy) as usize) * w + (x as isize + dx) as usize;
                        v.push(albedo_affinity(feats[y * w + x], feats[j], dy, dx, h, w, params));
                    }
                }
            }
            let here = log_a.slice(vec![(0, c), (y0, y1), (x0, x1)])?;
            let there = log_a.slice(vec![(0, c), ys, xs])?;
            let weights = g.constant(Tensor::new(vec![c, bh, bw], v)?);
            level_sum = level_sum.add(here.sub(there)?.abs()?.mul(weights)?.sum()?)?;
        }
        total = total.add(level_sum.scale(1.0 / ((h * w * level) as f64))?)?;
    }
    Ok(total)
}

/// Bi-stochastic positional affinity of an `h x w` grid plus its row and column sums.
pub struct SinkhornAffinity {
    pub n: usize,
    pub matrix: Vec<f64>,
    pub row_sums: Vec<f64>,
    pub col_sums: Vec<f64>,
}

/// Gaussian positional affinity made bi-stochastic by symmetric Sinkhorn balancing:
/// `d <- sqrt(d / (W d))`, `W^ = diag(d) W diag(d)`. The result stays symmetric.
pub fn sinkhorn_affinity(h: usize, w: usize, sigma_p: f64, iters: usize) -> SinkhornAffinity {
    let n = h * w;
    let pos: Vec<(f64, f64)> = (0..n).map(|i| (norm_coord(i % w, w), norm_coord(i / w, h))).collect();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (dx, dy) = (pos[i].0 - pos[j].0, pos[i].1 - pos[j].1);
            m[i * n + j] = (-0.5 * (dx * dx + dy * dy) / (sigma_p * sigma_p)).exp();
        }
    }
    let mut d = vec![1.0; n];
    for _ in 0..iters {
        let wd: Vec<f64> = m.chunks(n).map(|row| row.iter().zip(&d).map(|(a, b)| a * b).sum()).collect();
        d.iter_mut().zip(&wd).for_each(|(di, s)| *di = (*di / s).sqrt());
    }
    for (i, row) in m.chunks_mut(n).enumerate() {
        row.iter_mut().zip(&d).for_each(|(v, dj)| *v *= d[i] * dj);
    }
    let row_sums = m.chunks(n).map(|r| r.iter().sum()).collect();
    let mut col_sums = vec![0.0; n];
    for row in m.chunks(n) {
        col_sums.iter_mut().zip(row).for_each(|(c, v)| *c += v);
    }
    SinkhornAffinity {
        n,
        matrix: m,
        row_sums,
        col_sums,
    }
}

type AffinityKey = (usize, usize, u64, usize);

thread_local! {
    static AFFINITY_CACHE: RefCell<HashMap<AffinityKey, Rc<SinkhornAffinity>>> = RefCell::new(HashMap::new());
}

fn cached_affinity(h: usize, w: usize, sigma_p: f64, iters: usize) -> Rc<SinkhornAffinity> {
    let key = (h, w, sigma_p.to_bits(), iters);
    AFFINITY_CACHE.with(|c| {
        c.borrow_mut()
            .entry(key)
            .or_insert_with(|| Rc::new(sinkhorn_affinity(h, w, sigma_p, iters)))
            .clone()
    })
}

/// (1/2N) sum_ij W^_ij (log S_i - log S_j)^2 on the gray shading, average-pooled until both
/// sides are at most `shading_max_side`.
pub fn shading_smoothness<'g>(s: Var<'g>, params: &SmoothnessParams) -> Result<Var<'g>> {
    let shape = s.shape();
    if shape.len() != 3 {
        return contract(format!("shading_smoothness expects [C, H, W], got {shape:?}"));
    }
    let mut x = gray(s)?;
    let (mut h, mut w) = (shape[1], shape[2]);
    while (h > params.shading_max_side || w > params.shading_max_side) && h >= 2 && w >= 2 {
        x = x.avgpool2x2()?;
        h /= 2;
        w /= 2;
    }
    let aff = cached_affinity(h, w, params.sigma_p, params.sinkhorn_iters);
    let n = aff.n;
    let g = s.graph();
    let l = x.clamp_min(LOG_FLOOR)?.log()?.reshape(vec![n, 1])?;
    let degree: Vec<f64> = aff.row_sums.iter().zip(&aff.col_sums).map(|(r, c)| r + c).collect();
    let deg = g.constant(Tensor::new(vec![n, 1], degree)?);
    let wm = g.constant(Tensor::new(vec![n, n], aff.matrix.clone())?);
    let quad = l.mul(wm.matmul(l)?)?.sum()?;
    let diag = deg.mul(l.square()?)?.sum()?;
    Ok(diag.sub(quad.scale(2.0)?)?.scale(1.0 / (2 * n) as f64)?)
}
