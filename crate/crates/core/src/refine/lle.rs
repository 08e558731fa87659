use nalgebra::{DMatrix, DVector};

use crate::error::{contract, Result};

/// Neighborhood size, ridge weight (relative to the Gram trace) and number of
/// iterated-ridge refinement steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LleParams {
    pub k: usize,
    pub reg: f64,
    pub refinements: usize,
}

impl Default for LleParams {
    fn default() -> Self {
        LleParams { k: 10, reg: 1e-3, refinements: 2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate {
    pub x: f64,
    pub y: f64,
    pub guide: f64,
    pub value: f64,
}

const CELL: usize = 8;

struct Grid {
    cols: usize,
    rows: usize,
    cells: Vec<Vec<usize>>,
}

impl Grid {
    fn new(points: &[Candidate], width: usize, height: usize) -> Self {
        let cols = width.div_ceil(CELL).max(1);
        let rows = height.div_ceil(CELL).max(1);
        let mut cells = vec![Vec::new(); cols * rows];
        for (i, p) in points.iter().enumerate() {
            let (cx, cy) = Self::cell_of(p.x, p.y, cols, rows);
            cells[cy * cols + cx].push(i);
        }
        Grid { cols, rows, cells }
    }

    fn cell_of(x: f64, y: f64, cols: usize, rows: usize) -> (usize, usize) {
        let cx = (x.max(0.0) as usize / CELL).min(cols - 1);
        let cy = (y.max(0.0) as usize / CELL).min(rows - 1);
        (cx, cy)
    }
}

/// Exact K nearest candidates to the query in (x/D, y/D, guide) space, ordered by distance
/// with the candidate index as tie-break.
fn nearest(grid: &Grid, points: &[Candidate], q: &Candidate, k: usize, scale: f64) -> Vec<usize> {
    let dist = |p: &Candidate| {
        let dx = (p.x - q.x) * scale;
        let dy = (p.y - q.y) * scale;
        let dg = p.guide - q.guide;
        dx * dx + dy * dy + dg * dg
    };
    let (qx, qy) = Grid::cell_of(q.x, q.y, grid.cols, grid.rows);
    let mut best: Vec<(f64, usize)> = Vec::new();
    let max_ring = grid.cols.max(grid.rows);
    for r in 0..=max_ring {
        let (r, qx, qy) = (r as isize, qx as isize, qy as isize);
        for cy in qy - r..=qy + r {
            for cx in qx - r..=qx + r {
                let on_ring = (cy - qy).abs() == r || (cx - qx).abs() == r;
                if !on_ring || cx < 0 || cy < 0 || cx >= grid.cols as isize || cy >= grid.rows as isize {
                    continue;
                }
                for &i in &grid.cells[cy as usize * grid.cols + cx as usize] {
                    best.push((dist(&points[i]), i));
                }
            }
        }
        best.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        best.truncate(k);
        // anything in ring r + 1 is at least r * CELL + 1 pixels away along one axis
        let bound = ((r as f64 * CELL as f64 + 1.0) * scale).powi(2);
        if best.len() == k && best[k - 1].0 < bound {
            break;
        }
    }
    best.into_iter().map(|(_, i)| i).collect()
}

/// Affine reconstruction weights of `q` from `neighbors` (they sum to one).
pub fn lle_weights(q: [f64; 3], neighbors: &[[f64; 3]], params: &LleParams) -> Vec<f64> {
    let k = neighbors.len();
    let z = DMatrix::from_fn(k, 3, |i, d| neighbors[i][d] - q[d]);
    let gram = &z * z.transpose();
    let trace = gram.trace();
    let ridge = if trace > 0.0 { params.reg * trace } else { params.reg };
    let system = gram + DMatrix::identity(k, k) * ridge;
    let chol = system.cholesky().expect("ridge-regularized Gram matrix is positive definite");
    let ones = DVector::from_element(k, 1.0);
    let b = chol.solve(&ones);
    let mut w = &b / b.sum();
    for _ in 0..params.refinements {
        let a = chol.solve(&(&w * ridge));
        let mu = (1.0 - a.sum()) / b.sum();
        w = a + &b * mu;
    }
    w.iter().copied().collect()
}

/// Replaces every `invalid` pixel of `shading` by an affine combination of its K nearest
/// valid pixels, with weights fitted on (x/D, y/D, guide), D = max(width, height).
/// Results are clamped to (0, 1).
pub fn lle_reconstruct(
    shading: &[f64],
    invalid: &[bool],
    guide: &[f64],
    width: usize,
    height: usize,
    params: &LleParams,
) -> Result<Vec<f64>> {
    let n = width * height;
    if shading.len() != n || invalid.len() != n || guide.len() != n {
        return contract("lle_reconstruct: buffer sizes do not match the frame");
    }
    let mut out = shading.to_vec();
    if !invalid.iter().any(|&b| b) {
        return Ok(out);
    }
    let points: Vec<Candidate> = (0..n)
        .filter(|&i| !invalid[i])
        .map(|i| Candidate {
            x: (i % width) as f64,
            y: (i / width) as f64,
            guide: guide[i],
            value: shading[i],
        })
        .collect();
    if points.len() < params.k {
        return contract(format!(
            "only {} valid shading pixels, LLE repair needs at least {}; inspect the validity mask",
            points.len(),
            params.k
        ));
    }
    let scale = 1.0 / width.max(height) as f64;
    let grid = Grid::new(&points, width, height);
    let feature = |p: &Candidate| [p.x * scale, p.y * scale, p.guide];
    for i in (0..n).filter(|&i| invalid[i]) {
        let q = Candidate {
            x: (i % width) as f64,
            y: (i / width) as f64,
            guide: guide[i],
            value: 0.0,
        };
        let idx = nearest(&grid, &points, &q, params.k, scale);
        let feats: Vec<[f64; 3]> = idx.iter().map(|&j| feature(&points[j])).collect();
        let w = lle_weights(feature(&q), &feats, params);
        let v: f64 = idx.iter().zip(&w).map(|(&j, wj)| wj * points[j].value).sum();
        out[i] = v.clamp(super::DENOM_FLOOR, 1.0 - super::DENOM_FLOOR);
    }
    Ok(out)
}
