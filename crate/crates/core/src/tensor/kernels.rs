// Raw numeric kernels over row-major slices. Shapes are validated by the caller.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Range of output columns whose input column `ox*stride + kx*dilation - pad` is inside `[0, w)`.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let off = (kx * self.dilation) as isize - self.pad as isize;
        let s = self.stride as isize;
        // smallest ox with ox*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest ox with ox*s + off <= w-1
        let top = self.w as isize - 1 - off;
        let hi = if top < 0 { 0 } else { top / s + 1 };
        let lo = lo.max(0) as usize;
        let hi = (hi as usize).min(self.wo);
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky * self.dilation) as isize - self.pad as isize;
        if iy < 0 || iy >= self.h as isize {
            None
        } else {
            Some(iy as usize)
        }
    }

    #[inline]
    fn in_col(&self, ox: usize, kx: usize) -> usize {
        ox * self.stride + kx * self.dilation - self.pad
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let plane_out = g.ho * g.wo;
    let mut out = vec![0.0; g.cout * plane_out];
    for co in 0..g.cout {
        let out_c = &mut out[co * plane_out..(co + 1) * plane_out];
        if let Some(b) = b {
            out_c.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..g.cin {
            let x_c = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = w[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (lo, hi) = g.col_range(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..g.ho {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let row_in = &x_c[iy * g.w..(iy + 1) * g.w];
                        let row_out = &mut out_c[oy * g.wo..(oy + 1) * g.wo];
                        if g.stride == 1 {
                            let start = g.in_col(lo, kx);
                            let src = &row_in[start..start + (hi - lo)];
                            for (o, &v) in row_out[lo..hi].iter_mut().zip(src) {
                                *o += wv * v;
                            }
                        } else {
                            for ox in lo..hi {
                                row_out[ox] += wv * row_in[g.in_col(ox, kx)];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (grad_x, grad_w, grad_b).
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    need_x: bool,
    need_w: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane_out = g.ho * g.wo;
    let plane_in = g.h * g.w;
    let mut gx = if need_x { vec![0.0; g.cin * plane_in] } else { Vec::new() };
    let mut gw = if need_w { vec![0.0; w.len()] } else { Vec::new() };
    let mut gb = vec![0.0; g.cout];
    for co in 0..g.cout {
        let go_c = &gout[co * plane_out..(co + 1) * plane_out];
        gb[co] = go_c.iter().sum();
        for ci in 0..g.cin {
            let x_c = &x[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let widx = ((co * g.cin + ci) * g.kh + ky) * g.kw + kx;
                    let wv = w[widx];
                    let (lo, hi) = g.col_range(kx);
                    if lo >= hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in 0..g.ho {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let row_go = &go_c[oy * g.wo..(oy + 1) * g.wo];
                        if g.stride == 1 {
                            let start = g.in_col(lo, kx);
                            let n = hi - lo;
                            if need_w {
                                let row_in = &x_c[iy * g.w + start..iy * g.w + start + n];
                                acc += row_go[lo..hi].iter().zip(row_in).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if need_x && wv != 0.0 {
                                let base = ci * plane_in + iy * g.w + start;
                                for (dst, &go) in gx[base..base + n].iter_mut().zip(&row_go[lo..hi]) {
                                    *dst += wv * go;
                                }
                            }
                        } else {
                            for ox in lo..hi {
                                let ix = g.in_col(ox, kx);
                                if need_w {
                                    acc += row_go[ox] * x_c[iy * g.w + ix];
                                }
                                if need_x {
                                    gx[ci * plane_in + iy * g.w + ix] += wv * row_go[ox];
                                }
                            }
                        }
                    }
                    if need_w {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// out[k, m] = a[m, k]^T
pub(crate) fn transpose(a: &[f64], m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            out[j * m + i] = a[i * k + j];
        }
    }
    out
}

/// 2×2 max pooling with floor semantics. Returns (values, argmax flat index into input).
/// Ties resolve to the first maximal element in row-major window order.
pub(crate) fn maxpool2(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = ch * h * w + (2 * oy) * w + 2 * ox;
                let mut best = x[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

pub(crate) fn avgpool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let i = base + 2 * oy * w + 2 * ox;
                out.push(0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]));
            }
        }
    }
    out
}

pub(crate) fn avgpool2_backward(gout: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let g = 0.25 * gout[(ch * ho + oy) * wo + ox];
                let i = base + 2 * oy * w + 2 * ox;
                gx[i] += g;
                gx[i + 1] += g;
                gx[i + w] += g;
                gx[i + w + 1] += g;
            }
        }
    }
    gx
}

pub(crate) fn upsample2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            let src = &x[(ch * h + oy / 2) * w..(ch * h + oy / 2 + 1) * w];
            let dst = &mut out[(ch * ho + oy) * wo..(ch * ho + oy + 1) * wo];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(gout: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                gx[(ch * h + oy / 2) * w + ox / 2] += gout[(ch * ho + oy) * wo + ox];
            }
        }
    }
    gx
}

/// Bilinear sampling tap: four (index, weight) pairs for position (x, y), or `None` when
/// the position falls outside the image.
#[inline]
pub(crate) fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> Option<[(usize, f64); 4]> {
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    Some([
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ])
}

pub(crate) fn warp_forward(x: &[f64], c: usize, h: usize, w: usize, u: &[f64], v: &[f64]) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; c * plane];
    for py in 0..h {
        for px in 0..w {
            let i = py * w + px;
            if let Some(taps) = bilinear_taps(px as f64 + u[i], py as f64 + v[i], h, w) {
                for ch in 0..c {
                    let src = &x[ch * plane..(ch + 1) * plane];
                    out[ch * plane + i] = taps.iter().map(|&(j, wt)| wt * src[j]).sum();
                }
            }
        }
    }
    out
}

pub(crate) fn warp_backward(gout: &[f64], c: usize, h: usize, w: usize, u: &[f64], v: &[f64]) -> Vec<f64> {
    let plane = h * w;
    let mut gx = vec![0.0; c * plane];
    for py in 0..h {
        for px in 0..w {
            let i = py * w + px;
            if let Some(taps) = bilinear_taps(px as f64 + u[i], py as f64 + v[i], h, w) {
                for ch in 0..c {
                    let g = gout[ch * plane + i];
                    for &(j, wt) in &taps {
                        gx[ch * plane + j] += wt * g;
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.cout * g.ho * g.wo];
        for co in 0..g.cout {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut s = 0.0;
                    for ci in 0..g.cin {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                s += w[((co * g.cin + ci) * g.kh + ky) * g.kw + kx]
                                    * x[(ci * g.h + iy as usize) * g.w + ix as usize];
                            }
                        }
                    }
                    out[(co * g.ho + oy) * g.wo + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_for_strides_and_dilations() {
        for &(stride, pad, dilation) in &[(1, 1, 1), (2, 1, 1), (1, 2, 2), (1, 4, 4), (2, 0, 1), (3, 2, 2)] {
            let (cin, h, w, cout, k) = (2, 7, 9, 3, 3);
            let ho = (h + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
            let wo = (w + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
            let g = ConvGeom { cin, h, w, cout, kh: k, kw: k, stride, pad, dilation, ho, wo };
            let x: Vec<f64> = (0..cin * h * w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let wt: Vec<f64> = (0..cout * cin * k * k).map(|i| ((i * 13) % 7) as f64 * 0.5 - 1.5).collect();
            let fast = conv2d_forward(&g, &x, &wt, None);
            let slow = naive_conv(&g, &x, &wt);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad} dil {dilation}");
            }
        }
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let x = [1.0, 1.0, 1.0, 1.0];
        let (v, arg) = maxpool2(&x, 1, 2, 2);
        assert_eq!(v, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn bilinear_edge_positions() {
        assert!(bilinear_taps(-0.1, 0.0, 3, 3).is_none());
        assert!(bilinear_taps(2.0001, 0.0, 3, 3).is_none());
        let taps = bilinear_taps(2.0, 2.0, 3, 3).unwrap();
        let total: f64 = taps.iter().map(|t| t.1).sum();
        assert!((total - 1.0).abs() < 1e-15);
        assert_eq!(taps[0], (8, 1.0));
    }
}
