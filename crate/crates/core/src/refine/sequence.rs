use rayon::prelude::*;

use super::{finish, moments, target_moments, LleParams, Prepared, RefinedTriplet, Shifted, Triplet};
use crate::error::{contract, Result};
use crate::imageio::FlowField;

/// One frame of a sequence. `flow` maps this frame onto the next one; `occlusion` marks
/// where that flow is usable (true = visible). The last frame has no flow.
#[derive(Clone, Debug)]
pub struct SequenceFrame {
    pub triplet: Triplet,
    pub flow: Option<FlowField>,
    pub occlusion: Option<Vec<bool>>,
}

/// Nearest-pixel target of every source pixel whose flow is usable and lands in the frame.
fn correspondences(flow: &FlowField, occlusion: Option<&[bool]>) -> Vec<Option<usize>> {
    let (w, h) = (flow.width, flow.height);
    (0..w * h)
        .map(|i| {
            if !flow.valid[i] || occlusion.is_some_and(|m| !m[i]) {
                return None;
            }
            let x = ((i % w) as f64 + flow.u[i]).round();
            let y = ((i / w) as f64 + flow.v[i]).round();
            (x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64).then(|| y as usize * w + x as usize)
        })
        .collect()
}

/// Refines a sequence with statistics pooled over flow correspondences and shading repair
/// propagated from adjacent frames. Frames whose adjacent flows are all missing fall back to
/// single-frame refinement.
pub fn refine_sequence(frames: &[SequenceFrame], params: &LleParams) -> Result<Vec<RefinedTriplet>> {
    let n = frames.len();
    let prepared: Vec<Prepared> = frames.par_iter().map(|f| Prepared::new(&f.triplet)).collect::<Result<_>>()?;
    let mut forward: Vec<Option<Vec<Option<usize>>>> = Vec::with_capacity(n);
    for (t, f) in frames.iter().enumerate() {
        let p = &prepared[t];
        let usable = t + 1 < n && f.flow.is_some();
        if let (true, Some(flow)) = (usable, &f.flow) {
            let next = &prepared[t + 1];
            if (flow.width, flow.height) != (p.width, p.height) || (next.width, next.height) != (p.width, p.height) {
                return contract(format!("frame {t}: flow and neighbouring frames must share one size"));
            }
            if f.occlusion.as_ref().is_some_and(|m| m.len() != p.width * p.height) {
                return contract(format!("frame {t}: occlusion mask size mismatch"));
            }
            forward.push(Some(correspondences(flow, f.occlusion.as_deref())));
        } else {
            forward.push(None);
        }
    }

    // pass 1: pooled statistics and shifted layers. Both the albedo moments and the
    // valid-pixel moments are taken over the frame plus its flow correspondences.
    let shifted: Vec<Shifted> = (0..n)
        .into_par_iter()
        .map(|t| {
            let p = &prepared[t];
            let mut source = p.a_l.clone();
            let mut pool: Vec<f64> = p.valid_a_hat().collect();
            let mut take = |src: &Prepared, j: usize| {
                source.push(src.a_l[j]);
                if src.mask[j] {
                    pool.push(src.a_hat[j]);
                }
            };
            if let Some(fw) = &forward[t] {
                fw.iter().flatten().for_each(|&q| take(&prepared[t + 1], q));
            }
            if let Some(fw) = t.checked_sub(1).and_then(|s| forward[s].as_ref()) {
                fw.iter().enumerate().filter(|(_, q)| q.is_some()).for_each(|(j, _)| take(&prepared[t - 1], j));
            }
            let target = target_moments(&pool)?;
            let source = moments(&source).expect("non-empty frame");
            Ok(Shifted::new(p, source, target, pool.len()))
        })
        .collect::<Result<_>>()?;

    // pass 2: invalid pixels with a usable correspondence take the mean shading of their
    // valid counterparts in the adjacent frames; LLE repairs the rest
    (0..n)
        .into_par_iter()
        .map(|t| {
            let p = &prepared[t];
            let mut sh = shifted[t].clone();
            let mut acc = vec![(0.0, 0usize); sh.invalid.len()];
            let mut add = |i: usize, src: &Shifted, j: usize| {
                if shifted[t].invalid[i] && !src.invalid[j] {
                    acc[i].0 += src.s_tilde[j];
                    acc[i].1 += 1;
                }
            };
            if let Some(fw) = &forward[t] {
                for (i, q) in fw.iter().enumerate() {
                    if let Some(q) = *q {
                        add(i, &shifted[t + 1], q);
                    }
                }
            }
            if let Some(fw) = t.checked_sub(1).and_then(|s| forward[s].as_ref()) {
                for (j, q) in fw.iter().enumerate() {
                    if let Some(i) = *q {
                        add(i, &shifted[t - 1], j);
                    }
                }
            }
            let mut propagated = 0;
            for (i, (sum, count)) in acc.into_iter().enumerate() {
                if count > 0 {
                    sh.s_tilde[i] = sum / count as f64;
                    sh.invalid[i] = false;
                    propagated += 1;
                }
            }
            let mut r = finish(p, &sh, params)?;
            r.stats.propagated_pixels = propagated;
            Ok(r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::lightness;
    use crate::metrics::tcm;
    use crate::refine::refine_frame_with;
    use crate::synth::sintel_sequence;

    const W: usize = 48;
    const H: usize = 32;

    fn jitter(stats: &[f64]) -> f64 {
        stats.windows(2).map(|p| (p[1] - p[0]).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn static_video_matches_single_frame() {
        let seq = sintel_sequence(1, 1, W, H);
        let frame = seq[0].clone();
        let frames: Vec<SequenceFrame> = (0..3)
            .map(|t| SequenceFrame { flow: (t < 2).then(|| FlowField::zeros(W, H)), ..frame.clone() })
            .collect();
        let seq_out = refine_sequence(&frames, &LleParams::default()).unwrap();
        let single = refine_frame_with(&frame.triplet, &LleParams::default()).unwrap();
        for r in &seq_out {
            assert!((r.stats.mu_hat - single.stats.mu_hat).abs() < 1e-12);
            assert!((r.stats.sigma_hat - single.stats.sigma_hat).abs() < 1e-12);
            let d = r.shading.data.iter().zip(&single.shading.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d < 1e-9, "{d}");
        }
    }

    #[test]
    fn missing_flow_falls_back_to_single_frame() {
        let mut seq = sintel_sequence(1, 2, W, H);
        seq[0].flow = None;
        let out = refine_sequence(&seq, &LleParams::default()).unwrap();
        for (r, f) in out.iter().zip(&seq) {
            let single = refine_frame_with(&f.triplet, &LleParams::default()).unwrap();
            assert_eq!(r.stats, single.stats);
        }
    }

    #[test]
    fn pooling_reduces_jitter_and_raises_tcm() {
        let seq = sintel_sequence(42, 8, 64, 64);
        let params = LleParams::default();
        let temporal = refine_sequence(&seq, &params).unwrap();
        let single: Vec<RefinedTriplet> = seq.iter().map(|f| refine_frame_with(&f.triplet, &params).unwrap()).collect();
        let mu = |r: &[RefinedTriplet]| r.iter().map(|r| r.stats.mu_hat).collect::<Vec<_>>();
        assert!(jitter(&mu(&temporal)) < jitter(&mu(&single)), "{:?} {:?}", mu(&temporal), mu(&single));

        let mean_tcm = |r: &[RefinedTriplet]| {
            let vals: Vec<f64> = (1..r.len())
                .map(|t| {
                    tcm(&r[t].shading, &r[t - 1].shading, &seq[t].triplet.image, &seq[t - 1].triplet.image, seq[t - 1].flow.as_ref().unwrap(), seq[t - 1].occlusion.as_deref())
                        .unwrap()
                })
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        assert!(mean_tcm(&temporal) > mean_tcm(&single), "{} {}", mean_tcm(&temporal), mean_tcm(&single));
        for r in &temporal {
            let il = lightness(&r.image).unwrap();
            let al = lightness(&r.albedo).unwrap();
            let sl = lightness(&r.shading).unwrap();
            let e = il.iter().zip(&al).zip(&sl).map(|((i, a), s)| (i - a * s).abs()).fold(0.0, f64::max);
            assert!(e < 1e-6);
        }
    }
}
