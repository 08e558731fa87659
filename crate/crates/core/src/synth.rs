//! Procedural datasets: piecewise-constant albedo times smooth gray shading, optionally
//! animated by a panning camera, plus a contaminated variant for refinement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imageio::{gray_from_lightness, ColorSpace, FlowField, Image};
use crate::judgements::{Judgement, JudgementSet};
use crate::refine::{compose, SequenceFrame, Triplet};

#[derive(Clone, Debug, PartialEq)]
pub struct DenseSample {
    pub image: Image,
    pub albedo: Image,
    /// Single-channel shading.
    pub shading: Image,
}

/// One frame of an animated sample; `flow` maps it onto the next frame.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFrame {
    pub sample: DenseSample,
    pub flow: Option<FlowField>,
}

struct Canvas {
    sites: Vec<(f64, f64, [f64; 3])>,
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Canvas {
    fn new(rng: &mut ChaCha8Rng, w: f64, h: f64) -> Self {
        let cells = rng.random_range(4..=8);
        let sites = (0..cells)
            .map(|_| {
                let color = [0; 3].map(|_| rng.random_range(0.15..0.85));
                (rng.random_range(0.0..w), rng.random_range(0.0..h), color)
            })
            .collect();
        let waves = (0..3)
            .map(|_| {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let freq = rng.random_range(0.5..2.0) * std::f64::consts::TAU / w.max(h);
                (freq * angle.cos(), freq * angle.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.5..1.0))
            })
            .collect();
        Canvas { sites, waves }
    }

    fn albedo(&self, x: f64, y: f64) -> [f64; 3] {
        self.sites
            .iter()
            .min_by(|a, b| {
                let da = (a.0 - x).powi(2) + (a.1 - y).powi(2);
                let db = (b.0 - x).powi(2) + (b.1 - y).powi(2);
                da.total_cmp(&db)
            })
            .expect("at least one site")
            .2
    }

    /// Sum of cosines mapped into [0.2, 1].
    fn shading(&self, x: f64, y: f64) -> f64 {
        let total: f64 = self.waves.iter().map(|w| w.3).sum();
        let v: f64 = self.waves.iter().map(|w| w.3 * (w.0 * x + w.1 * y + w.2).cos()).sum::<f64>() / total;
        0.2 + 0.8 * (0.5 + 0.5 * v)
    }

    fn render(&self, w: usize, h: usize, ox: f64, oy: f64) -> DenseSample {
        let mut albedo = Vec::with_capacity(3 * w * h);
        let mut shading = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (cx, cy) = (x as f64 + ox, y as f64 + oy);
                albedo.extend_from_slice(&self.albedo(cx, cy));
                shading.push(self.shading(cx, cy));
            }
        }
        let image = albedo.chunks_exact(3).zip(&shading).flat_map(|(a, &s)| [a[0] * s, a[1] * s, a[2] * s]).collect();
        DenseSample {
            image: Image::new(w, h, 3, image, ColorSpace::Srgb).expect("sized"),
            albedo: Image::new(w, h, 3, albedo, ColorSpace::Srgb).expect("sized"),
            shading: Image::new(w, h, 1, shading, ColorSpace::Srgb).expect("sized"),
        }
    }
}

/// `count` independent samples with `image = albedo * shading` per channel.
pub fn dense_set(seed: u64, count: usize, width: usize, height: usize) -> Vec<DenseSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| Canvas::new(&mut rng, width as f64, height as f64).render(width, height, 0.0, 0.0))
        .collect()
}

/// Crops of one static scene seen by a camera moving at a constant integer velocity.
pub fn video_sequence(seed: u64, frames: usize, width: usize, height: usize) -> Vec<VideoFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = 4 * frames;
    let canvas = Canvas::new(&mut rng, (width + span) as f64, (height + span) as f64);
    let (vx, vy) = loop {
        let v = (rng.random_range(-2i32..=2), rng.random_range(-2i32..=2));
        if v != (0, 0) {
            break v;
        }
    };
    let origin = (2 * frames) as f64;
    (0..frames)
        .map(|t| {
            let (ox, oy) = (origin + (vx * t as i32) as f64, origin + (vy * t as i32) as f64);
            VideoFrame {
                sample: canvas.render(width, height, ox, oy),
                flow: (t + 1 < frames).then(|| FlowField::constant(width, height, -vx as f64, -vy as f64)),
            }
        })
        .collect()
}

/// Camera pan speed of [`sintel_sequence`], in pixels per frame.
pub const PAN_SPEED: usize = 2;
/// Factor by which the given albedo of [`sintel_sequence`] is too dark.
pub const ALBEDO_GAIN: f64 = 0.9;

/// A sequence in the style of the original data the refinement targets: the given albedo is
/// too dark, the given shading carries a highlight the image lacks, the image carries a
/// specular lobe, and from mid-sequence on a large dark object covers part of the view.
/// Flows and occlusion masks are exact.
pub fn sintel_sequence(seed: u64, frames: usize, width: usize, height: usize) -> Vec<SequenceFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let canvas = Canvas::new(&mut rng, (width + PAN_SPEED * frames) as f64, height as f64);
    // from mid-sequence on a dark object sits in front of the camera
    let arrival = frames / 2;
    let occluder = |t: usize, x: usize, y: usize| {
        t >= arrival && x < width * 9 / 20 && (height * 3 / 20..height * 17 / 20).contains(&y)
    };
    let (lx, ly) = (rng.random_range(0.5..0.8) * width as f64, rng.random_range(0.2..0.5) * height as f64);
    (0..frames)
        .map(|t| {
            let offset = (PAN_SPEED * t) as f64;
            let n = width * height;
            let mut albedo = Vec::with_capacity(3 * n);
            let mut shading = Vec::with_capacity(n);
            let mut highlight = Vec::with_capacity(n);
            for y in 0..height {
                for x in 0..width {
                    let (cx, cy) = (x as f64 + offset, y as f64);
                    if occluder(t, x, y) {
                        albedo.extend_from_slice(&[0.16, 0.14, 0.13]);
                        shading.push(0.7);
                    } else {
                        albedo.extend_from_slice(&canvas.albedo(cx, cy));
                        // the light drifts half a pixel per frame relative to the scene
                        shading.push(0.25 + 0.6 * (canvas.shading(cx - 0.5 * t as f64, cy) - 0.2) / 0.8);
                    }
                    let r2 = (x as f64 - lx).powi(2) + (y as f64 - ly).powi(2);
                    highlight.push((-r2 / (2.0 * 16.0)).exp());
                }
            }
            let true_albedo = Image::new(width, height, 3, albedo, ColorSpace::Srgb).expect("sized");
            let mut image = compose(&true_albedo, &shading).expect("rgb albedo");
            for (px, h) in image.data.chunks_exact_mut(3).zip(&highlight) {
                px.iter_mut().for_each(|v| *v = (*v + 0.3 * h).min(1.0));
            }
            let mut given_albedo = true_albedo;
            given_albedo.data.iter_mut().for_each(|v| *v *= ALBEDO_GAIN);
            let given_shading: Vec<f64> = shading.iter().zip(&highlight).map(|(s, h)| (s + 0.25 * h).min(0.999)).collect();

            let (flow, occlusion) = if t + 1 < frames {
                let mut u = vec![-(PAN_SPEED as f64); n];
                let mut mask = vec![true; n];
                for y in 0..height {
                    for x in 0..width {
                        let i = y * width + x;
                        if occluder(t, x, y) {
                            u[i] = 0.0;
                        } else {
                            let tx = x as isize - PAN_SPEED as isize;
                            mask[i] = tx >= 0 && !occluder(t + 1, tx as usize, y);
                        }
                    }
                }
                (Some(FlowField::new(width, height, u, vec![0.0; n])), Some(mask))
            } else {
                (None, None)
            };
            SequenceFrame {
                triplet: Triplet {
                    image,
                    albedo: given_albedo,
                    shading: gray_from_lightness(width, height, &given_shading).expect("sized"),
                },
                flow,
                occlusion,
            }
        })
        .collect()
}

/// Dense samples annotated with `pairs` random judgements read off the true albedo: a pair is
/// "equal" when the gray albedo ratio is within `1 + delta`, otherwise the darker point wins.
pub fn sparse_set(seed: u64, count: usize, width: usize, height: usize, pairs: usize, delta: f64) -> Vec<(DenseSample, JudgementSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    dense_set(seed, count, width, height)
        .into_iter()
        .map(|s| {
            let gray = s.albedo.gray();
            let judgements = (0..pairs)
                .map(|_| {
                    let (pi, pj) = (rng.random_range(0..width * height), rng.random_range(0..width * height));
                    let at = |p: usize| (((p % width) as f64 + 0.5) / width as f64, ((p / width) as f64 + 0.5) / height as f64);
                    let (ai, aj) = (gray[pi], gray[pj]);
                    let relation = if ai / aj > 1.0 + delta {
                        1
                    } else if aj / ai > 1.0 + delta {
                        -1
                    } else {
                        0
                    };
                    Judgement { i: at(pi), j: at(pj), relation, weight: 1.0 }
                })
                .collect();
            (s, JudgementSet { judgements })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::warp_planar;

    #[test]
    fn dense_samples_are_products() {
        let set = dense_set(1, 3, 20, 16);
        assert_eq!(set, dense_set(1, 3, 20, 16));
        for s in &set {
            for (i, px) in s.image.data.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    assert_eq!(px[c], s.albedo.data[3 * i + c] * s.shading.data[i]);
                }
            }
            assert!(s.shading.data.iter().all(|&v| (0.2..=1.0).contains(&v)));
        }
    }

    #[test]
    fn sparse_judgements_agree_with_true_albedo() {
        use crate::metrics::{whdr, WHDR_DELTA};
        for (s, set) in sparse_set(2, 3, 24, 24, 50, WHDR_DELTA) {
            assert_eq!(set.len(), 50);
            assert_eq!(whdr(&s.albedo, &set, WHDR_DELTA).unwrap(), 0.0);
        }
    }

    #[test]
    fn video_flow_is_exact() {
        let seq = video_sequence(5, 4, 24, 20);
        for pair in seq.windows(2) {
            let flow = pair[0].flow.as_ref().unwrap();
            let next = pair[1].sample.albedo.to_tensor();
            let (warped, mask) = warp_planar(next.data(), 3, flow);
            let cur = pair[0].sample.albedo.to_tensor();
            assert!(mask.iter().any(|&m| m));
            for (i, &m) in mask.iter().enumerate() {
                if m {
                    for c in 0..3 {
                        assert_eq!(warped[c * 480 + i], cur.data()[c * 480 + i]);
                    }
                }
            }
        }
    }

    #[test]
    fn sintel_sequence_masks_and_flow_agree() {
        let seq = sintel_sequence(2, 6, 40, 32);
        assert!(seq.last().unwrap().flow.is_none());
        for f in &seq[..5] {
            let mask = f.occlusion.as_ref().unwrap();
            assert!(mask.iter().any(|&m| !m) && mask.iter().filter(|&&m| m).count() > 40 * 32 / 2);
        }
    }
}
