use crate::error::{contract, Result};
use crate::imageio::Image;
use crate::judgements::JudgementSet;

pub const WHDR_DELTA: f64 = 0.10;

/// Predicted relation between reflectances `ai` and `aj`: +1 if `ai` is brighter by more
/// than the `delta` band, -1 if darker, else 0.
pub fn predicted_relation(ai: f64, aj: f64, delta: f64) -> i8 {
    if ai / aj > 1.0 + delta {
        1
    } else if aj / ai > 1.0 + delta {
        -1
    } else {
        0
    }
}

/// Weighted fraction of judgements the albedo disagrees with, on its gray level.
pub fn whdr(albedo: &Image, set: &JudgementSet, delta: f64) -> Result<f64> {
    let total: f64 = set.judgements.iter().map(|j| j.weight).sum();
    if !(total > 0.0) {
        return contract("whdr is undefined when the judgement weights sum to zero");
    }
    let gray = albedo.gray();
    let mut wrong = 0.0;
    for j in &set.judgements {
        let (pi, pj) = j.pixels(albedo.width, albedo.height);
        let (ai, aj) = (gray[pi].max(1e-10), gray[pj].max(1e-10));
        if predicted_relation(ai, aj, delta) != j.relation {
            wrong += j.weight;
        }
    }
    Ok(wrong / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::ColorSpace;
    use crate::judgements::Judgement;

    fn set(rel: &[i8]) -> JudgementSet {
        JudgementSet {
            judgements: rel
                .iter()
                .map(|&r| Judgement {
                    i: (0.1, 0.1),
                    j: (0.9, 0.9),
                    relation: r,
                    weight: 1.0,
                })
                .collect(),
        }
    }

    #[test]
    fn agreement_and_flips() {
        let mut a = Image::filled(4, 4, 1, 0.5, ColorSpace::Srgb);
        a.set(0, 0, 0, 0.8);
        assert_eq!(whdr(&a, &set(&[1, 1]), WHDR_DELTA).unwrap(), 0.0);
        assert_eq!(whdr(&a, &set(&[-1, -1]), WHDR_DELTA).unwrap(), 1.0);
        assert_eq!(whdr(&a, &set(&[-1, 1]), WHDR_DELTA).unwrap(), 0.5);
        let mut scaled = a.clone();
        scaled.data.iter_mut().for_each(|v| *v *= 0.3);
        assert_eq!(whdr(&scaled, &set(&[1, 0, -1]), WHDR_DELTA).unwrap(), whdr(&a, &set(&[1, 0, -1]), WHDR_DELTA).unwrap());
        assert!(whdr(&a, &JudgementSet::default(), WHDR_DELTA).is_err());
    }

    #[test]
    fn equality_band() {
        assert_eq!(predicted_relation(1.05, 1.0, 0.1), 0);
        assert_eq!(predicted_relation(1.2, 1.0, 0.1), 1);
        assert_eq!(predicted_relation(1.0, 1.2, 0.1), -1);
    }

    #[test]
    fn matches_brute_force_oracle_on_random_sets() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let (w, h) = (rng.random_range(2..12), rng.random_range(2..12));
            let data: Vec<f64> = (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect();
            let a = Image::new(w, h, 3, data, ColorSpace::Srgb).unwrap();
            let judgements: Vec<Judgement> = (0..rng.random_range(1..30))
                .map(|_| Judgement {
                    i: (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
                    j: (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
                    relation: rng.random_range(-1..=1),
                    weight: rng.random_range(0.1..2.0),
                })
                .collect();
            let mut wrong = 0.0;
            let mut total = 0.0;
            for j in &judgements {
                let px = |(x, y): (f64, f64)| {
                    let xi = ((x * w as f64).floor() as usize).min(w - 1);
                    let yi = ((y * h as f64).floor() as usize).min(h - 1);
                    (0..3).map(|c| a.get(xi, yi, c)).sum::<f64>() / 3.0
                };
                let (ai, aj) = (px(j.i), px(j.j));
                let pred = if ai > 1.1 * aj {
                    1
                } else if aj > 1.1 * ai {
                    -1
                } else {
                    0
                };
                total += j.weight;
                if pred != j.relation {
                    wrong += j.weight;
                }
            }
            let got = whdr(&a, &JudgementSet { judgements }, WHDR_DELTA).unwrap();
            assert!((got - wrong / total).abs() < 1e-12);
        }
    }
}
