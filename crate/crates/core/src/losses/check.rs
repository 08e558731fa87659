//! Finite-difference verification of every training objective on random `[3, 8, 8]` inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::imageio::FlowField;
use crate::judgements::{Judgement, JudgementSet};
use crate::tensor::{finite_diff_check, Graph, Tensor, TensorError, TensorResult, Var};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_SHAPE: [usize; 3] = [3, 8, 8];

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
}

impl GradCheckEntry {
    pub fn passes(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

fn lift<T>(r: Result<T>) -> TensorResult<T> {
    r.map_err(|e| match e {
        crate::Error::Tensor(t) => t,
        other => TensorError::BadShape { op: "loss", shape: vec![], reason: other.to_string() },
    })
}

struct Fixture {
    a: Tensor,
    s: Tensor,
    a_gt: Tensor,
    s_gt: Tensor,
    image: Tensor,
    feats: Tensor,
    judgements: JudgementSet,
    flow: FlowField,
    visible: Vec<bool>,
}

impl Fixture {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rand_t = |lo: f64, hi: f64| {
            let n: usize = GRADCHECK_SHAPE.iter().product();
            Tensor::new(GRADCHECK_SHAPE.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
        };
        let (a, s, a_gt, s_gt, image, feats) =
            (rand_t(0.1, 0.9), rand_t(0.1, 0.9), rand_t(0.1, 0.9), rand_t(0.1, 0.9), rand_t(0.05, 0.8), rand_t(0.0, 1.0));
        let judgements = JudgementSet {
            judgements: (0..30)
                .map(|_| Judgement {
                    i: (rng.random(), rng.random()),
                    j: (rng.random(), rng.random()),
                    relation: rng.random_range(-1..=1),
                    weight: rng.random_range(0.1..1.0),
                })
                .collect(),
        };
        let (h, w) = (GRADCHECK_SHAPE[1], GRADCHECK_SHAPE[2]);
        let u = (0..h * w).map(|_| rng.random_range(-1.5..1.5)).collect();
        let v = (0..h * w).map(|_| rng.random_range(-1.5..1.5)).collect();
        let visible = (0..h * w).map(|_| rng.random_bool(0.9)).collect();
        Fixture { a, s, a_gt, s_gt, image, feats, judgements, flow: FlowField::new(w, h, u, v), visible }
    }
}

/// Builds each term with `x` in the named role; every other input is a fixed constant.
fn terms<'g>(g: &'g Graph, fx: &Fixture, a: Var<'g>, s: Var<'g>, dense: bool, w: &LossWeights) -> Result<Terms<'g>> {
    let (image, s_gt) = (c(g, &fx.image), c(g, &fx.s_gt));
    let a_gt = dense.then(|| c(g, &fx.a_gt));
    let taps = |x: Var<'g>| -> Result<Vec<Var<'g>>> { Ok(vec![x, x.avgpool2x2()?]) };
    let (ta, ts) = (taps(a)?, taps(s)?);
    let (ra, rs) = (taps(c(g, &fx.a_gt))?, taps(c(g, &fx.s_gt))?);
    let mut t = Terms {
        rec: Some(reconstruction_loss(a, s, image, a_gt, s_gt, w.l1, w.ssim)?),
        grad: Some(gradient_loss(a, a_gt, s, s_gt)?),
        fdd: Some(fdd(&ta, &ts, &w.omega, w.alpha_fdd, w.beta_fdd)?),
        fdc: Some(fdc(&ta, &ra, &ts, &rs, &w.gamma, w.alpha_fdc, w.beta_fdc)?),
        ..Default::default()
    };
    if !dense {
        t.ordinal = Some(ordinal_loss(a, &fx.judgements, w.margin)?);
        t.albedo_smooth = Some(albedo_smoothness(a, &fx.image, &w.smoothness)?);
        t.shading_smooth = Some(shading_smoothness(s, &w.smoothness)?);
    }
    Ok(t)
}

type Check<'a> = Box<dyn for<'g> Fn(&'g Graph, Var<'g>) -> TensorResult<Var<'g>> + 'a>;

fn c<'g>(g: &'g Graph, t: &Tensor) -> Var<'g> {
    g.constant(t.clone())
}

/// Runs every check and reports the worst relative error of each.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let fx = Fixture::new(seed);
    let w = LossWeights { omega: vec![0.5, 1.0], gamma: vec![1.0, 1.0], ..Default::default() };
    let fxr = &fx;
    let wr = &w;
    let checks: Vec<(&str, Tensor, f64, Check<'_>)> = vec![
        ("reconstruction/albedo", fx.a.clone(), 1e-6, Box::new(move |g, x| lift(reconstruction_loss(x, c(g, &fxr.s), c(g, &fxr.image), Some(c(g, &fxr.a_gt)), c(g, &fxr.s_gt), 30.0, 0.5)))),
        ("reconstruction/shading", fx.s.clone(), 1e-6, Box::new(move |g, x| lift(reconstruction_loss(c(g, &fxr.a), x, c(g, &fxr.image), Some(c(g, &fxr.a_gt)), c(g, &fxr.s_gt), 30.0, 0.5)))),
        ("reconstruction/no-albedo-target", fx.a.clone(), 1e-6, Box::new(move |g, x| lift(reconstruction_loss(x, c(g, &fxr.s), c(g, &fxr.image), None, c(g, &fxr.s_gt), 30.0, 0.5)))),
        ("gradient/albedo", fx.a.clone(), 1e-6, Box::new(move |g, x| lift(gradient_loss(x, Some(c(g, &fxr.a_gt)), c(g, &fxr.s), c(g, &fxr.s_gt))))),
        ("gradient/shading", fx.s.clone(), 1e-6, Box::new(move |g, x| lift(gradient_loss(c(g, &fxr.a), Some(c(g, &fxr.a_gt)), x, c(g, &fxr.s_gt))))),
        ("fdd", fx.feats.clone(), 1e-6, Box::new(move |g, x| {
            let other = c(g, &fxr.a);
            lift(fdd(&[x, x.avgpool2x2()?], &[other, other.avgpool2x2()?], &[0.5, 1.0], 0.3, 0.1))
        })),
        ("fdc", fx.feats.clone(), 1e-6, Box::new(move |g, x| {
            let (ra, rs, ps) = (c(g, &fxr.a_gt), c(g, &fxr.s_gt), c(g, &fxr.s));
            lift(fdc(&[x, x.avgpool2x2()?], &[ra, ra.avgpool2x2()?], &[ps, ps.avgpool2x2()?], &[rs, rs.avgpool2x2()?], &[1.0, 1.0], 0.1, 0.9))
        })),
        ("ordinal", fx.a.clone(), 1e-6, Box::new(move |_, x| lift(ordinal_loss(x, &fxr.judgements, default_margin())))),
        ("albedo-smoothness", fx.a.clone(), 1e-5, Box::new(move |_, x| lift(albedo_smoothness(x, &fxr.image, &SmoothnessParams::default())))),
        ("shading-smoothness", fx.s.clone(), 1e-6, Box::new(move |_, x| lift(shading_smoothness(x, &SmoothnessParams::default())))),
        ("temporal/current", fx.a.clone(), 1e-6, Box::new(move |g, x| {
            lift(temporal_loss(x, c(g, &fxr.a_gt), x, c(g, &fxr.s_gt), &fxr.flow, Some(&fxr.visible), 1.0, 1.0).map(|r| r.0))
        })),
        ("temporal/next", fx.a.clone(), 1e-6, Box::new(move |g, x| {
            lift(temporal_loss(c(g, &fxr.a_gt), x, c(g, &fxr.s_gt), x, &fxr.flow, Some(&fxr.visible), 1.0, 1.0).map(|r| r.0))
        })),
        ("total-dense/albedo", fx.a.clone(), 1e-6, Box::new(move |g, x| {
            lift(terms(g, fxr, x, c(g, &fxr.s), true, wr).and_then(|t| total_loss_dense(&t, wr.lambda)))
        })),
        ("total-dense/shading", fx.s.clone(), 1e-6, Box::new(move |g, x| {
            lift(terms(g, fxr, c(g, &fxr.a), x, true, wr).and_then(|t| total_loss_dense(&t, wr.lambda)))
        })),
        ("total-sparse/albedo", fx.a.clone(), 1e-6, Box::new(move |g, x| {
            lift(terms(g, fxr, x, c(g, &fxr.s), false, wr).and_then(|t| total_loss_sparse(&t, wr)))
        })),
        ("total-sparse/shading", fx.s.clone(), 1e-6, Box::new(move |g, x| {
            lift(terms(g, fxr, c(g, &fxr.a), x, false, wr).and_then(|t| total_loss_sparse(&t, wr)))
        })),
    ];
    checks
        .into_iter()
        .map(|(name, x, eps, f)| {
            let r = finite_diff_check(|g, v| f(g, v), &x, eps)?;
            Ok(GradCheckEntry { name: name.into(), max_rel_error: r.max_rel_error })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let entries = gradient_suite(42).unwrap();
        assert_eq!(entries.len(), 16);
        for e in &entries {
            assert!(e.passes(), "{} {}", e.name, e.max_rel_error);
        }
    }
}
