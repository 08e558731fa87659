use crate::error::{contract, Result};
use crate::tensor::Var;

/// Midpoint of the rescaling sigmoid, 1.2 e^{1.2}.
pub fn rescale_center() -> f64 {
    1.2 * 1.2f64.exp()
}

const RESCALE_WIDTH: f64 = 1.2 * 1.2;

/// h(d) = 1 - 1 / (1 + exp(-(d - 1.2 e^{1.2}) / 1.2^2)), decreasing from about 0.94 to 0.
pub fn rescale(d: f64) -> f64 {
    1.0 - 1.0 / (1.0 + (-(d - rescale_center()) / RESCALE_WIDTH).exp())
}

fn rescale_var<'g>(d: Var<'g>) -> Result<Var<'g>> {
    // 1 - sigmoid(z) = sigmoid(-z)
    Ok(d.shift(-rescale_center())?.scale(-1.0 / RESCALE_WIDTH)?.sigmoid()?)
}

/// Mean over locations of the squared cosine between the channel vectors of two `[c, m, n]`
/// maps. Vector norms are clamped at 1e-8.
pub fn cosine_squared<'g>(fa: Var<'g>, fs: Var<'g>) -> Result<Var<'g>> {
    if fa.shape() != fs.shape() || fa.shape().len() != 3 {
        return contract(format!("feature maps must share a [c, m, n] shape, got {:?} and {:?}", fa.shape(), fs.shape()));
    }
    let dot = fa.mul(fs)?.sum_axis(0)?;
    let na = fa.square()?.sum_axis(0)?.clamp_min(1e-16)?;
    let ns = fs.square()?.sum_axis(0)?.clamp_min(1e-16)?;
    Ok(dot.square()?.div(na.mul(ns)?)?.mean()?)
}

/// d = alpha * d_cos + beta * h(mean |fa - fs|).
pub fn feature_distance<'g>(fa: Var<'g>, fs: Var<'g>, alpha: f64, beta: f64) -> Result<Var<'g>> {
    let cos = cosine_squared(fa, fs)?;
    let l1 = rescale_var(fa.sub(fs)?.abs()?.mean()?)?;
    Ok(cos.scale(alpha)?.add(l1.scale(beta)?)?)
}

fn check_levels(what: &str, weights: &[f64], lens: &[usize]) -> Result<()> {
    if lens.iter().any(|&l| l != weights.len()) {
        return contract(format!("{what}: {} level weights for tap lists of lengths {lens:?}", weights.len()));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) {
        return contract(format!("{what}: level weights must be nonnegative, got {weights:?}"));
    }
    Ok(())
}

/// Sum over levels of omega_i * d(albedo tap i, shading tap i).
pub fn fdd<'g>(taps_a: &[Var<'g>], taps_s: &[Var<'g>], omega: &[f64], alpha: f64, beta: f64) -> Result<Var<'g>> {
    check_levels("fdd", omega, &[taps_a.len(), taps_s.len()])?;
    let Some(first) = taps_a.first() else {
        return contract("fdd needs at least one level");
    };
    let mut total = first.graph().scalar(0.0);
    for ((&fa, &fs), &w) in taps_a.iter().zip(taps_s).zip(omega) {
        if w != 0.0 {
            total = total.add(feature_distance(fa, fs, alpha, beta)?.scale(w)?)?;
        }
    }
    Ok(total)
}

/// Sum over levels of gamma_i * ((1 - d(pred_a, real_a)) + (1 - d(pred_s, real_s))).
pub fn fdc<'g>(
    pred_a: &[Var<'g>],
    real_a: &[Var<'g>],
    pred_s: &[Var<'g>],
    real_s: &[Var<'g>],
    gamma: &[f64],
    alpha: f64,
    beta: f64,
) -> Result<Var<'g>> {
    check_levels("fdc", gamma, &[pred_a.len(), real_a.len(), pred_s.len(), real_s.len()])?;
    let Some(first) = pred_a.first() else {
        return contract("fdc needs at least one level");
    };
    let mut total = first.graph().scalar(0.0);
    for i in 0..gamma.len() {
        if gamma[i] == 0.0 {
            continue;
        }
        let da = feature_distance(pred_a[i], real_a[i], alpha, beta)?.rsub(1.0)?;
        let ds = feature_distance(pred_s[i], real_s[i], alpha, beta)?.rsub(1.0)?;
        total = total.add(da.add(ds)?.scale(gamma[i])?)?;
    }
    Ok(total)
}
