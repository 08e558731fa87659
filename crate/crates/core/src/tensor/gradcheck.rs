use super::{Graph, Tensor, TensorError, TensorResult, Var};

pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares the reverse-mode gradient of a scalar function against central differences.
///
/// The relative error per element is `|a - n| / max(GRAD_FLOOR, |a| + |n|)`, so elements whose
/// gradients are both tiny are judged on absolute error instead of amplified round-off. A non-finite
/// function value at a perturbed point is reported as an error naming the element.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> TensorResult<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> TensorResult<Var<'g>>,
{
    assert!(eps > 0.0, "eps must be positive");
    let analytic = {
        let g = Graph::new();
        let xv = g.param(x);
        let y = f(&g, xv)?;
        g.backward(y)?;
        xv.grad().expect("leaf requires grad")
    };
    let eval = |data: Vec<f64>, index: usize| -> TensorResult<f64> {
        let g = Graph::new();
        let xv = g.constant(Tensor::new(x.shape().to_vec(), data)?);
        let y = f(&g, xv)?;
        if y.numel() != 1 {
            return Err(TensorError::NonScalarRoot(y.shape()));
        }
        let v = y.item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite {
                op: "finite_diff_check",
                index,
            });
        }
        Ok(v)
    };
    let mut numeric = Vec::with_capacity(x.numel());
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let fp = eval(plus, i).map_err(|e| nonfinite_at(e, i))?;
        let fm = eval(minus, i).map_err(|e| nonfinite_at(e, i))?;
        let n = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - n).abs() / (a.abs() + n.abs()).max(GRAD_FLOOR);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
        numeric.push(n);
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

fn nonfinite_at(e: TensorError, index: usize) -> TensorError {
    match e {
        TensorError::NonFinite { .. } | TensorError::Domain { .. } => TensorError::NonFinite {
            op: "finite_diff_check",
            index,
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Conv2dParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn square_sum_matches_central_difference() {
        let x = random(&[3, 3], -1.0, 1.0, 1);
        let r = finite_diff_check(|_, x| x.square()?.sum(), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn linear_function_is_exact() {
        let x = random(&[4, 2], -3.0, 3.0, 2);
        let r = finite_diff_check(|_, x| x.sum(), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn nonfinite_perturbation_is_reported_with_index() {
        let x = Tensor::from_vec(vec![1.0, 1e-7]);
        let err = finite_diff_check(|_, x| x.log()?.sum(), &x, 1e-5).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { index: 1, .. }), "{err:?}");
    }

    // Random projection of a vector-valued primitive keeps the check sensitive to every output.
    fn project_onto<'g>(w: &Tensor, y: Var<'g>) -> TensorResult<Var<'g>> {
        let n = y.numel();
        let coeffs: Vec<f64> = (0..n).map(|i| w.data()[i % w.numel()] + 0.1 * (i as f64).sin()).collect();
        let c = y.graph().constant(Tensor::new(y.shape(), coeffs)?);
        y.mul(c)?.sum()
    }

    /// Every registered adjoint on random inputs in [0.1, 1].
    #[test]
    fn every_primitive_adjoint() {
        let tol = 1e-4;
        let x = random(&[2, 4, 4], 0.1, 1.0, 3);
        let other = random(&[2, 4, 4], 0.1, 1.0, 4);
        let kernel = random(&[3, 2, 3, 3], -0.5, 0.5, 5);
        let bias = random(&[3], -0.5, 0.5, 6);
        let mat = random(&[4, 3], -1.0, 1.0, 7);
        let weights = random(&[2, 4, 4], -1.0, 1.0, 8);

        type Case = (&'static str, Box<dyn for<'g> Fn(&'g Graph, Var<'g>) -> TensorResult<Var<'g>>>);
        let p = std::rc::Rc::new(weights.clone());
        let o = other.clone();
        let k = kernel.clone();
        let b = bias.clone();
        let m = mat.clone();
        let cases: Vec<Case> = vec![
            ("add", { let p = p.clone(); let o = o.clone(); Box::new(move |g, x| project_onto(&p, x.add(g.constant(o.clone()))?)) }),
            ("sub", { let p = p.clone(); let o = o.clone(); Box::new(move |g, x| project_onto(&p, g.constant(o.clone()).sub(x)?)) }),
            ("mul", { let p = p.clone(); let o = o.clone(); Box::new(move |g, x| project_onto(&p, x.mul(g.constant(o.clone()))?)) }),
            ("div-num", { let p = p.clone(); let o = o.clone(); Box::new(move |g, x| project_onto(&p, x.div(g.constant(o.clone()))?)) }),
            ("div-den", { let p = p.clone(); let o = o.clone(); Box::new(move |g, x| project_onto(&p, g.constant(o.clone()).div(x)?)) }),
            ("scalar-mul", { let p = p.clone(); Box::new(move |_, x| project_onto(&p, x.scale(-1.7)?)) }),
            ("scalar-add", { let p = p.clone(); Box::new(move |_, x| project_onto(&p, x.shift(0.3)?)) }),
            ("conv2d", { let p = p.clone(); let k = k.clone(); let b = b.clone(); Box::new(move |g, x| project_onto(&p, x.conv2d(g.constant(k.clone()), Some(g.constant(b.clone())), Conv2dParams::same(3, 1))?)) }),
            ("conv2d-kernel", { let p = p.clone(); let k = k.clone(); Box::new(move |g, x| {
                // x plays the role of the input; differentiate w.r.t. a kernel built from it
                let w = x.reshape(vec![1, 2, 4, 4])?.slice(vec![(0, 1), (0, 2), (0, 3), (0, 3)])?;
                let inp = g.constant(k.clone().reshaped(vec![3, 6, 3])?).slice(vec![(0, 2), (0, 6), (0, 3)])?;
                project_onto(&p, inp.conv2d(w, None, Conv2dParams { stride: 1, pad: 1, dilation: 1 })?)
            }) }),
            ("conv2d-dilated-strided", { let p = p.clone(); let k = k.clone(); Box::new(move |g, x| project_onto(&p, x.conv2d(g.constant(k.clone()), None, Conv2dParams { stride: 2, pad: 2, dilation: 2 })?)) }),
            ("relu", { let p = p.clone(); Box::new(move |_, x| project_onto(&p, x.shift(-0.55)?.relu()?)) }),
            ("sigmoid", { let p = p.clone(); Box::new(move |_, x| project_onto(&p, x.sigmoid()?)) }),
            ("maxpool2x2", { let p = p.clone(); Box::new(move |_, x| project_onto(&p, x.maxpool2x2()?)) }),
            ("avgpool2x2", { let p = p.clone(); Box::new(move |_, x| project_onto(&p, x.avgpool2x2()?)) }),
            ("nearest-upsample2x", { let p = p.clone(); Box::new(move |_, x| project_onto(&p, x.upsample2x()?)) }),
            ("channel-concat", { let p = p.clone(); let o = o.clone(); Box::new(move |g, x| project_onto(&p, g.concat(&[x, g.constant(o.clone()), x])?)) }),
            ("sum", Box::new(|_, x| x.sum()?.square())),
            ("mean", Box::new(|_, x| x.mean()?.square())),
            ("sum-axis", { let p = p.clone(); Box::new(move |_, x| project_onto(&p, x.sum_axis(0)?.square()?)) }),
            ("abs", { let p = p.clone(); Box::new(move |_, x| project_onto(&p, x.shift(-0.55)?.abs()?)) }),
            ("square", { let p = p.clone(); Box::new(move |_, x| project_onto(&p, x.square()?)) }),
            ("sqrt", { let p = p.clone(); Box::new(move |_, x| project_onto(&p, x.sqrt()?)) }),
            ("log", { let p = p.clone(); Box::new(move |_, x| project_onto(&p, x.log()?)) }),
            ("exp", { let p = p.clone(); Box::new(move |_, x| project_onto(&p, x.exp()?)) }),
            ("power", { let p = p.clone(); Box::new(move |_, x| project_onto(&p, x.powf(2.5)?)) }),
            ("slice", { let p = p.clone(); Box::new(move |_, x| project_onto(&p, x.slice(vec![(1, 2), (1, 4), (0, 3)])?)) }),
            ("pad-replicate", { let p = p.clone(); Box::new(move |_, x| project_onto(&p, x.pad_replicate(1, 2, 0, 1)?)) }),
            ("reshape", { let p = p.clone(); Box::new(move |_, x| project_onto(&p, x.reshape(vec![4, 8])?.square()?)) }),
            ("clamp", { let p = p.clone(); Box::new(move |_, x| project_onto(&p, x.clamp(0.05, 2.0)?.square()?)) }),
            ("gather", Box::new(|_, x| x.gather(vec![0, 5, 5, 31].into())?.square()?.sum())),
            ("matmul-left", { let m = m.clone(); Box::new(move |g, x| x.reshape(vec![8, 4])?.matmul(g.constant(m.clone()))?.square()?.sum()) }),
            ("matmul-right", { let m = m.clone(); Box::new(move |g, x| g.constant(m.clone()).reshape(vec![3, 4])?.matmul(x.reshape(vec![4, 8])?)?.square()?.sum()) }),
            ("warp", { let p = p.clone(); Box::new(move |_, x| {
                let u: Vec<f64> = (0..16).map(|i| 0.3 + 0.1 * (i % 3) as f64).collect();
                let v: Vec<f64> = (0..16).map(|i| -0.25 + 0.05 * (i % 5) as f64).collect();
                project_onto(&p, x.warp(u.into(), v.into())?)
            }) }),
        ];
        let mut failures = Vec::new();
        for (name, f) in &cases {
            let r = finite_diff_check(|g, x| f(g, x), &x, 1e-5).unwrap();
            if !r.passes(tol) {
                failures.push(format!("{name}: {:.3e}", r.max_rel_error));
            }
        }
        assert!(failures.is_empty(), "{failures:?}");
    }
}
