use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return contract(format!("invalid optimizer settings {self:?}"));
        }
        Ok(())
    }
}

/// First and second moments plus a step count per parameter tensor. Step counts are kept
/// per tensor so a skipped tensor's bias correction stays consistent.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub steps: Vec<u64>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Tensor::numel).collect();
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: vec![0; sizes.len()],
        }
    }

    /// One bias-corrected update. Returns, per tensor, whether it was skipped because its
    /// gradient had a non-finite entry.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[Vec<f64>],
        cfg: &AdamConfig,
    ) -> Result<Vec<bool>> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return contract(format!(
                "adam: {} parameters and {} gradients for a state of {} tensors",
                params.len(),
                grads.len(),
                self.m.len()
            ));
        }
        if let Some(k) = (0..grads.len()).find(|&k| grads[k].len() != self.m[k].len() || params[k].numel() != self.m[k].len()) {
            return contract(format!("adam: size mismatch at tensor {k}"));
        }
        let mut skipped = vec![false; params.len()];
        for (k, p) in params.into_iter().enumerate() {
            let g = &grads[k];
            if g.iter().any(|x| !x.is_finite()) {
                skipped[k] = true;
                continue;
            }
            self.steps[k] += 1;
            let t = self.steps[k] as i32;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                *w -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
            }
        }
        Ok(skipped)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> Vec<Tensor> {
        vec![Tensor::from_vec(vec![1.0, -2.0, 0.5]), Tensor::from_vec(vec![3.0])]
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut p = params();
        let mut st = AdamState::new(&p);
        for _ in 0..3 {
            st.step(p.iter_mut(), &[vec![0.0; 3], vec![0.0]], &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, params());
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut p = params();
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        let g = vec![vec![0.3, -7.0, 1e-3], vec![-2.0]];
        st.step(p.iter_mut(), &g, &cfg).unwrap();
        for (k, t) in p.iter().enumerate() {
            for (i, &w) in t.data().iter().enumerate() {
                let gi = g[k][i];
                // closed form: m_hat = g, v_hat = g^2
                let want = params()[k].data()[i] - cfg.lr * gi / (gi.abs() + cfg.eps);
                assert!((w - want).abs() < 1e-15);
                assert!((w - (params()[k].data()[i] - cfg.lr * gi.signum())).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn identical_snapshots_give_identical_results() {
        let g = vec![vec![0.1, 0.2, -0.3], vec![0.4]];
        let mut p1 = params();
        let mut st1 = AdamState::new(&p1);
        st1.step(p1.iter_mut(), &g, &AdamConfig::default()).unwrap();
        let (mut p2, mut st2) = (p1.clone(), st1.clone());
        st1.step(p1.iter_mut(), &g, &AdamConfig::default()).unwrap();
        st2.step(p2.iter_mut(), &g, &AdamConfig::default()).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(st1, st2);
    }

    #[test]
    fn non_finite_gradient_skips_only_that_tensor() {
        let mut p = params();
        let mut st = AdamState::new(&p);
        let skipped = st.step(p.iter_mut(), &[vec![f64::NAN, 0.0, 0.0], vec![1.0]], &AdamConfig::default()).unwrap();
        assert_eq!(skipped, vec![true, false]);
        assert_eq!(p[0], params()[0]);
        assert_ne!(p[1], params()[1]);
        assert_eq!(st.steps, vec![0, 1]);
    }

    #[test]
    fn mismatched_sizes_are_rejected() {
        let mut p = params();
        let mut st = AdamState::new(&p);
        assert!(st.step(p.iter_mut(), &[vec![0.0; 2], vec![0.0]], &AdamConfig::default()).is_err());
        assert!(st.step(p.iter_mut(), &[vec![0.0; 3]], &AdamConfig::default()).is_err());
    }
}
