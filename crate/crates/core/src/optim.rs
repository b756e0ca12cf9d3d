//! Adam with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment accumulators, one pair per parameter in registration order.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update using each tensor's accumulated gradient; a missing
    /// gradient counts as zero. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (String, &'a mut Tensor)>) -> Result<()> {
        let mut params: Vec<(String, &mut Tensor)> = params.into_iter().collect();
        for (name, p) in &params {
            if p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len()
            || self.first.iter().zip(&params).any(|(m, (_, p))| m.len() != p.numel())
        {
            return Err(Error::dim("adam", "parameter set changed between steps"));
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((_, p), (m, v)) in params.iter_mut().zip(self.first.iter_mut().zip(self.second.iter_mut())) {
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                // Moments still decay for parameters without a gradient.
                m.iter_mut().for_each(|m| *m *= beta1);
                v.iter_mut().for_each(|v| *v *= beta2);
                apply(p.data_mut(), m, v, lr, c1, c2, eps);
                continue;
            };
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            }
            apply(p.data_mut(), m, v, lr, c1, c2, eps);
        }
        Ok(())
    }
}

fn apply(data: &mut [f64], m: &[f64], v: &[f64], lr: f64, c1: f64, c2: f64, eps: f64) {
    for i in 0..data.len() {
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64], grad: &[f64]) -> Tensor {
        let mut t = Tensor::new(vec![values.len()], values.to_vec()).unwrap().with_grad();
        t.accumulate_grad(grad);
        t
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = param(&[1.0, -2.0], &[0.0, 0.0]);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step([("p".to_string(), &mut p)]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g and v̂ = g² after bias correction, so the step is
        // lr · g / (|g| + ε) ≈ lr · sign(g).
        let g = 0.37;
        let mut p = param(&[0.5], &[g]);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step([("p".to_string(), &mut p)]).unwrap();
        let expected = 0.5 - 1e-3 * g / (g + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((0.5 - p.data()[0] - 1e-3).abs() < 1e-9);
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut a = param(&[1.0], &[0.1]);
        let mut b = param(&[1.0], &[f64::NAN]);
        let mut adam = Adam::new(AdamConfig::default());
        let err = adam.step([("a".to_string(), &mut a), ("bn.scale".to_string(), &mut b)]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "bn.scale"));
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut p = param(&[0.3, -0.7, 1.1], &[0.0; 3]);
            let mut adam = Adam::new(AdamConfig::default());
            for k in 0..10 {
                p.zero_grad();
                let g: Vec<f64> = p.data().iter().map(|x| x * (k as f64 + 1.0).sin()).collect();
                p.accumulate_grad(&g);
                adam.step([("p".to_string(), &mut p)]).unwrap();
            }
            p.data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_changed_parameter_set() {
        let mut a = param(&[1.0], &[0.1]);
        let mut b = param(&[1.0, 2.0], &[0.1, 0.1]);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step([("a".to_string(), &mut a)]).unwrap();
        assert!(adam.step([("b".to_string(), &mut b)]).is_err());
    }
}
