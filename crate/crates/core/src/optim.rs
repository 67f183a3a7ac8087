//! Adam with bias-corrected moment estimates.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg("learning_rate", "must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::arg(name, "must lie in (0, 1)"));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::arg("epsilon", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Result<Self> {
        config.validate()?;
        let m: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Ok(Self { config, step_count: 0, v: m.clone(), m })
    }

    /// Applies one update to every parameter and clears the gradients.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::DimMismatch { what: "adam state", expected: self.m.len(), got: params.len() });
        }
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        let AdamConfig { learning_rate: lr, beta1: b1, beta2: b2, epsilon: eps } = self.config;
        let t = self.step_count + 1;
        let c1 = 1.0 - libm::pow(b1, t as f64);
        let c2 = 1.0 - libm::pow(b2, t as f64);
        for i in 0..params.len() {
            let g = params.get(i).grad.clone().expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.len() != g.len() {
                return Err(Error::DimMismatch { what: "adam moment", expected: m.len(), got: g.len() });
            }
            let value = params.value_mut(i).data_mut();
            for k in 0..g.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                value[k] -= lr * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
        self.step_count = t;
        params.zero_grad();
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState) -> Result<()> {
    state.step(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(value: f64, grad: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_slice(&[value]).unwrap()).unwrap();
        p.accumulate_grad(0, &[grad]).unwrap();
        p
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let g = 0.37;
        let mut p = one_param(1.0, g);
        let mut s = AdamState::new(AdamConfig::default(), &p).unwrap();
        adam_step(&mut p, &mut s).unwrap();
        let expected = 1.0 - 1e-3 * g / (g + 1e-8);
        assert!((p.value(0).data()[0] - expected).abs() < 1e-15);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = one_param(2.5, 0.0);
        let mut s = AdamState::new(AdamConfig::default(), &p).unwrap();
        adam_step(&mut p, &mut s).unwrap();
        assert_eq!(p.value(0).data()[0], 2.5);
    }

    #[test]
    fn two_steps_keep_bookkeeping() {
        let mut p = one_param(0.0, 1.0);
        let mut s = AdamState::new(AdamConfig::default(), &p).unwrap();
        adam_step(&mut p, &mut s).unwrap();
        p.accumulate_grad(0, &[1.0]).unwrap();
        adam_step(&mut p, &mut s).unwrap();
        assert_eq!(s.step_count, 2);
        assert!(s.m[0][0].is_finite() && s.v[0][0].is_finite());
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut p = ParamSet::new();
        p.insert("enc.w", Tensor::from_slice(&[1.0]).unwrap()).unwrap();
        let mut s = AdamState::new(AdamConfig::default(), &p).unwrap();
        assert_eq!(adam_step(&mut p, &mut s), Err(Error::MissingGrad("enc.w".into())));
    }
}
