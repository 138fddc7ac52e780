//! Adam with bias correction.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One update of every parameter in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, config: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::Invalid(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for k in 0..p.len() {
            let gk = g.data()[k];
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * gk;
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0]).unwrap()];
        let mut st = AdamState::zeros_like(&params);
        adam_step(&mut params, &[Tensor::zeros(&[2])], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [3.0, -0.5, 1e3] {
            let mut params = vec![Tensor::scalar(0.0)];
            let mut st = AdamState::zeros_like(&params);
            let cfg = AdamConfig::default();
            adam_step(&mut params, &[Tensor::scalar(g)], &mut st, &cfg).unwrap();
            assert!((params[0].item().abs() - cfg.learning_rate).abs() < 1e-6 * cfg.learning_rate);
            assert_eq!(params[0].item().signum(), -g.signum());
        }
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut params = vec![Tensor::scalar(0.7), Tensor::scalar(0.7)];
        let mut st = AdamState::zeros_like(&params);
        for k in 0..5 {
            let g = Tensor::scalar((k as f64).sin());
            adam_step(&mut params, &[g.clone(), g], &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(params[0], params[1]);
    }

    #[test]
    fn shape_mismatch() {
        let mut params = vec![Tensor::zeros(&[2])];
        let mut st = AdamState::zeros_like(&params);
        assert!(adam_step(&mut params, &[Tensor::zeros(&[3])], &mut st, &AdamConfig::default()).is_err());
        assert!(adam_step(&mut params, &[], &mut st, &AdamConfig::default()).is_err());
    }
}
