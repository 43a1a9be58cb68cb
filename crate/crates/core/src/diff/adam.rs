use serde::{Deserialize, Serialize};

use super::{DiffError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Pure: returns new parameters and state.
pub fn adam_step(
    params: &[f64],
    grad: &[f64],
    state: &AdamState,
    cfg: &AdamConfig,
) -> Result<(Vec<f64>, AdamState)> {
    let n = params.len();
    for len in [grad.len(), state.m.len(), state.v.len()] {
        if len != n {
            return Err(DiffError::Length(n, len));
        }
    }
    let t = state.t + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let mut out = Vec::with_capacity(n);
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        let mi = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        let vi = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let step = cfg.lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
        out.push(params[i] - step);
        m.push(mi);
        v.push(vi);
    }
    Ok((out, AdamState { m, v, t }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let state = AdamState {
            m: vec![1.0, -2.0],
            v: vec![4.0, 1.0],
            t: 3,
        };
        let cfg = AdamConfig::default();
        let mut with_zero_m = state.clone();
        with_zero_m.m = vec![0.0, 0.0];
        let (p, s) = adam_step(&[0.5, 0.7], &[0.0, 0.0], &with_zero_m, &cfg).unwrap();
        assert_eq!(p, vec![0.5, 0.7]);
        assert_eq!(s.v, vec![4.0 * 0.999, 0.999]);
        let (_, s) = adam_step(&[0.5, 0.7], &[0.0, 0.0], &state, &cfg).unwrap();
        assert_eq!(s.m, vec![0.9, -1.8]);
        assert_eq!(s.t, 4);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let cfg = AdamConfig::default();
        let g = [3.0, -0.5, 1e-3];
        let (p, _) = adam_step(&[0.0; 3], &g, &AdamState::new(3), &cfg).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            let expected = -cfg.lr * gi / (gi.abs() + cfg.eps);
            assert!((pi - expected).abs() < 1e-15);
            assert!((pi + cfg.lr * gi.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn deterministic_and_checked() {
        let cfg = AdamConfig::default();
        let s = AdamState::new(2);
        let a = adam_step(&[1.0, 2.0], &[0.3, 0.1], &s, &cfg).unwrap();
        let b = adam_step(&[1.0, 2.0], &[0.3, 0.1], &s, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(adam_step(&[1.0], &[0.3, 0.1], &s, &cfg).is_err());
    }
}
