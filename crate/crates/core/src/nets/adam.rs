use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// First/second moments for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || state.v.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam shapes differ: params {}, grads {}, moments {}/{}",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2, AdamConfig::default());
        adam_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_matches_hand_recurrence() {
        // m = 0.1, v = 0.001; m̂ = 1, v̂ = 1 → Δ = 0.1 / (1 + 1e-15).
        let mut p = vec![0.0];
        let mut s = AdamState::new(1, AdamConfig::with_lr(0.1));
        adam_step(&mut p, &[1.0], &mut s).unwrap();
        assert!((p[0] + 0.1 / (1.0 + 1e-15)).abs() < 1e-15);
        // Second step with the same gradient: m̂ = v̂ = 1 again.
        adam_step(&mut p, &[1.0], &mut s).unwrap();
        assert!((p[0] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn deterministic_and_shape_checked() {
        let mut s1 = AdamState::new(3, AdamConfig::default());
        let mut s2 = s1.clone();
        let (mut p1, mut p2) = (vec![0.3, 0.1, -0.4], vec![0.3, 0.1, -0.4]);
        let g = [0.5, -1.5, 2.0];
        adam_step(&mut p1, &g, &mut s1).unwrap();
        adam_step(&mut p2, &g, &mut s2).unwrap();
        assert_eq!((p1, s1), (p2, s2));
        let mut p = vec![0.0; 2];
        assert!(adam_step(&mut p, &[1.0], &mut AdamState::new(2, AdamConfig::default())).is_err());
    }
}
