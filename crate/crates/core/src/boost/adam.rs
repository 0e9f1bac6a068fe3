use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Adam optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub params: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: Vec<f64>, learning_rate: f64) -> Self {
        let p = params.len();
        Self {
            params,
            m: vec![0.0; p],
            v: vec![0.0; p],
            t: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update that descends along `gradient`.
pub fn adam_step(state: &AdamState, gradient: &[f64]) -> Result<AdamState> {
    if gradient.len() != state.params.len() {
        return Err(Error::Validation(format!(
            "gradient has {} entries, parameters have {}",
            gradient.len(),
            state.params.len()
        )));
    }
    if let Some(i) = gradient.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            step: state.t as usize + 1,
            detail: format!("component {i} is {}", gradient[i]),
        });
    }
    let mut next = state.clone();
    next.t += 1;
    let t = next.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for k in 0..gradient.len() {
        let g = gradient[k];
        next.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g;
        next.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g;
        let m_hat = next.m[k] / bc1;
        let v_hat = next.v[k] / bc2;
        next.params[k] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let s = AdamState::new(vec![1.0, -2.0], 0.1);
        let n = adam_step(&s, &[0.0, 0.0]).unwrap();
        assert_eq!(n.params, s.params);
        assert_eq!(n.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the displacement is lr·g/(|g| + ε)
        let s = AdamState::new(vec![0.0, 0.0], 1e-3);
        let g = [3.0, -0.5];
        let n = adam_step(&s, &g).unwrap();
        for (p, gi) in n.params.iter().zip(g) {
            let expected = -1e-3 * gi / (gi.abs() + 1e-8);
            assert!((p - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut s = AdamState::new(vec![0.0, 0.0], 0.01);
        for _ in 0..100 {
            s = adam_step(&s, &[2.0, -1.0]).unwrap();
        }
        assert!(s.params[0] < -0.5 && s.params[1] > 0.5);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let s = AdamState::new(vec![0.0], 0.01);
        let err = adam_step(&s, &[f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { step: 1, .. }));
        assert!(adam_step(&s, &[1.0, 2.0]).is_err());
    }
}
