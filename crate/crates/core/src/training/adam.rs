//! Adam with bias correction and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::linalg::norm;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 10.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("adam needs lr > 0, β ∈ [0, 1) and eps > 0".into()))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }
}

/// One update in place; returns the gradient norm before clipping.
pub fn adam_step<T: Scalar>(params: &mut [T], grad: &[T], state: &mut AdamState<T>, cfg: &AdamConfig) -> Result<T> {
    if grad.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid("adam: parameter, gradient and state lengths differ"));
    }
    let gnorm = norm(grad);
    if !gnorm.is_finite() {
        return Err(Error::Evaluation("non-finite gradient".into()));
    }
    let scale = if cfg.clip_norm > 0.0 && gnorm > T::of(cfg.clip_norm) {
        T::of(cfg.clip_norm) / gnorm
    } else {
        T::one()
    };
    state.t += 1;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::one() - b1.powi(state.t as i32);
    let c2 = T::one() - b2.powi(state.t as i32);
    let lr = T::of(cfg.lr);
    let eps = T::of(cfg.eps);
    for i in 0..params.len() {
        let g = grad[i] * scale;
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(gnorm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::<f64>::new(2);
        s.m = vec![0.5, 0.5];
        s.v = vec![0.25, 0.25];
        let cfg = AdamConfig::default();
        let before = p.clone();
        adam_step(&mut p, &[0.0, 0.0], &mut s, &cfg).unwrap();
        assert_eq!(s.m, vec![0.45, 0.45]);
        assert!((s.v[0] - 0.25 * 0.999).abs() < 1e-15);
        // Nonzero moments still move the parameters; with fresh moments they do not.
        let mut q = before.clone();
        adam_step(&mut q, &[0.0, 0.0], &mut AdamState::new(2), &cfg).unwrap();
        assert_eq!(q, before);
        assert_ne!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig {
            clip_norm: 0.0,
            ..Default::default()
        };
        for g in [1e-3, 0.7, 250.0] {
            let mut p = vec![0.0];
            adam_step(&mut p, &[g], &mut AdamState::new(1), &cfg).unwrap();
            // m̂ = g, v̂ = g², step = lr·g/(|g| + eps).
            let expect = -cfg.lr * g / (g + cfg.eps);
            assert!((p[0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn clipping_reports_raw_norm() {
        let cfg = AdamConfig {
            clip_norm: 1.0,
            ..Default::default()
        };
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        let n = adam_step(&mut p, &[30.0, 40.0], &mut s, &cfg).unwrap();
        assert_eq!(n, 50.0);
        assert!((s.m[0] - 0.1f64 * 0.6).abs() < 1e-15);
    }
}
