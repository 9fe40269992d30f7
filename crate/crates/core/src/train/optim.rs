use serde::{Deserialize, Serialize};

use crate::error::{expect_dim, Error, Result};
use crate::params::Module;
use crate::Scalar;

/// Moment buffers and hyper-parameters of Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Completed update steps.
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected update of `params` from `grads`, in place:
    /// `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn update(&mut self, params: &mut [T], grads: &[T], lr: f64) -> Result<()> {
        expect_dim("adam", "params", self.m.len(), params.len())?;
        expect_dim("adam", "grads", self.m.len(), grads.len())?;
        self.t += 1;
        self.apply(params, grads, 0, lr);
        Ok(())
    }

    /// Updates the moment range starting at `offset`; `t` must already be advanced.
    fn apply(&mut self, params: &mut [T], grads: &[T], offset: usize, lr: f64) {
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let m = &mut self.m[offset..offset + params.len()];
        let v = &mut self.v[offset..offset + params.len()];
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m).zip(v) {
            let g = g.as_f64();
            let mn = b1 * m.as_f64() + (1.0 - b1) * g;
            let vn = b2 * v.as_f64() + (1.0 - b2) * g * g;
            *m = T::of(mn);
            *v = T::of(vn);
            let step = lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
            *p = T::of(p.as_f64() - step);
        }
    }
}

/// Applies one Adam step to every parameter of `params`, walking the
/// parameter and gradient modules in lock-step.
pub fn adam_step<T: Scalar, M: Module<T>>(params: &mut M, grads: &M, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    let total = params.num_params();
    expect_dim("adam", "params", state.len(), total)?;
    expect_dim("adam", "grads", total, grads.num_params())?;
    let gs = grads.slices();
    let mut ps = params.slices_mut();
    if gs.len() != ps.len() || ps.iter().zip(&gs).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::invalid("adam", "gradient structure differs from parameters"));
    }
    state.t += 1;
    let mut offset = 0;
    for (p, g) in ps.iter_mut().zip(gs) {
        state.apply(p, g, offset, lr);
        offset += g.len();
    }
    Ok(())
}

/// Cosine annealing from `eta_max` at step 0 to `eta_min` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub eta_max: f64,
    pub eta_min: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(total_steps: u64) -> Self {
        Self {
            eta_max: 1e-4,
            eta_min: 1e-7,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.eta_min && self.eta_min < self.eta_max && self.eta_max.is_finite()) {
            return Err(Error::invalid(
                "lr schedule",
                format!("need 0 < eta_min < eta_max, got {} and {}", self.eta_min, self.eta_max),
            ));
        }
        Ok(())
    }
}

/// `eta_min + (eta_max - eta_min) * (1 + cos(pi t / T)) / 2`, written as a
/// convex combination so both endpoints are returned exactly.
pub fn cosine_lr(t: u64, s: &LrSchedule) -> Result<f64> {
    if t > s.total_steps {
        return Err(Error::invalid("cosine_lr", format!("step {t} beyond schedule length {}", s.total_steps)));
    }
    if s.total_steps == 0 {
        return Ok(s.eta_max);
    }
    let w = 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / s.total_steps as f64).cos());
    Ok(w * s.eta_max + (1.0 - w) * s.eta_min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut st = AdamState::<f64>::new(3);
        let mut p = vec![0.5, -1.0, 2.0];
        st.update(&mut p, &[0.0; 3], 1e-3).unwrap();
        assert_eq!(p, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn first_step_closed_form() {
        let mut st = AdamState::<f64>::new(1);
        let mut p = vec![0.0];
        st.update(&mut p, &[1.0], 1e-4).unwrap();
        assert!((st.m[0] - 0.1).abs() < 1e-15);
        assert!((st.v[0] - 0.001).abs() < 1e-15);
        assert!((p[0] + 1e-4 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn two_steps_match_scalar_recurrence() {
        let (g, lr, b1, b2, eps) = (0.37, 1e-3, 0.9f64, 0.999f64, 1e-8);
        let mut st = AdamState::<f64>::new(1);
        let mut p = vec![0.5];
        let (mut m, mut v, mut q) = (0.0, 0.0, 0.5);
        for t in 1..=2 {
            st.update(&mut p, &[g], lr).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            q -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        assert!((p[0] - q).abs() <= 1e-12, "{} vs {q}", p[0]);
        assert_eq!(st.t, 2);
    }

    #[test]
    fn length_mismatch() {
        let mut st = AdamState::<f32>::new(2);
        assert!(st.update(&mut [0.0; 3], &[0.0; 3], 1e-3).is_err());
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = LrSchedule::new(1000);
        assert_eq!(cosine_lr(0, &s).unwrap(), 1e-4);
        assert_eq!(cosine_lr(1000, &s).unwrap(), 1e-7);
        assert!((cosine_lr(500, &s).unwrap() - 5.005e-5).abs() < 1e-18);
        assert!(cosine_lr(1001, &s).is_err());
    }
}
