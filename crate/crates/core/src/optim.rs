//! Adam and the step-wise learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrMode {
    /// `base·(1 + slope·k)` after `k` completed steps.
    #[default]
    Additive,
    /// `base·(1 + slope)^k`.
    Multiplicative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub step: usize,
    pub slope: f64,
    pub mode: LrMode,
}

impl LrSchedule {
    pub fn new(base: f64, step: usize, slope: f64, mode: LrMode) -> Result<Self> {
        if !(base > 0.0 && base.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "base learning rate must be positive, got {base}"
            )));
        }
        if step == 0 {
            return Err(Error::InvalidArgument(
                "learning-rate step must be at least 1".into(),
            ));
        }
        if !(slope >= 0.0 && slope.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning-rate slope must be non-negative, got {slope}"
            )));
        }
        Ok(Self {
            base,
            step,
            slope,
            mode,
        })
    }

    pub fn lr_at(&self, iter: usize) -> f64 {
        let k = (iter / self.step) as f64;
        match self.mode {
            LrMode::Additive => self.base * (1.0 + self.slope * k),
            LrMode::Multiplicative => self.base * (1.0 + self.slope).powf(k),
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self::with_hyper(len, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                self.m.len(),
                format!("{}/{}", params.len(), grads.len()),
            ));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn additive_schedule_examples() {
        let s = LrSchedule::new(4e-6, 50, 0.2, LrMode::Additive).unwrap();
        assert_eq!(s.lr_at(0), 4e-6);
        assert_eq!(s.lr_at(49), 4e-6);
        assert!((s.lr_at(50) - 4.8e-6).abs() < 1e-18);
        assert!((s.lr_at(100) - 5.6e-6).abs() < 1e-18);
    }

    #[test]
    fn multiplicative_schedule() {
        let s = LrSchedule::new(1.0, 10, 0.2, LrMode::Multiplicative).unwrap();
        assert_eq!(s.lr_at(9), 1.0);
        assert!((s.lr_at(20) - 1.44).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(LrSchedule::new(0.0, 50, 0.2, LrMode::Additive).is_err());
        assert!(LrSchedule::new(1.0, 0, 0.2, LrMode::Additive).is_err());
        assert!(LrSchedule::new(1.0, 5, -0.2, LrMode::Additive).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Adam::new(2);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[3.0, -0.5], 0.1).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-8);
        assert!((p[1] + 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut opt = Adam::new(3);
        let mut p = vec![0.5, 0.25, -2.0];
        for _ in 0..5 {
            opt.step(&mut p, &[0.0; 3], 1.0).unwrap();
        }
        assert_eq!(p, vec![0.5, 0.25, -2.0]);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut opt = Adam::new(1);
        let mut p = vec![5.0];
        for _ in 0..2000 {
            let g = 2.0 * (p[0] - 1.5);
            opt.step(&mut p, &[g], 0.05).unwrap();
        }
        assert!((p[0] - 1.5).abs() < 1e-3);
    }
}
