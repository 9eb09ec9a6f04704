//! Noise schedules and discretized timestep sequences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-step variances `β_t` and their cumulative products `ᾱ_t`.
///
/// Timesteps are 1-based: `beta(t)` for `t ∈ 1..=T`, and `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument(
                "schedule needs at least one timestep".into(),
            ));
        }
        if let Some((i, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, b)| !(**b > 0.0 && **b < 1.0))
        {
            return Err(Error::InvalidArgument(format!(
                "beta at t={} is {b}, must lie in (0, 1)",
                i + 1
            )));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Linearly interpolated `β` from `beta_start` (t=1) to `beta_end` (t=T).
    pub fn linear(t_full: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_full == 0 {
            return Err(Error::InvalidArgument("t_full must be positive".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = (0..t_full)
            .map(|i| {
                if t_full == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_full - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn t_full(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_full() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} beyond schedule length {}",
                self.t_full()
            )));
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        let cfg = ScheduleConfig::default();
        Self::linear(cfg.t_full, cfg.beta_start, cfg.beta_end)
            .expect("default schedule parameters are valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub t_full: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            t_full: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_full, self.beta_start, self.beta_end)
    }
}

/// Strictly increasing timesteps ending at the return step `t0`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepSequence {
    t0: usize,
    steps: Vec<usize>,
}

impl TimestepSequence {
    /// `s` steps spread uniformly over `(0, t0]`: `round(t0·i/s)` for
    /// `i = 1..=s`, with rounding collisions dropped.
    pub fn uniform(t0: usize, s: usize, t_full: usize) -> Result<Self> {
        if s == 0 || t0 == 0 {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= s <= t0, got s={s}, t0={t0}"
            )));
        }
        if s > t0 {
            return Err(Error::InvalidArgument(format!(
                "discretization {s} exceeds return step {t0}"
            )));
        }
        if t0 > t_full {
            return Err(Error::InvalidArgument(format!(
                "return step {t0} exceeds schedule length {t_full}"
            )));
        }
        let mut steps: Vec<usize> = Vec::with_capacity(s);
        for i in 1..=s {
            let t = (t0 as f64 * i as f64 / s as f64).round() as usize;
            if steps.last() != Some(&t) {
                steps.push(t);
            }
        }
        debug_assert_eq!(steps.last(), Some(&t0));
        Ok(Self { t0, steps })
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Consecutive `(from, to)` pairs walking `0 -> t0`.
    pub fn ascending_pairs(&self) -> Vec<(usize, usize)> {
        std::iter::once(0)
            .chain(self.steps.iter().copied())
            .collect::<Vec<_>>()
            .windows(2)
            .map(|w| (w[0], w[1]))
            .collect()
    }

    /// Consecutive `(from, to)` pairs walking `t0 -> 0`.
    pub fn descending_pairs(&self) -> Vec<(usize, usize)> {
        self.ascending_pairs()
            .into_iter()
            .rev()
            .map(|(a, b)| (b, a))
            .collect()
    }
}
