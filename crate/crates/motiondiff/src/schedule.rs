//! Noise schedule: the per-step corruption levels `beta_n` and every constant
//! derived from them.
//!
//! The forward process multiplies the signal by `alpha_n = sqrt(1 - beta_n)`
//! each step, so the cumulative signal share after `n` steps is
//! `alpha_cum_n = prod alpha_i` and the accumulated noise scale is
//! `beta_cum_n = sqrt(1 - alpha_cum_n^2)`. The pair is variance preserving:
//! `alpha_cum_n^2 + beta_cum_n^2 = 1` for every step.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// How the reverse-step noise scale `sigma_n` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SigmaMode {
    /// `sigma_n^2 = beta_n * beta_cum_{n-1}^2 / beta_cum_n^2` (posterior-matched).
    #[default]
    PosteriorMatched,
    /// `sigma_n^2 = beta_n`.
    Beta,
}

/// Settings sufficient to rebuild a schedule; stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub n_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma_mode: SigmaMode,
}

impl ScheduleConfig {
    /// Builds the schedule this configuration describes.
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule_with(self.n_steps, self.beta_start, self.beta_end, self.sigma_mode)
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            n_steps: 100,
            beta_start: 1e-4,
            beta_end: 5e-2,
            sigma_mode: SigmaMode::default(),
        }
    }
}

/// The `beta_n` sequence and all derived constants for `N` diffusion steps.
///
/// Indexing is 1-based to match the step index `n`: accessors take
/// `n in 1..=N` and panic-free code should use them rather than the raw
/// vectors (which are 0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub n_steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_cum: Vec<f64>,
    pub beta_cum: Vec<f64>,
    pub sigma_mode: SigmaMode,
}

/// Builds the linear schedule: `beta_n` evenly spaced from `beta_start` to
/// `beta_end` inclusive (constant `beta_start` when `n_steps == 1`).
pub fn build_schedule(n_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    build_schedule_with(n_steps, beta_start, beta_end, SigmaMode::default())
}

pub fn build_schedule_with(
    n_steps: usize,
    beta_start: f64,
    beta_end: f64,
    sigma_mode: SigmaMode,
) -> Result<NoiseSchedule> {
    if n_steps < 1 {
        return Err(Error::config("n_steps must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 && beta_end < 1.0) {
        return Err(Error::config(format!(
            "beta bounds ({beta_start}, {beta_end}) must lie in (0, 1)"
        )));
    }
    if beta_start > beta_end {
        return Err(Error::config("beta_start must not exceed beta_end"));
    }
    let mut beta = Vec::with_capacity(n_steps);
    for i in 0..n_steps {
        let frac = if n_steps == 1 {
            0.0
        } else {
            i as f64 / (n_steps - 1) as f64
        };
        beta.push(beta_start + frac * (beta_end - beta_start));
    }
    let alpha: Vec<f64> = beta.iter().map(|b| (1.0 - b).sqrt()).collect();
    let mut alpha_cum = Vec::with_capacity(n_steps);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
        alpha_cum.push(prod);
    }
    let beta_cum: Vec<f64> = alpha_cum.iter().map(|a| (1.0 - a * a).sqrt()).collect();
    Ok(NoiseSchedule {
        n_steps,
        beta,
        alpha,
        alpha_cum,
        beta_cum,
        sigma_mode,
    })
}

impl NoiseSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        build_schedule_with(cfg.n_steps, cfg.beta_start, cfg.beta_end, cfg.sigma_mode)
    }

    pub fn config(&self) -> ScheduleConfig {
        ScheduleConfig {
            n_steps: self.n_steps,
            beta_start: self.beta[0],
            beta_end: *self.beta.last().unwrap(),
            sigma_mode: self.sigma_mode,
        }
    }

    fn check_step(&self, n: usize) -> Result<()> {
        if n < 1 || n > self.n_steps {
            return Err(Error::contract(format!(
                "step index {n} outside 1..={}",
                self.n_steps
            )));
        }
        Ok(())
    }

    pub fn beta_at(&self, n: usize) -> Result<f64> {
        self.check_step(n)?;
        Ok(self.beta[n - 1])
    }

    pub fn alpha_at(&self, n: usize) -> Result<f64> {
        self.check_step(n)?;
        Ok(self.alpha[n - 1])
    }

    pub fn alpha_cum_at(&self, n: usize) -> Result<f64> {
        self.check_step(n)?;
        Ok(self.alpha_cum[n - 1])
    }

    pub fn beta_cum_at(&self, n: usize) -> Result<f64> {
        self.check_step(n)?;
        Ok(self.beta_cum[n - 1])
    }

    /// Reverse-step noise scale. Zero at `n == 1`: the final step is
    /// deterministic.
    pub fn sigma_at(&self, n: usize) -> Result<f64> {
        self.check_step(n)?;
        if n == 1 {
            return Ok(0.0);
        }
        let var = match self.sigma_mode {
            SigmaMode::PosteriorMatched => {
                let bc_prev = self.beta_cum[n - 2];
                let bc = self.beta_cum[n - 1];
                self.beta[n - 1] * bc_prev * bc_prev / (bc * bc)
            }
            SigmaMode::Beta => self.beta[n - 1],
        };
        Ok(var.sqrt())
    }

    pub fn with_sigma_mode(mut self, mode: SigmaMode) -> Self {
        self.sigma_mode = mode;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Direct evaluation of the cumulative product for the default 100-step
    // schedule, computed independently and frozen.
    const ALPHA_CUM_100: f64 = 0.279703978559241;

    #[test]
    fn default_schedule_endpoints() {
        let s = build_schedule(100, 1e-4, 5e-2).unwrap();
        assert_eq!(s.beta_at(1).unwrap(), 1e-4);
        assert_eq!(s.beta_at(100).unwrap(), 5e-2);
    }

    #[test]
    fn single_step_closed_form() {
        let s = build_schedule(1, 0.5, 0.5).unwrap();
        assert!((s.alpha_cum_at(1).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((s.beta_cum_at(1).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn pinned_cumulative_product() {
        let s = build_schedule(100, 1e-4, 5e-2).unwrap();
        assert!((s.alpha_cum_at(100).unwrap() - ALPHA_CUM_100).abs() < 1e-6);
    }

    #[test]
    fn variance_preserving_identity() {
        let s = build_schedule(100, 1e-4, 5e-2).unwrap();
        for n in 1..=100 {
            let a = s.alpha_cum_at(n).unwrap();
            let b = s.beta_cum_at(n).unwrap();
            assert!((a * a + b * b - 1.0).abs() < 1e-12, "n={n}");
        }
    }

    #[test]
    fn monotone_cumulative_sequences() {
        let s = build_schedule(100, 1e-4, 5e-2).unwrap();
        for n in 2..=100 {
            assert!(s.alpha_cum_at(n).unwrap() < s.alpha_cum_at(n - 1).unwrap());
            assert!(s.beta_cum_at(n).unwrap() > s.beta_cum_at(n - 1).unwrap());
        }
    }

    #[test]
    fn rejects_bad_configuration() {
        assert!(build_schedule(0, 1e-4, 5e-2).is_err());
        assert!(build_schedule(10, 0.0, 0.5).is_err());
        assert!(build_schedule(10, 0.5, 1.0).is_err());
        assert!(build_schedule(10, 0.5, 0.1).is_err());
    }

    #[test]
    fn sigma_modes() {
        let s = build_schedule(100, 1e-4, 5e-2).unwrap();
        assert_eq!(s.sigma_at(1).unwrap(), 0.0);
        let post = s.sigma_at(50).unwrap();
        let beta = s
            .clone()
            .with_sigma_mode(SigmaMode::Beta)
            .sigma_at(50)
            .unwrap();
        assert!(post < beta, "posterior-matched sigma is the tighter choice");
        assert!((beta * beta - s.beta_at(50).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn config_roundtrip() {
        let cfg = ScheduleConfig::default();
        let s = NoiseSchedule::from_config(&cfg).unwrap();
        assert_eq!(s.config(), cfg);
    }
}
