//! Forward-process variance schedule: the fixed constants every diffusion
//! computation reads.
//!
//! Arrays are 1-indexed by timestep in the API (`beta(1)` is the first
//! increment) and `alpha_bar(0) = 1`. The cumulative product is accumulated
//! in f64 no matter what precision the model runs at: a product of a
//! thousand near-one terms loses digits fast in f32.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reference schedule the desk-scale endpoints are derived from.
pub const REFERENCE_T: usize = 1000;
pub const REFERENCE_BETA_START: f64 = 1e-4;
pub const REFERENCE_BETA_END: f64 = 0.02;

/// Threshold above which the terminal signal level counts as a weak tail.
pub const ALPHA_BAR_TAIL_WARN: f64 = 1e-2;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("invalid range: {0}")]
    InvalidRange(String),
}

/// T, beta_t, alpha_t = 1 - beta_t, and alpha_bar_t = prod alpha_s.
/// Immutable after construction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VarianceSchedule {
    t_max: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear interpolation of beta between the endpoints, inclusive.
/// T = 1 degenerates to a single step at `beta_start`.
pub fn linear_schedule(
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<VarianceSchedule, ScheduleError> {
    if t_max < 1 {
        return Err(ScheduleError::InvalidRange("T must be >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(ScheduleError::InvalidRange(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let beta: Vec<f64> = (0..t_max)
        .map(|i| {
            if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
            }
        })
        .collect();
    Ok(VarianceSchedule::from_betas(beta))
}

/// Rescale reference endpoints so the beta sum is roughly preserved when the
/// step count changes: both endpoints are multiplied by reference_T/target_T.
pub fn scale_schedule_for_t(
    reference_t: usize,
    target_t: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<(f64, f64), ScheduleError> {
    if reference_t < 1 || target_t < 1 {
        return Err(ScheduleError::InvalidRange("step counts must be >= 1".into()));
    }
    let ratio = reference_t as f64 / target_t as f64;
    let (s, e) = (beta_start * ratio, beta_end * ratio);
    if e >= 1.0 {
        return Err(ScheduleError::InvalidRange(format!(
            "scaled beta_end {e} leaves the open unit interval"
        )));
    }
    Ok((s, e))
}

impl VarianceSchedule {
    /// Build directly from explicit beta values, e.g. when restoring a
    /// checkpoint; the derived arrays are never trusted from disk.
    pub fn from_betas(beta: Vec<f64>) -> Self {
        assert!(!beta.is_empty(), "schedule needs at least one step");
        assert!(beta.iter().all(|&b| b > 0.0 && b < 1.0), "beta outside (0,1)");
        let alpha: Vec<f64> = beta.iter().map(|&b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0f64;
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        VarianceSchedule { t_max: beta.len(), beta, alpha, alpha_bar }
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// beta_t for t in 1..=T.
    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "t = {t} outside 1..={}", self.t_max);
        self.beta[t - 1]
    }

    /// alpha_t for t in 1..=T.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "t = {t} outside 1..={}", self.t_max);
        self.alpha[t - 1]
    }

    /// alpha_bar_t for t in 0..=T; alpha_bar_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_max, "t = {t} outside 0..={}", self.t_max);
        self.alpha_bar[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// Present when the terminal signal level is too high for the chain to
    /// start from anything resembling pure noise.
    pub fn usability_warning(&self) -> Option<String> {
        let tail = self.alpha_bar[self.t_max];
        (tail > ALPHA_BAR_TAIL_WARN).then(|| {
            format!(
                "alpha_bar_T = {tail:.3e} > {ALPHA_BAR_TAIL_WARN:.0e}; \
                 samples will retain visible signal at t = T"
            )
        })
    }
}
