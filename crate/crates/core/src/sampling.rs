//! Scheduled sampling for the diffusion chain.
//!
//! Instead of always drawing the training input y_t from the forward
//! process, an example can jump ahead to y_{t+m} via Q and walk back m
//! reverse steps with the current model, so the network trains on inputs
//! from (an approximation of) its own sampling distribution. The rollout
//! runs outside gradient tracking, the application probability ramps
//! linearly over training, and with m = 0 or the feature off, training is
//! bit-identical to the plain objective because every random draw comes
//! from an independent, purpose-derived stream.

use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_sample, reverse_step, SamplerConfig};
use crate::markup::encode::EncodedSeq;
use crate::nn::{EpsDenoiser, NnError};
use crate::rng::Prng;
use crate::scalar::{Grid, Scalar};
use crate::schedule::VarianceSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduledSamplingConfig {
    pub enabled: bool,
    /// Rollout depth; 0 recovers plain training exactly.
    pub m: usize,
    pub p_start: f64,
    pub p_end: f64,
}

impl Default for ScheduledSamplingConfig {
    fn default() -> Self {
        ScheduledSamplingConfig { enabled: true, m: 1, p_start: 0.0, p_end: 0.5 }
    }
}

impl ScheduledSamplingConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.p_start)
            || !(0.0..=1.0).contains(&self.p_end)
            || self.p_start > self.p_end
        {
            return Err(format!(
                "scheduled-sampling ramp needs 0 <= p_start <= p_end <= 1, got {} and {}",
                self.p_start, self.p_end
            ));
        }
        Ok(())
    }
}

/// Which distribution the training input y_t comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    /// Straight from the forward process Q.
    Standard,
    /// From a model rollout.
    Scheduled,
}

/// Linear ramp of the application probability over training steps.
pub fn mix_probability(step: u64, total_steps: u64, cfg: &ScheduledSamplingConfig) -> f64 {
    if !cfg.enabled {
        return 0.0;
    }
    assert!(total_steps >= 1, "total_steps must be positive");
    let frac = (step.min(total_steps)) as f64 / total_steps as f64;
    cfg.p_start + (cfg.p_end - cfg.p_start) * frac
}

/// Per-example Bernoulli draw at the current ramp position. Disabled
/// configs never touch the rng; an enabled config always consumes exactly
/// one draw so the decision has a stable stream footprint.
pub fn choose_branch(
    step: u64,
    total_steps: u64,
    cfg: &ScheduledSamplingConfig,
    rng: &mut Prng,
) -> Branch {
    if !cfg.enabled {
        return Branch::Standard;
    }
    let p = mix_probability(step, total_steps, cfg);
    if rng.flip(p) {
        Branch::Scheduled
    } else {
        Branch::Standard
    }
}

/// Draw y_t by jumping forward to y_{t+m'} and rolling back m' model steps,
/// m' = min(m, T - t). No gradients are recorded; the caller treats the
/// result as a constant input. With m' = 0 this consumes exactly the same
/// rng draws as `forward_sample` and returns the identical latent.
#[allow(clippy::too_many_arguments)]
pub fn rollout_sample<S: Scalar>(
    y0: &Grid<S>,
    t: usize,
    cfg: &ScheduledSamplingConfig,
    denoiser: &dyn EpsDenoiser<S>,
    sched: &VarianceSchedule,
    sampler: &SamplerConfig,
    tokens: &EncodedSeq,
    rng: &mut Prng,
) -> Result<Grid<S>, NnError> {
    let t_max = sched.t_max();
    assert!(t >= 1 && t <= t_max, "rollout start {t} outside 1..={t_max}");
    let m_eff = cfg.m.min(t_max - t);
    let z = Grid::standard_normal(y0.h(), y0.w(), rng);
    let mut y = forward_sample(y0, t + m_eff, &z, sched);
    for s in ((t + 1)..=(t + m_eff)).rev() {
        let eps_hat = denoiser.eps(&y, s, tokens)?;
        let noise = Grid::standard_normal(y0.h(), y0.w(), rng);
        y = reverse_step(&y, s, &eps_hat, sampler, &noise, sched);
    }
    Ok(y)
}
