//! Forward/reverse diffusion over latent canvases.
//!
//! The forward chain Q gradually gaussifies a clean latent; the learned
//! reverse chain P walks back using the denoiser's noise prediction. The
//! closed forms used here:
//!
//!   Q(y_t | y0)        = N(sqrt(abar_t) y0, (1 - abar_t) I)
//!   target eps         = (y_t - sqrt(abar_t) y0) / sqrt(1 - abar_t)
//!   mu_theta           = (1/sqrt(a_t)) (y_t - (b_t / sqrt(1 - abar_t)) eps_hat)
//!   Q(y_{t-1}|y_t,y0)  = N(c0 y0 + ct y_t, btilde_t I)
//!       c0 = sqrt(abar_{t-1}) b_t / (1 - abar_t)
//!       ct = sqrt(a_t) (1 - abar_{t-1}) / (1 - abar_t)
//!       btilde_t = (1 - abar_{t-1}) / (1 - abar_t) * b_t
//!
//! Latents live in R^{HxW}, scaled so data occupies [-1, 1]. Training is
//! f32; the same code instantiates at f64 for identity tests.

use serde::{Deserialize, Serialize};

use crate::image::ImageBuffer;
use crate::markup::encode::EncodedSeq;
use crate::nn::{accumulate_grads, EpsDenoiser, GradStore, NnError};
use crate::rng::Prng;
use crate::scalar::{Grid, Scalar};
use crate::schedule::VarianceSchedule;
use crate::sampling::{choose_branch, rollout_sample, Branch, ScheduledSamplingConfig};

/// Reverse-process noise scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// sigma_t^2 = beta_t.
    Beta,
    /// sigma_t^2 = btilde_t, the forward posterior variance.
    Posterior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub sigma_mode: SigmaMode,
    /// Clamp the final decoded image into [0,1] (intermediate latents are
    /// never clipped).
    pub clamp_final: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { sigma_mode: SigmaMode::Beta, clamp_final: true, seed: 0 }
    }
}

/// Affine [0,1] -> [-1,1].
pub fn data_to_latent<S: Scalar>(img: &ImageBuffer) -> Grid<S> {
    let data = img.as_slice().iter().map(|&v| S::fp(2.0 * v as f64 - 1.0)).collect();
    Grid::from_vec(img.h(), img.w(), data)
}

/// Inverse of [`data_to_latent`], clamping into [0,1].
pub fn latent_to_data<S: Scalar>(arr: &Grid<S>) -> ImageBuffer {
    let data = arr
        .as_slice()
        .iter()
        .map(|&v| (((v.to64() + 1.0) / 2.0).clamp(0.0, 1.0)) as f32)
        .collect();
    ImageBuffer::from_vec(arr.h(), arr.w(), data)
}

/// y_t = sqrt(abar_t) y0 + sqrt(1 - abar_t) noise.
pub fn forward_sample<S: Scalar>(
    y0: &Grid<S>,
    t: usize,
    noise: &Grid<S>,
    sched: &VarianceSchedule,
) -> Grid<S> {
    let ab = sched.alpha_bar(t);
    let (sa, sn) = (S::fp(ab.sqrt()), S::fp((1.0 - ab).sqrt()));
    y0.zip(noise, |y, z| sa * y + sn * z)
}

/// The regression target: the noise that explains y_t given y0.
pub fn true_eps<S: Scalar>(
    y0: &Grid<S>,
    y_t: &Grid<S>,
    t: usize,
    sched: &VarianceSchedule,
) -> Grid<S> {
    let ab = sched.alpha_bar(t);
    let (sa, inv) = (S::fp(ab.sqrt()), S::fp(1.0 / (1.0 - ab).sqrt()));
    y_t.zip(y0, |yt, y0| (yt - sa * y0) * inv)
}

/// Reverse-process mean given a noise prediction.
pub fn mu_theta<S: Scalar>(
    y_t: &Grid<S>,
    eps_hat: &Grid<S>,
    t: usize,
    sched: &VarianceSchedule,
) -> Grid<S> {
    let inv_sqrt_a = S::fp(1.0 / sched.alpha(t).sqrt());
    let coef = S::fp(sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt());
    y_t.zip(eps_hat, |yt, e| inv_sqrt_a * (yt - coef * e))
}

/// Forward-posterior Q(y_{t-1} | y_t, y0): (mean, scalar variance).
pub fn posterior_q<S: Scalar>(
    y_t: &Grid<S>,
    y0: &Grid<S>,
    t: usize,
    sched: &VarianceSchedule,
) -> (Grid<S>, f64) {
    assert!(t >= 1, "posterior undefined at t=0");
    let (ab_prev, ab) = (sched.alpha_bar(t - 1), sched.alpha_bar(t));
    let beta = sched.beta(t);
    let c0 = S::fp(ab_prev.sqrt() * beta / (1.0 - ab));
    let ct = S::fp(sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab));
    let var = (1.0 - ab_prev) / (1.0 - ab) * beta;
    (y0.zip(y_t, |y0, yt| c0 * y0 + ct * yt), var)
}

/// sigma_t^2 for the reverse step; 0 at t=1 by the last-step rule.
pub fn sigma2(t: usize, sched: &VarianceSchedule, mode: SigmaMode) -> f64 {
    if t <= 1 {
        return 0.0;
    }
    match mode {
        SigmaMode::Beta => sched.beta(t),
        SigmaMode::Posterior => {
            (1.0 - sched.alpha_bar(t - 1)) / (1.0 - sched.alpha_bar(t)) * sched.beta(t)
        }
    }
}

/// One ancestral step: y_{t-1} = mu_theta + sigma_t * noise.
pub fn reverse_step<S: Scalar>(
    y_t: &Grid<S>,
    t: usize,
    eps_hat: &Grid<S>,
    cfg: &SamplerConfig,
    noise: &Grid<S>,
    sched: &VarianceSchedule,
) -> Grid<S> {
    let mu = mu_theta(y_t, eps_hat, t, sched);
    let sigma = S::fp(sigma2(t, sched, cfg.sigma_mode).sqrt());
    mu.zip(noise, |m, z| m + sigma * z)
}

/// Full ancestral rollout from pure noise, conditioned on `tokens`.
/// Deterministic in (cfg.seed, parameters, tokens). `snapshot_ts` lists the
/// timesteps t whose latent y_t should be decoded and returned alongside;
/// t = T is the initial noise, t = 0 the final output.
pub fn sample<S: Scalar>(
    tokens: &EncodedSeq,
    denoiser: &dyn EpsDenoiser<S>,
    sched: &VarianceSchedule,
    cfg: &SamplerConfig,
    height: usize,
    width: usize,
    snapshot_ts: &[usize],
) -> Result<(ImageBuffer, Vec<(usize, ImageBuffer)>), NnError> {
    let t_max = sched.t_max();
    let rng = Prng::from_root(cfg.seed);
    let mut y = Grid::<S>::standard_normal(height, width, &mut rng.derive("init", 0));
    let mut snaps = Vec::new();
    let record = |t: usize, y: &Grid<S>, snaps: &mut Vec<(usize, ImageBuffer)>| {
        if snapshot_ts.contains(&t) {
            snaps.push((t, latent_to_data(y)));
        }
    };
    record(t_max, &y, &mut snaps);
    for t in (1..=t_max).rev() {
        let eps_hat = denoiser.eps(&y, t, tokens)?;
        let noise = if t > 1 {
            Grid::standard_normal(height, width, &mut rng.derive("step", t as u64))
        } else {
            Grid::zeros(height, width)
        };
        y = reverse_step(&y, t, &eps_hat, cfg, &noise, sched);
        record(t - 1, &y, &mut snaps);
    }
    let mut img = latent_to_data(&y);
    if !cfg.clamp_final {
        // latent_to_data always clamps; an unclamped decode keeps the raw
        // affine map. Kept for diagnostics.
        let data = y.as_slice().iter().map(|&v| ((v.to64() + 1.0) / 2.0) as f32).collect();
        img = ImageBuffer::from_vec(y.h(), y.w(), data);
    }
    Ok((img, snaps))
}

/// One training example: position in the dataset (the rng key), its
/// conditioning tokens, and the clean latent.
pub struct TrainExample<'a, S> {
    pub dataset_index: usize,
    pub tokens: &'a EncodedSeq,
    pub y0: &'a Grid<S>,
}

/// Loss and gradients for one batch, plus accounting.
pub struct LossReport<S> {
    /// Mean squared eps error over all pixels of all examples.
    pub loss: f64,
    pub grads: GradStore<S>,
    /// How many examples took the scheduled (rollout) branch.
    pub scheduled: usize,
}

/// Eq.-style MSE training objective with the optional scheduled-sampling
/// mix. Per example: t ~ Uniform{1..T}; the noisy input comes either from Q
/// directly or from a stop-gradient model rollout; the target is recomputed
/// from the realized y_t either way; gradients flow only through eps_hat.
///
/// Reduction runs in ascending dataset_index order and each example derives
/// its own rng streams from `step_rng` by dataset index, so batch order
/// never changes any bit of the result.
pub fn training_loss<S: Scalar>(
    batch: &[TrainExample<'_, S>],
    denoiser: &dyn EpsDenoiser<S>,
    sched: &VarianceSchedule,
    ss: &ScheduledSamplingConfig,
    sampler: &SamplerConfig,
    progress: (u64, u64),
    step_rng: &Prng,
) -> Result<LossReport<S>, NnError> {
    assert!(!batch.is_empty(), "training batch must be non-empty");
    let t_max = sched.t_max();
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by_key(|&i| batch[i].dataset_index);
    let denom = {
        let g = batch[0].y0;
        (batch.len() * g.len()) as f64
    };
    let mut loss = 0.0f64;
    let mut grads = GradStore::new();
    let mut scheduled = 0usize;
    for &i in &order {
        let ex = &batch[i];
        let ex_rng = step_rng.derive("ex", ex.dataset_index as u64);
        let t = 1 + ex_rng.derive("t", 0).below(t_max as u64) as usize;
        let branch = choose_branch(progress.0, progress.1, ss, &mut ex_rng.derive("branch", 0));
        let mut noise_rng = ex_rng.derive("noise", 0);
        let y_t = match branch {
            Branch::Standard => {
                let z = Grid::standard_normal(ex.y0.h(), ex.y0.w(), &mut noise_rng);
                forward_sample(ex.y0, t, &z, sched)
            }
            Branch::Scheduled => {
                scheduled += 1;
                rollout_sample(ex.y0, t, ss, denoiser, sched, sampler, ex.tokens, &mut noise_rng)?
            }
        };
        let target = true_eps(ex.y0, &y_t, t, sched);
        let (eps_hat, back) = denoiser.eps_with_grad(&y_t, t, ex.tokens)?;
        let resid = eps_hat.zip(&target, |a, b| a - b);
        let ex_loss: f64 = resid.as_slice().iter().map(|&r| r.to64() * r.to64()).sum();
        if !ex_loss.is_finite() {
            return Err(NnError::NumericalDivergence(format!(
                "loss for example {}",
                ex.dataset_index
            )));
        }
        loss += ex_loss / denom;
        let seed = resid.map(|r| r * S::fp(2.0 / denom));
        accumulate_grads(&mut grads, &back(&seed));
    }
    Ok(LossReport { loss, grads, scheduled })
}

/// Closed-form KL between two isotropic Gaussians, per pixel.
pub fn gaussian_kl(mu_q: f64, var_q: f64, mu_p: f64, var_p: f64) -> f64 {
    0.5 * (var_q / var_p - 1.0 - (var_q / var_p).ln() + (mu_q - mu_p) * (mu_q - mu_p) / var_p)
}

/// Per-timestep ELBO decomposition, Monte-Carlo averaged.
pub struct ElboReport {
    /// (t, mean KL(Q(y_{t-1}|y_t,y0) || P(y_{t-1}|y_t))) for t = 2..=T,
    /// summed over pixels and averaged over draws.
    pub kl_per_t: Vec<(usize, f64)>,
    /// Negative log-likelihood of y0 under P(y0|y1) with variance beta_1,
    /// summed over pixels and averaged over draws.
    pub recon: f64,
}

impl ElboReport {
    /// Total diagnostic bound: sum of KL terms plus reconstruction.
    pub fn total(&self) -> f64 {
        self.kl_per_t.iter().map(|&(_, kl)| kl).sum::<f64>() + self.recon
    }
}

/// Estimate each KL term of the bound by sampling y_t ~ Q(y_t|y0) and
/// comparing the forward posterior against the model's reverse kernel.
/// Diagnostic only; nothing here is trained on.
pub fn elbo_diagnostic<S: Scalar>(
    y0: &Grid<S>,
    tokens: &EncodedSeq,
    denoiser: &dyn EpsDenoiser<S>,
    sched: &VarianceSchedule,
    sampler: &SamplerConfig,
    samples_per_t: usize,
    rng: &Prng,
) -> Result<ElboReport, NnError> {
    assert!(samples_per_t >= 1);
    let t_max = sched.t_max();
    let mut kl_per_t = Vec::new();
    for t in 2..=t_max {
        let mut acc = 0.0f64;
        let t_rng = rng.derive("kl", t as u64);
        for s in 0..samples_per_t {
            let mut draw = t_rng.derive("draw", s as u64);
            let z = Grid::standard_normal(y0.h(), y0.w(), &mut draw);
            let y_t = forward_sample(y0, t, &z, sched);
            let (q_mean, q_var) = posterior_q(&y_t, y0, t, sched);
            let eps_hat = denoiser.eps(&y_t, t, tokens)?;
            let p_mean = mu_theta(&y_t, &eps_hat, t, sched);
            let p_var = sigma2(t, sched, sampler.sigma_mode);
            let kl: f64 = q_mean
                .as_slice()
                .iter()
                .zip(p_mean.as_slice())
                .map(|(&mq, &mp)| gaussian_kl(mq.to64(), q_var, mp.to64(), p_var))
                .sum();
            acc += kl;
        }
        kl_per_t.push((t, acc / samples_per_t as f64));
    }
    // Reconstruction: -log P(y0|y1) with fixed variance beta_1 (the
    // sampler adds no noise at t=1, so the likelihood needs its own scale).
    let var1 = sched.beta(1);
    let mut recon = 0.0f64;
    let r_rng = rng.derive("recon", 0);
    for s in 0..samples_per_t {
        let mut draw = r_rng.derive("draw", s as u64);
        let z = Grid::standard_normal(y0.h(), y0.w(), &mut draw);
        let y1 = forward_sample(y0, 1, &z, sched);
        let eps_hat = denoiser.eps(&y1, 1, tokens)?;
        let mu = mu_theta(&y1, &eps_hat, 1, sched);
        let nll: f64 = y0
            .as_slice()
            .iter()
            .zip(mu.as_slice())
            .map(|(&y, &m)| {
                let d = y.to64() - m.to64();
                0.5 * ((2.0 * std::f64::consts::PI * var1).ln() + d * d / var1)
            })
            .sum();
        recon += nll;
    }
    Ok(ElboReport { kl_per_t, recon: recon / samples_per_t as f64 })
}

/// Reference denoiser that knows the clean latent and answers with the
/// exact noise. Useful for calibrating the sampler and the ELBO: with the
/// posterior sigma it reproduces Q, driving every KL term to zero.
pub struct OracleDenoiser<S> {
    pub y0: Grid<S>,
    pub sched: VarianceSchedule,
}

impl<S: Scalar> EpsDenoiser<S> for OracleDenoiser<S> {
    fn eps(&self, y_t: &Grid<S>, t: usize, _cond: &EncodedSeq) -> Result<Grid<S>, NnError> {
        Ok(true_eps(&self.y0, y_t, t, &self.sched))
    }

    fn eps_with_grad(
        &self,
        y_t: &Grid<S>,
        t: usize,
        cond: &EncodedSeq,
    ) -> Result<(Grid<S>, crate::nn::BackwardFn<'_, S>), NnError> {
        // No parameters, so the backward pass is empty.
        Ok((self.eps(y_t, t, cond)?, Box::new(|_seed| GradStore::new())))
    }
}
