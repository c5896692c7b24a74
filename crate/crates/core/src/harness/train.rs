//! Epoch-based training with per-epoch checkpoints and a JSONL log.
//!
//! Determinism contract: the root seed spawns one stream per concern
//! ("model" for initialization, "shuffle"/epoch for batch order, "train"/step
//! for the per-step noise), so a resumed run replays the exact streams the
//! uninterrupted run would have used. The only non-deterministic field in
//! any output is the measured wall time inside the log.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::config::ExperimentConfig;
use super::RunError;
use crate::diffusion::{data_to_latent, training_loss, TrainExample};
use crate::markup::corpus::{load_corpus, Corpus};
use crate::markup::encode::{encode, EncodedSeq};
use crate::nn::optim::AdamW;
use crate::nn::unet::UNetDenoiser;
use crate::rng::Prng;
use crate::sampling::mix_probability;
use crate::scalar::Grid;

/// One line of the training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    /// Mean squared eps error over the epoch's examples.
    pub loss: f64,
    /// Scheduled-sampling mix probability in force at the epoch's last step.
    pub ss_probability: f64,
    pub wall_seconds: f64,
}

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub last_checkpoint: PathBuf,
    pub records: Vec<TrainLogRecord>,
}

/// Corpus slice prepared for the optimizer: encoded programs and latents for
/// every corpus index, so examples can be addressed by dataset index.
struct Prepared {
    tokens: Vec<EncodedSeq>,
    latents: Vec<Grid<f32>>,
}

fn prepare(corpus: &Corpus, max_len: usize) -> Prepared {
    let tokens = corpus.programs.iter().map(|p| encode(p, max_len)).collect();
    let latents = corpus.images.iter().map(|img| data_to_latent::<f32>(img)).collect();
    Prepared { tokens, latents }
}

fn check_corpus_matches(corpus: &Corpus, cfg: &ExperimentConfig) -> Result<(), RunError> {
    if corpus.manifest.grammar != cfg.grammar {
        return Err(RunError::Mismatch(format!(
            "corpus grammar {:?} != config grammar {:?}",
            corpus.manifest.grammar, cfg.grammar
        )));
    }
    if corpus.manifest.canvas != cfg.canvas {
        return Err(RunError::Mismatch("corpus canvas differs from config canvas".into()));
    }
    Ok(())
}

pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("epoch_{epoch:04}.ckpt"))
}

pub fn log_path(run_dir: &Path) -> PathBuf {
    run_dir.join("train_log.jsonl")
}

pub fn read_log(run_dir: &Path) -> Result<Vec<TrainLogRecord>, RunError> {
    let path = log_path(run_dir);
    let raw = fs::read_to_string(&path)
        .map_err(|e| RunError::io(format!("reading {}", path.display()), e))?;
    raw.lines()
        .map(|line| {
            serde_json::from_str(line).map_err(|e| RunError::Config(format!("log line: {e}")))
        })
        .collect()
}

/// Train per config, starting fresh or resuming from a checkpoint. Writes
/// `checkpoints/epoch_NNNN.ckpt` after every epoch plus one JSONL log line,
/// and returns the path of the final checkpoint.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    resume: Option<&Path>,
    force: bool,
) -> Result<TrainOutcome, RunError> {
    cfg.validate()?;
    let corpus = load_corpus(&cfg.paths.corpus)?;
    check_corpus_matches(&corpus, cfg)?;
    let train_idx = corpus.manifest.split.train.clone();
    if train_idx.is_empty() {
        return Err(RunError::Config("train split is empty".into()));
    }

    let run_dir = cfg.paths.run.clone();
    if resume.is_none() && run_dir.exists() && !force {
        return Err(RunError::Config(format!(
            "{} already exists (use force to replace)",
            run_dir.display()
        )));
    }
    if resume.is_none() && run_dir.exists() {
        fs::remove_dir_all(&run_dir)
            .map_err(|e| RunError::io(format!("clearing {}", run_dir.display()), e))?;
    }
    fs::create_dir_all(run_dir.join("checkpoints"))
        .map_err(|e| RunError::io(format!("creating {}", run_dir.display()), e))?;

    let sched = cfg.schedule.build()?;
    let prep = prepare(&corpus, cfg.model.max_len);
    let root = Prng::from_root(cfg.seed);
    let steps_per_epoch = cfg.steps_per_epoch(train_idx.len());
    let total_steps = cfg.total_steps(train_idx.len());
    let optim_cfg = cfg.optim_config(train_idx.len());

    let (mut denoiser, mut opt, epoch_start) = match resume {
        None => {
            let denoiser =
                UNetDenoiser::<f32>::init(cfg.model_config(), &mut root.derive("model", 0));
            (denoiser, AdamW::new(optim_cfg), 0usize)
        }
        Some(path) => {
            let ck = checkpoint::load(path)?;
            if !ck.manifest.config.same_experiment(cfg) {
                return Err(RunError::Mismatch(format!(
                    "checkpoint {} was written by a different experiment config",
                    path.display()
                )));
            }
            if ck.manifest.root_seed != cfg.seed {
                return Err(RunError::Mismatch(format!(
                    "checkpoint seed {} != config seed {}",
                    ck.manifest.root_seed, cfg.seed
                )));
            }
            let epoch = ck.manifest.epoch;
            if ck.manifest.global_step != steps_per_epoch * epoch as u64 {
                return Err(RunError::Checkpoint(format!(
                    "step counter {} inconsistent with epoch {epoch}",
                    ck.manifest.global_step
                )));
            }
            let denoiser = UNetDenoiser::new(cfg.model_config(), ck.params);
            let opt = AdamW {
                cfg: optim_cfg,
                step: ck.manifest.global_step,
                m: ck.opt_m,
                v: ck.opt_v,
            };
            (denoiser, opt, epoch)
        }
    };

    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(log_path(&run_dir))
        .map_err(|e| RunError::io("opening train log", e))?;

    let mut records = Vec::new();
    let mut last_checkpoint = checkpoint_path(&run_dir, epoch_start);
    for epoch in epoch_start..cfg.optimizer.epochs {
        let t0 = Instant::now();
        let mut order = train_idx.clone();
        root.derive("shuffle", epoch as u64).shuffle(&mut order);

        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.optimizer.batch_size) {
            let step_index = opt.step;
            let step_rng = root.derive("train", step_index);
            let batch: Vec<TrainExample<'_, f32>> = chunk
                .iter()
                .map(|&idx| TrainExample {
                    dataset_index: idx,
                    tokens: &prep.tokens[idx],
                    y0: &prep.latents[idx],
                })
                .collect();
            let report = training_loss(
                &batch,
                &denoiser,
                &sched,
                &cfg.ss,
                &cfg.sampler,
                (step_index, total_steps),
                &step_rng,
            )?;
            opt.apply(&mut denoiser.params, &report.grads)?;
            loss_sum += report.loss * chunk.len() as f64;
            seen += chunk.len();
        }

        let record = TrainLogRecord {
            epoch: epoch + 1,
            loss: loss_sum / seen as f64,
            ss_probability: mix_probability(opt.step.saturating_sub(1), total_steps, &cfg.ss),
            wall_seconds: t0.elapsed().as_secs_f64(),
        };
        let path = checkpoint_path(&run_dir, epoch + 1);
        checkpoint::save(&path, cfg, epoch + 1, cfg.seed, &sched, &denoiser.params, &opt)?;
        last_checkpoint = path;
        let line = serde_json::to_string(&record)
            .map_err(|e| RunError::Config(format!("encoding log record: {e}")))?;
        writeln!(log, "{line}").map_err(|e| RunError::io("writing train log", e))?;
        records.push(record);
    }
    Ok(TrainOutcome { run_dir, last_checkpoint, records })
}
