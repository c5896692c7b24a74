use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use markuplab::harness::{
    cmd_eval, cmd_generate, cmd_perturb, cmd_sample, cmd_train, ExperimentConfig, SampleSource,
};

/// Desk-scale markup-to-image diffusion experiments.
#[derive(Parser)]
#[command(name = "markuplab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every seeded subcommand. Flags override the config file.
#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override the config's root seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_file(&self.config)
            .with_context(|| format!("loading config {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a fresh corpus of markup programs and ground-truth rasters.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Corpus directory (default: the config's corpus path).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Replace the corpus directory if it already exists.
        #[arg(long)]
        force: bool,
    },
    /// Train a denoiser on the corpus, checkpointing every epoch.
    Train {
        #[command(flatten)]
        common: Common,
        /// Run directory (default: the config's run path).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Replace the run directory if it already exists.
        #[arg(long)]
        force: bool,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Sample images from a trained checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to sample from.
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// Corpus split to read programs from: train, val, or test.
        #[arg(long, value_name = "NAME", conflicts_with = "source")]
        split: Option<String>,
        /// Text file with one markup program per line.
        #[arg(long, value_name = "PATH")]
        source: Option<PathBuf>,
        /// Output directory (default: <run>/samples).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Reverse-process frames to dump, as elapsed steps (0 = initial noise).
        #[arg(long, value_name = "S1,S2,...", value_delimiter = ',')]
        snapshots: Vec<usize>,
        /// Replace the output directory if it already exists.
        #[arg(long)]
        force: bool,
    },
    /// Score generated images against ground truth, writing metrics.csv/json.
    Eval {
        /// Experiment config (JSON).
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        /// Directory of generated images (PGM).
        #[arg(long, value_name = "DIR")]
        generated: PathBuf,
        /// Directory of ground-truth images, index-aligned with --generated.
        #[arg(long, value_name = "DIR")]
        truth: PathBuf,
        /// Where to write the reports (default: the generated directory).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Remove k symbols from each test program and score the damage, k=0..=k_max.
    Perturb {
        #[command(flatten)]
        common: Common,
        /// Largest number of leaf symbols to remove.
        #[arg(long, value_name = "K")]
        k_max: usize,
        /// A model's mean test DTW, to place on the degradation curve.
        #[arg(long, value_name = "DTW")]
        model_dtw: Option<f64>,
        /// Output directory (default: <run>/perturb).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Generate { common, out, force } => {
            let mut cfg = common.load()?;
            if let Some(dir) = out {
                cfg.paths.corpus = dir;
            }
            let dir = cmd_generate(&cfg, force)?;
            println!("corpus: {} programs in {}", cfg.corpus.n, dir.display());
        }
        Command::Train {
            common,
            out,
            force,
            resume,
        } => {
            let mut cfg = common.load()?;
            if let Some(dir) = out {
                cfg.paths.run = dir;
            }
            let outcome = cmd_train(&cfg, resume.as_deref(), force)?;
            let last = outcome
                .records
                .last()
                .expect("training always logs at least one epoch");
            println!(
                "trained through epoch {} (loss {:.6}); last checkpoint {}",
                last.epoch,
                last.loss,
                outcome.last_checkpoint.display()
            );
        }
        Command::Sample {
            common,
            checkpoint,
            split,
            source,
            out,
            snapshots,
            force,
        } => {
            let cfg = common.load()?;
            let source = match (split, source) {
                (Some(name), None) => SampleSource::Split(name),
                (None, Some(path)) => SampleSource::File(path),
                _ => bail!("pass exactly one of --split or --source"),
            };
            let out = out.unwrap_or_else(|| cfg.paths.run.join("samples"));
            let outcome = cmd_sample(&cfg, &checkpoint, &source, &out, &snapshots, force)?;
            println!(
                "sampled {} images into {}",
                outcome.count,
                outcome.out_dir.display()
            );
        }
        Command::Eval {
            config,
            generated,
            truth,
            out,
        } => {
            let cfg = ExperimentConfig::from_file(&config)
                .with_context(|| format!("loading config {}", config.display()))?;
            let out = out.unwrap_or_else(|| generated.clone());
            let outcome = cmd_eval(&generated, &truth, &cfg, &out)?;
            println!(
                "mean over {} examples: {}",
                outcome.per_example.len(),
                serde_json::to_string(&outcome.mean)?
            );
        }
        Command::Perturb {
            common,
            k_max,
            model_dtw,
            out,
        } => {
            let cfg = common.load()?;
            let out = out.unwrap_or_else(|| cfg.paths.run.join("perturb"));
            let outcome = cmd_perturb(&cfg, k_max, &out, model_dtw)?;
            for row in &outcome.rows {
                println!(
                    "k={}: dtw={:.4} rmse={:.4} ({} scored, {} skipped)",
                    row.k, row.dtw, row.rmse, row.scored, row.skipped
                );
            }
            match (outcome.model_dtw, outcome.equivalent_k) {
                (Some(dtw), Some(k)) => {
                    println!("model dtw {dtw:.4} is roughly {k} symbols removed")
                }
                (Some(dtw), None) => {
                    println!("model dtw {dtw:.4} lies beyond the k={k_max} curve")
                }
                _ => {}
            }
        }
    }
    Ok(())
}
