//! Corpus generation, sampling, metric evaluation, and perturbation sweeps.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::checkpoint;
use super::config::ExperimentConfig;
use super::RunError;
use crate::diffusion::{sample, SamplerConfig};
use crate::image::ImageBuffer;
use crate::markup::corpus::{
    generate_corpus, load_corpus, write_corpus, CorpusManifest,
};
use crate::markup::encode::{encode, EncodedSeq};
use crate::markup::parse::parse_source;
use crate::markup::perturb::perturb;
use crate::markup::render::render;
use crate::markup::MarkupError;
use crate::metrics::{dtw_distance, rmse, MetricReport};
use crate::nn::unet::UNetDenoiser;
use crate::rng::Prng;

/// Generate the corpus named by the config and write it to
/// `paths.corpus`. Fully determined by (config, seed).
pub fn cmd_generate(cfg: &ExperimentConfig, force: bool) -> Result<PathBuf, RunError> {
    cfg.validate()?;
    let root = Prng::from_root(cfg.seed);
    let pairs = generate_corpus(
        cfg.grammar,
        cfg.corpus.n,
        (cfg.corpus.length_min, cfg.corpus.length_max),
        &root.derive("corpus", 0),
        &cfg.canvas,
    )?;
    let split = cfg.corpus.split.resolve(cfg.corpus.n, &mut root.derive("split", 0))?;
    let manifest = CorpusManifest {
        grammar: cfg.grammar,
        canvas: cfg.canvas,
        seed: cfg.seed,
        count: cfg.corpus.n,
        length_min: cfg.corpus.length_min,
        length_max: cfg.corpus.length_max,
        split,
    };
    write_corpus(&cfg.paths.corpus, &manifest, &pairs, force)?;
    Ok(cfg.paths.corpus.clone())
}

/// What to run the sampler on.
pub enum SampleSource {
    /// A corpus split, by name: "train", "val", or "test".
    Split(String),
    /// A text file with one markup program per line.
    File(PathBuf),
}

pub struct SampleOutcome {
    pub out_dir: PathBuf,
    pub count: usize,
}

/// Inputs plus, when they come from the corpus, their reference rasters.
fn resolve_inputs(
    cfg: &ExperimentConfig,
    source: &SampleSource,
) -> Result<(Vec<EncodedSeq>, Option<Vec<ImageBuffer>>), RunError> {
    match source {
        SampleSource::Split(name) => {
            let corpus = load_corpus(&cfg.paths.corpus)?;
            let idx = match name.as_str() {
                "train" => corpus.manifest.split.train.clone(),
                "val" => corpus.manifest.split.val.clone(),
                "test" => corpus.manifest.split.test.clone(),
                other => {
                    return Err(RunError::Config(format!(
                        "unknown split {other:?} (want train, val, or test)"
                    )))
                }
            };
            let tokens = idx
                .iter()
                .map(|&i| encode(&corpus.programs[i], cfg.model.max_len))
                .collect();
            let refs = idx.iter().map(|&i| corpus.images[i].clone()).collect();
            Ok((tokens, Some(refs)))
        }
        SampleSource::File(path) => {
            let raw = fs::read_to_string(path)
                .map_err(|e| RunError::io(format!("reading {}", path.display()), e))?;
            let mut tokens = Vec::new();
            for (i, line) in raw.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let program = parse_source(line, cfg.grammar).map_err(|e| {
                    RunError::Markup(MarkupError::InvalidRequest(format!("line {i}: {e}")))
                })?;
                tokens.push(encode(&program, cfg.model.max_len));
            }
            Ok((tokens, None))
        }
    }
}

/// Sample one image per input program from a trained checkpoint.
///
/// Writes `images/NNNNNN.pgm` index-aligned with the inputs; when the inputs
/// come from a corpus split, also writes the matching ground truth to
/// `refs/NNNNNN.pgm`. `snapshot_steps` are elapsed reverse steps (0 = the
/// initial noise); each requested step lands in
/// `trajectory/NNNNNN/step_{s}.pgm`.
pub fn cmd_sample(
    cfg: &ExperimentConfig,
    checkpoint_path: &Path,
    source: &SampleSource,
    out_dir: &Path,
    snapshot_steps: &[usize],
    force: bool,
) -> Result<SampleOutcome, RunError> {
    cfg.validate()?;
    let ck = checkpoint::load(checkpoint_path)?;
    if !ck.manifest.config.same_architecture(cfg) {
        return Err(RunError::Mismatch(format!(
            "checkpoint {} does not match the configured architecture",
            checkpoint_path.display()
        )));
    }
    let sched = ck.schedule();
    let t_max = sched.t_max();
    for &s in snapshot_steps {
        if s > t_max {
            return Err(RunError::Config(format!(
                "snapshot step {s} exceeds the chain length {t_max}"
            )));
        }
    }
    // The sampler records chain states indexed by t; the user asks in
    // elapsed steps s = T - t.
    let snapshot_ts: Vec<usize> = snapshot_steps.iter().map(|&s| t_max - s).collect();
    let denoiser = UNetDenoiser::new(cfg.model_config(), ck.params);

    let (inputs, refs) = resolve_inputs(cfg, source)?;
    prepare_out_dir(out_dir, force)?;
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir)
        .map_err(|e| RunError::io(format!("creating {}", images_dir.display()), e))?;

    let root = Prng::from_root(cfg.seed);
    for (j, tokens) in inputs.iter().enumerate() {
        let seed_j = root.derive("sample", j as u64).next_u64();
        let scfg = SamplerConfig { seed: seed_j, ..cfg.sampler };
        let (img, snaps) =
            sample(tokens, &denoiser, &sched, &scfg, cfg.canvas.height, cfg.canvas.width, &snapshot_ts)?;
        img.write_pgm(&images_dir.join(format!("{j:06}.pgm")))?;
        if !snaps.is_empty() {
            let traj = out_dir.join("trajectory").join(format!("{j:06}"));
            fs::create_dir_all(&traj)
                .map_err(|e| RunError::io(format!("creating {}", traj.display()), e))?;
            for (t, frame) in &snaps {
                frame.write_pgm(&traj.join(format!("step_{}.pgm", t_max - t)))?;
            }
        }
    }
    if let Some(refs) = refs {
        let refs_dir = out_dir.join("refs");
        fs::create_dir_all(&refs_dir)
            .map_err(|e| RunError::io(format!("creating {}", refs_dir.display()), e))?;
        for (j, img) in refs.iter().enumerate() {
            img.write_pgm(&refs_dir.join(format!("{j:06}.pgm")))?;
        }
    }
    Ok(SampleOutcome { out_dir: out_dir.to_path_buf(), count: inputs.len() })
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<(), RunError> {
    if dir.exists() {
        if !force {
            return Err(RunError::Config(format!(
                "{} already exists (use force to replace)",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir)
            .map_err(|e| RunError::io(format!("clearing {}", dir.display()), e))?;
    }
    fs::create_dir_all(dir).map_err(|e| RunError::io(format!("creating {}", dir.display()), e))
}

/// Sorted .pgm listing of a directory.
fn list_pgms(dir: &Path) -> Result<Vec<PathBuf>, RunError> {
    let entries =
        fs::read_dir(dir).map_err(|e| RunError::io(format!("listing {}", dir.display()), e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    files.sort();
    Ok(files)
}

pub struct EvalOutcome {
    /// (file stem, report) per example, in directory order.
    pub per_example: Vec<(String, MetricReport)>,
    pub mean: MetricReport,
}

/// Score two index-aligned image directories and write `metrics.csv` (one
/// row per example plus a final mean row) and `metrics.json` (aggregates).
pub fn cmd_eval(
    gen_dir: &Path,
    gt_dir: &Path,
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<EvalOutcome, RunError> {
    let gen_files = list_pgms(gen_dir)?;
    let gt_files = list_pgms(gt_dir)?;
    if gen_files.len() != gt_files.len() {
        return Err(RunError::Mismatch(format!(
            "{} holds {} images but {} holds {}",
            gen_dir.display(),
            gen_files.len(),
            gt_dir.display(),
            gt_files.len()
        )));
    }
    if gen_files.is_empty() {
        return Err(RunError::Config("nothing to evaluate".into()));
    }
    let mut per_example = Vec::with_capacity(gen_files.len());
    for (g, t) in gen_files.iter().zip(&gt_files) {
        let gen = ImageBuffer::read_pgm(g)?;
        let gt = ImageBuffer::read_pgm(t)?;
        let report = MetricReport::compute(&gen, &gt, &cfg.dtw)?;
        let stem = g.file_stem().and_then(|s| s.to_str()).unwrap_or("?").to_string();
        per_example.push((stem, report));
    }
    let mean = MetricReport::mean_of(
        &per_example.iter().map(|(_, r)| *r).collect::<Vec<_>>(),
    );

    fs::create_dir_all(out_dir)
        .map_err(|e| RunError::io(format!("creating {}", out_dir.display()), e))?;
    let mut csv = String::from("index,dtw,rmse,ssim,psnr,uqi,ergas,scc,rase\n");
    for (stem, r) in &per_example {
        csv.push_str(stem);
        for v in r.values() {
            csv.push(',');
            csv.push_str(&format!("{v}"));
        }
        csv.push('\n');
    }
    csv.push_str("mean");
    for v in mean.values() {
        csv.push(',');
        csv.push_str(&format!("{v}"));
    }
    csv.push('\n');
    fs::write(out_dir.join("metrics.csv"), csv)
        .map_err(|e| RunError::io("writing metrics.csv", e))?;

    #[derive(Serialize)]
    struct Aggregate<'a> {
        count: usize,
        mean: &'a MetricReport,
    }
    let json = serde_json::to_string_pretty(&Aggregate { count: per_example.len(), mean: &mean })
        .map_err(|e| RunError::Config(format!("encoding metrics.json: {e}")))?;
    fs::write(out_dir.join("metrics.json"), json)
        .map_err(|e| RunError::io("writing metrics.json", e))?;
    Ok(EvalOutcome { per_example, mean })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct PerturbRow {
    pub k: usize,
    /// Examples scored at this k.
    pub scored: usize,
    /// Examples skipped because they have fewer than k leaves.
    pub skipped: usize,
    pub dtw: f64,
    pub rmse: f64,
}

#[derive(Serialize)]
pub struct PerturbOutcome {
    pub rows: Vec<PerturbRow>,
    pub model_dtw: Option<f64>,
    /// Smallest k whose mean DTW reaches the model's DTW, if any.
    pub equivalent_k: Option<usize>,
}

/// Degrade each test program by removing k leaf symbols (k = 0..=k_max),
/// re-render, and score against the unperturbed raster. Writes perturb.csv
/// and perturb.json to `out_dir`. `model_dtw`, when given, is located on the
/// curve to report an "equivalent symbols removed" position.
pub fn cmd_perturb(
    cfg: &ExperimentConfig,
    k_max: usize,
    out_dir: &Path,
    model_dtw: Option<f64>,
) -> Result<PerturbOutcome, RunError> {
    cfg.validate()?;
    if k_max < 1 {
        return Err(RunError::Config("k_max must be >= 1".into()));
    }
    let corpus = load_corpus(&cfg.paths.corpus)?;
    let test_idx = &corpus.manifest.split.test;
    if test_idx.is_empty() {
        return Err(RunError::Config("test split is empty".into()));
    }
    let root = Prng::from_root(cfg.seed);
    let mut rows = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let k_rng = root.derive("perturb", k as u64);
        let mut dtw_sum = 0.0f64;
        let mut rmse_sum = 0.0f64;
        let mut scored = 0usize;
        let mut skipped = 0usize;
        for &idx in test_idx {
            let (program, gt) = corpus.pair(idx);
            let mut ex_rng = k_rng.derive("ex", idx as u64);
            let degraded = match perturb(program, k, &mut ex_rng) {
                Ok(p) => p,
                Err(MarkupError::NotEnoughSymbols { .. }) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let img = render(&degraded, &cfg.canvas)?;
            dtw_sum += dtw_distance(&img, gt, &cfg.dtw)?;
            rmse_sum += rmse(&img, gt)?;
            scored += 1;
        }
        if scored == 0 {
            return Err(RunError::Config(format!(
                "every test program has fewer than {k} leaves"
            )));
        }
        rows.push(PerturbRow {
            k,
            scored,
            skipped,
            dtw: dtw_sum / scored as f64,
            rmse: rmse_sum / scored as f64,
        });
    }

    let equivalent_k =
        model_dtw.and_then(|target| rows.iter().find(|r| r.dtw >= target).map(|r| r.k));
    fs::create_dir_all(out_dir)
        .map_err(|e| RunError::io(format!("creating {}", out_dir.display()), e))?;
    let mut csv = String::from("k,scored,skipped,dtw,rmse\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{},{}\n", r.k, r.scored, r.skipped, r.dtw, r.rmse));
    }
    fs::write(out_dir.join("perturb.csv"), csv)
        .map_err(|e| RunError::io("writing perturb.csv", e))?;
    let outcome = PerturbOutcome { rows, model_dtw, equivalent_k };
    let json = serde_json::to_string_pretty(&outcome)
        .map_err(|e| RunError::Config(format!("encoding perturb.json: {e}")))?;
    fs::write(out_dir.join("perturb.json"), json)
        .map_err(|e| RunError::io("writing perturb.json", e))?;
    Ok(outcome)
}
