//! Binary checkpoint format.
//!
//! Layout: 4-byte magic, u32 LE format version, u64 LE manifest length, the
//! manifest JSON, then every tensor named in the manifest as raw f32
//! little-endian values in manifest order. Parameters, Adam first moments,
//! and Adam second moments are all stored, so a resumed run continues the
//! optimizer trajectory bit for bit. The rng needs no serialized state: all
//! streams are derived on demand from the root seed plus (epoch, step)
//! labels, both of which the manifest carries.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::RunError;
use crate::nn::optim::AdamW;
use crate::nn::tensor::{Params, Tensor};
use crate::schedule::VarianceSchedule;

const MAGIC: &[u8; 4] = b"MLCK";
const VERSION: u32 = 1;

const PARAM_PREFIX: &str = "param.";
const ADAM_M_PREFIX: &str = "adam.m.";
const ADAM_V_PREFIX: &str = "adam.v.";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Weight-decay flag; meaningful for `param.*` entries only.
    pub decay: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ExperimentConfig,
    /// Completed epochs (1-based count).
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub global_step: u64,
    pub root_seed: u64,
    /// Explicit betas, never recomputed from endpoints.
    pub schedule_betas: Vec<f64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: Params<f32>,
    pub opt_m: BTreeMap<String, Vec<f32>>,
    pub opt_v: BTreeMap<String, Vec<f32>>,
}

impl Checkpoint {
    pub fn schedule(&self) -> VarianceSchedule {
        VarianceSchedule::from_betas(self.manifest.schedule_betas.clone())
    }
}

fn err(msg: impl Into<String>) -> RunError {
    RunError::Checkpoint(msg.into())
}

pub fn save(
    path: &Path,
    config: &ExperimentConfig,
    epoch: usize,
    root_seed: u64,
    sched: &VarianceSchedule,
    params: &Params<f32>,
    opt: &AdamW<f32>,
) -> Result<(), RunError> {
    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let push = |name: String, shape: Vec<usize>, decay: bool, data: &[f32],
                    tensors: &mut Vec<TensorEntry>,
                    blob: &mut Vec<u8>| {
        for v in data {
            blob.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        tensors.push(TensorEntry { name, shape, decay });
    };
    for (name, p) in params.iter() {
        push(
            format!("{PARAM_PREFIX}{name}"),
            p.value.shape.clone(),
            p.decay,
            &p.value.data,
            &mut tensors,
            &mut blob,
        );
    }
    for (name, m) in &opt.m {
        push(format!("{ADAM_M_PREFIX}{name}"), vec![m.len()], false, m, &mut tensors, &mut blob);
    }
    for (name, v) in &opt.v {
        push(format!("{ADAM_V_PREFIX}{name}"), vec![v.len()], false, v, &mut tensors, &mut blob);
    }

    let manifest = CheckpointManifest {
        config: config.clone(),
        epoch,
        global_step: opt.step,
        root_seed,
        schedule_betas: sched.betas().to_vec(),
        tensors,
    };
    let manifest_json =
        serde_json::to_vec(&manifest).map_err(|e| err(format!("encoding manifest: {e}")))?;

    let mut out = Vec::with_capacity(16 + manifest_json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    out.extend_from_slice(&blob);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)
            .map_err(|e| RunError::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, out).map_err(|e| RunError::io(format!("writing {}", path.display()), e))
}

pub fn load(path: &Path) -> Result<Checkpoint, RunError> {
    let bytes =
        fs::read(path).map_err(|e| RunError::io(format!("reading {}", path.display()), e))?;
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(err(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(err(format!("unsupported checkpoint version {version} (want {VERSION})")));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + mlen {
        return Err(err("truncated manifest"));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[16..16 + mlen])
        .map_err(|e| err(format!("decoding manifest: {e}")))?;

    let expected: usize = manifest.tensors.iter().map(|t| numel(&t.shape)).sum();
    let blob = &bytes[16 + mlen..];
    if blob.len() != expected * 4 {
        return Err(err(format!(
            "tensor blob holds {} bytes, manifest expects {}",
            blob.len(),
            expected * 4
        )));
    }

    let mut params = Params::new();
    let mut opt_m = BTreeMap::new();
    let mut opt_v = BTreeMap::new();
    let mut off = 0usize;
    for entry in &manifest.tensors {
        let n = numel(&entry.shape);
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let b: [u8; 4] = blob[off + 4 * i..off + 4 * i + 4].try_into().unwrap();
            data.push(f32::from_bits(u32::from_le_bytes(b)));
        }
        off += 4 * n;
        if let Some(name) = entry.name.strip_prefix(PARAM_PREFIX) {
            params.insert(name, Tensor { shape: entry.shape.clone(), data }, entry.decay);
        } else if let Some(name) = entry.name.strip_prefix(ADAM_M_PREFIX) {
            opt_m.insert(name.to_string(), data);
        } else if let Some(name) = entry.name.strip_prefix(ADAM_V_PREFIX) {
            opt_v.insert(name.to_string(), data);
        } else {
            return Err(err(format!("unknown tensor kind {}", entry.name)));
        }
    }
    Ok(Checkpoint { manifest, params, opt_m, opt_v })
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}
