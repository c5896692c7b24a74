//! Conditional noise-prediction network.
//!
//! A small encoder-decoder over the latent canvas: stem conv, pre-norm
//! residual blocks with stride-2 conv transitions down to a bottleneck with
//! optional cross-attention over token embeddings, transposed-conv
//! transitions back up with skip concats, and a zero-initialized output conv
//! so a fresh model predicts exactly zero noise.
//!
//! The residual skips are load-bearing, not a training nicety: group norm
//! strips features of scale and overall gray level, and a noise predictor
//! must track both (at high t the target is close to the input itself). A
//! chain whose predictor cannot see its own amplitude drift walks off to
//! saturated all-dark or all-light outputs. Here every block is
//! x + f(norm(x)), so an un-normalized path runs from the input to the
//! head, which additionally sees the raw latent as an extra channel.
//!
//! Conditioning comes in three flavors:
//! - `pooled`: a masked mean of token embeddings is projected and added to
//!   the time embedding. The mean is accumulated in ascending-id order, so
//!   the output is bit-for-bit invariant to token order.
//! - `cross_attn`: bottleneck pixels attend over per-position token
//!   embeddings (lookup + learned sequence-position offsets).
//! - `cross_attn_pos`: as above, with learned row-id and column-id
//!   embeddings added to the spatial queries.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use super::tape::{NodeId, Tape};
use super::tensor::{he_uniform, normal_init, Params, Tensor};
use super::{BackwardFn, EpsDenoiser, NnError};
use crate::markup::encode::{EncodedSeq, PAD, VOCAB_SIZE};
use crate::rng::Prng;
use crate::scalar::{Grid, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    Pooled,
    CrossAttn,
    CrossAttnPos,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mode: ConditioningMode,
    /// Channel width of the first level; levels use (w, 2w, 4w).
    pub base_width: usize,
    /// Token embedding width.
    pub cond_dim: usize,
    /// Raw sinusoidal time feature width (even).
    pub sin_dim: usize,
    /// Conditioning sequence capacity (bos + payload + eos, padded).
    pub max_len: usize,
    pub vocab_size: usize,
    /// Largest timestep the model accepts (the schedule length).
    pub max_t: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: ConditioningMode::CrossAttnPos,
            base_width: 32,
            cond_dim: 64,
            sin_dim: 64,
            max_len: 64,
            vocab_size: VOCAB_SIZE,
            max_t: 100,
            height: 32,
            width: 96,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |msg: String| Err(NnError::ShapeMismatch(msg));
        if self.height % 4 != 0 || self.width % 4 != 0 || self.height == 0 || self.width == 0 {
            return bad(format!(
                "canvas {}x{} must be positive and divisible by 4",
                self.height, self.width
            ));
        }
        if self.base_width == 0 {
            return bad("base_width must be positive".into());
        }
        if self.sin_dim < 2 || self.sin_dim % 2 != 0 {
            return bad(format!("sin_dim {} must be even and >= 2", self.sin_dim));
        }
        if self.cond_dim == 0 || self.max_len == 0 || self.vocab_size == 0 || self.max_t == 0 {
            return bad("cond_dim, max_len, vocab_size, max_t must be positive".into());
        }
        Ok(())
    }

    /// (level0, level1, bottleneck) channel widths.
    pub fn widths(&self) -> (usize, usize, usize) {
        (self.base_width, 2 * self.base_width, 4 * self.base_width)
    }

    /// Time-embedding width after projection.
    pub fn time_dim(&self) -> usize {
        4 * self.base_width
    }

    pub fn uses_attention(&self) -> bool {
        matches!(self.mode, ConditioningMode::CrossAttn | ConditioningMode::CrossAttnPos)
    }
}

/// Largest group count <= 8 that divides the channel count.
fn norm_groups(channels: usize) -> usize {
    let mut g = channels.min(8);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

/// Raw sinusoidal timestep features: d/2 geometric frequencies from 1 down
/// to 1/10000, interleaved (sin, cos). Distinct for integer t up to 10^4.
pub fn sinusoid_features(t: usize, d: usize) -> Vec<f64> {
    assert!(d >= 2 && d % 2 == 0, "sinusoid width must be even");
    let half = d / 2;
    let mut out = Vec::with_capacity(d);
    for i in 0..half {
        let exponent = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let omega = (-(10_000f64).ln() * exponent).exp();
        let arg = t as f64 * omega;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

/// Fresh parameters for `config`, drawn from `rng` in a fixed creation
/// order. Convs and linears are He-uniform, embeddings 0.02-std normal,
/// norm scales one, all biases and the output head zero.
pub fn init_params<S: Scalar>(config: &ModelConfig, rng: &mut Prng) -> Params<S> {
    config.validate().expect("invalid model config");
    let (c0, c1, cb) = config.widths();
    let td = config.time_dim();
    let d = config.cond_dim;
    let mut p = Params::new();
    let conv = |p: &mut Params<S>, name: &str, co: usize, ci: usize, k: usize, rng: &mut Prng| {
        p.insert(&format!("{name}.w"), he_uniform(&[co, ci, k, k], ci * k * k, rng), true);
        p.insert(&format!("{name}.b"), Tensor::zeros(&[1, co]), false);
    };
    let linear = |p: &mut Params<S>, name: &str, din: usize, dout: usize, rng: &mut Prng| {
        p.insert(&format!("{name}.w"), he_uniform(&[din, dout], din, rng), true);
        p.insert(&format!("{name}.b"), Tensor::zeros(&[1, dout]), false);
    };
    let norm = |p: &mut Params<S>, name: &str, c: usize| {
        p.insert(&format!("{name}.g"), Tensor::from_vec(&[1, c], vec![S::one(); c]), false);
        p.insert(&format!("{name}.b"), Tensor::zeros(&[1, c]), false);
    };

    p.insert("emb.token", normal_init(&[config.vocab_size, d], 0.02, rng), false);
    p.insert("emb.pos", normal_init(&[config.max_len, d], 0.02, rng), false);
    linear(&mut p, "time.fc1", config.sin_dim, td, rng);
    linear(&mut p, "time.fc2", td, td, rng);
    match config.mode {
        ConditioningMode::Pooled => linear(&mut p, "cond.proj", d, td, rng),
        ConditioningMode::CrossAttn | ConditioningMode::CrossAttnPos => {
            norm(&mut p, "attn.norm", cb);
            p.insert("attn.wq", he_uniform(&[cb, cb], cb, rng), true);
            p.insert("attn.wk", he_uniform(&[d, cb], d, rng), true);
            p.insert("attn.wv", he_uniform(&[d, cb], d, rng), true);
            p.insert("attn.wo", he_uniform(&[cb, cb], cb, rng), true);
            // Allocated in both attention modes so the positional ablation
            // probe is meaningful; wired into the graph only in
            // cross_attn_pos.
            p.insert("pos.row", normal_init(&[config.height / 4, cb], 0.02, rng), false);
            p.insert("pos.col", normal_init(&[config.width / 4, cb], 0.02, rng), false);
        }
    }
    // Pre-norm residual block: norm over the input channels, conv and time
    // projection on the normalized branch, a 1x1 skip projection only when
    // the channel count changes.
    let block = |p: &mut Params<S>, name: &str, ci: usize, co: usize, rng: &mut Prng| {
        p.insert(&format!("{name}.norm.g"), Tensor::from_vec(&[1, ci], vec![S::one(); ci]), false);
        p.insert(&format!("{name}.norm.b"), Tensor::zeros(&[1, ci]), false);
        p.insert(&format!("{name}.conv.w"), he_uniform(&[co, ci, 3, 3], ci * 9, rng), true);
        p.insert(&format!("{name}.conv.b"), Tensor::zeros(&[1, co]), false);
        p.insert(&format!("{name}.temb.w"), he_uniform(&[td, co], td, rng), true);
        p.insert(&format!("{name}.temb.b"), Tensor::zeros(&[1, co]), false);
        if ci != co {
            p.insert(&format!("{name}.skip.w"), he_uniform(&[ci, co], ci, rng), true);
            p.insert(&format!("{name}.skip.b"), Tensor::zeros(&[1, co]), false);
        }
    };

    conv(&mut p, "unet.stem", c0, 1, 3, rng);
    // Down path: residual block, then a stride-2 conv that widens.
    block(&mut p, "unet.down0", c0, c0, rng);
    conv(&mut p, "unet.down0.down", c1, c0, 3, rng);
    block(&mut p, "unet.down1", c1, c1, rng);
    conv(&mut p, "unet.down1.down", cb, c1, 3, rng);
    block(&mut p, "unet.mid1", cb, cb, rng);
    block(&mut p, "unet.mid2", cb, cb, rng);
    // Up path: transposed conv doubles the extent and narrows, then a
    // residual block eats the skip concat.
    p.insert("unet.up1.upconv.w", he_uniform(&[cb, c1, 2, 2], cb * 4, rng), true);
    p.insert("unet.up1.upconv.b", Tensor::zeros(&[1, c1]), false);
    block(&mut p, "unet.up1", 2 * c1, c1, rng);
    p.insert("unet.up0.upconv.w", he_uniform(&[c1, c0, 2, 2], c1 * 4, rng), true);
    p.insert("unet.up0.upconv.b", Tensor::zeros(&[1, c0]), false);
    block(&mut p, "unet.up0", 2 * c0, c0, rng);
    // The raw latent rides along into the zero-initialized head, so the
    // near-identity answer at high t is expressible from the start.
    p.insert("head.w", Tensor::zeros(&[1, c0 + 1, 3, 3]), true);
    p.insert("head.b", Tensor::zeros(&[1, 1]), false);
    p
}

/// Conditioning tokens reduced to what the graph needs: per-position ids
/// and the ascending-id histogram used for order-independent pooling.
struct CondView {
    /// (position, id) for every non-pad slot in 0..len.
    active: Vec<(usize, usize)>,
}

impl CondView {
    fn from_seq(cond: &EncodedSeq, vocab: usize) -> Result<Self, NnError> {
        let mut active = Vec::new();
        for (i, &id) in cond.ids.iter().enumerate().take(cond.len) {
            if id == PAD {
                continue;
            }
            if id as usize >= vocab {
                return Err(NnError::IdOutOfRange { id, vocab });
            }
            active.push((i, id as usize));
        }
        Ok(CondView { active })
    }

    fn token_counts(&self) -> Vec<(usize, usize)> {
        let mut ids: Vec<usize> = self.active.iter().map(|&(_, id)| id).collect();
        ids.sort_unstable();
        let mut counts: Vec<(usize, usize)> = Vec::new();
        for id in ids {
            match counts.last_mut() {
                Some(last) if last.0 == id => last.1 += 1,
                _ => counts.push((id, 1)),
            }
        }
        counts
    }

    fn position_counts(&self) -> Vec<(usize, usize)> {
        self.active.iter().map(|&(pos, _)| (pos, 1)).collect()
    }
}

pub struct UNetDenoiser<S: Scalar> {
    pub config: ModelConfig,
    pub params: Params<S>,
    evals: Cell<u64>,
}

impl<S: Scalar> UNetDenoiser<S> {
    pub fn new(config: ModelConfig, params: Params<S>) -> Self {
        config.validate().expect("invalid model config");
        UNetDenoiser { config, params, evals: Cell::new(0) }
    }

    pub fn init(config: ModelConfig, rng: &mut Prng) -> Self {
        let params = init_params(&config, rng);
        UNetDenoiser::new(config, params)
    }

    /// Time embedding after the learned 2-layer projection: (1, time_dim).
    fn time_nodes(&self, tape: &mut Tape<S>, t: usize) -> NodeId {
        let feats: Vec<S> =
            sinusoid_features(t, self.config.sin_dim).into_iter().map(S::fp).collect();
        let f = tape.input(Tensor::from_vec(&[1, self.config.sin_dim], feats));
        let w1 = tape.param("time.fc1.w", &self.params);
        let b1 = tape.param("time.fc1.b", &self.params);
        let h = tape.matmul(f, w1);
        let h = tape.add_row_bias(h, b1);
        let h = tape.silu(h);
        let w2 = tape.param("time.fc2.w", &self.params);
        let b2 = tape.param("time.fc2.b", &self.params);
        let h = tape.matmul(h, w2);
        tape.add_row_bias(h, b2)
    }

    /// Order-independent pooled condition vector: masked mean of token
    /// embeddings plus the mean sequence-position offset, each accumulated
    /// over ascending indices. (1, cond_dim); all-pad input gives zeros.
    fn pooled_nodes(&self, tape: &mut Tape<S>, view: &CondView) -> NodeId {
        let n = view.active.len();
        let tok = tape.param("emb.token", &self.params);
        let pos = tape.param("emb.pos", &self.params);
        let tok_mean = tape.bag_mean(tok, &view.token_counts(), n);
        let pos_mean = tape.bag_mean(pos, &view.position_counts(), n);
        tape.add(tok_mean, pos_mean)
    }

    /// Per-position token embeddings for attention keys/values: (n_active,
    /// cond_dim), lookup plus sequence-position offset.
    fn sequence_nodes(&self, tape: &mut Tape<S>, view: &CondView) -> NodeId {
        let ids: Vec<usize> = view.active.iter().map(|&(_, id)| id).collect();
        let positions: Vec<usize> = view.active.iter().map(|&(pos, _)| pos).collect();
        let tok = tape.param("emb.token", &self.params);
        let pos = tape.param("emb.pos", &self.params);
        let e_tok = tape.embed_rows(tok, &ids);
        let e_pos = tape.embed_rows(pos, &positions);
        tape.add(e_tok, e_pos)
    }

    /// Pre-norm residual block: x + (conv3x3(silu(group_norm(x))) + biases +
    /// projected time embedding). The normalized branch supplies shape, the
    /// skip supplies amplitude; when the channel count changes the skip is a
    /// learned 1x1 projection (flatten pixels to rows, matmul, restore).
    fn res_block(
        &self,
        tape: &mut Tape<S>,
        x: NodeId,
        temb: NodeId,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> NodeId {
        let g = tape.param(&format!("{prefix}.norm.g"), &self.params);
        let be = tape.param(&format!("{prefix}.norm.b"), &self.params);
        let a = tape.group_norm(x, g, be, norm_groups(in_ch));
        let a = tape.silu(a);
        let w = tape.param(&format!("{prefix}.conv.w"), &self.params);
        let b = tape.param(&format!("{prefix}.conv.b"), &self.params);
        let a = tape.conv2d(a, w, 1);
        let a = tape.add_chan_bias(a, b);
        let tw = tape.param(&format!("{prefix}.temb.w"), &self.params);
        let tb = tape.param(&format!("{prefix}.temb.b"), &self.params);
        let tv = tape.matmul(temb, tw);
        let tv = tape.add_row_bias(tv, tb);
        let a = tape.add_chan_bias(a, tv);
        let skip = if in_ch == out_ch {
            x
        } else {
            let (sh, sw) = {
                let shape = &tape.value(x).shape;
                (shape[1], shape[2])
            };
            let rows = tape.spatial_to_rows(x);
            let pw = tape.param(&format!("{prefix}.skip.w"), &self.params);
            let pb = tape.param(&format!("{prefix}.skip.b"), &self.params);
            let r = tape.matmul(rows, pw);
            let r = tape.add_row_bias(r, pb);
            tape.rows_to_spatial(r, out_ch, sh, sw)
        };
        tape.add(skip, a)
    }

    fn downsample(&self, tape: &mut Tape<S>, x: NodeId, name: &str) -> NodeId {
        let w = tape.param(&format!("{name}.w"), &self.params);
        let b = tape.param(&format!("{name}.b"), &self.params);
        let a = tape.conv2d(x, w, 2);
        tape.add_chan_bias(a, b)
    }

    fn upsample(&self, tape: &mut Tape<S>, x: NodeId, name: &str) -> NodeId {
        let w = tape.param(&format!("{name}.w"), &self.params);
        let b = tape.param(&format!("{name}.b"), &self.params);
        let a = tape.conv_transpose2d(x, w);
        tape.add_chan_bias(a, b)
    }

    /// Build the full forward graph; returns the eps-hat node (1, H, W).
    fn build(
        &self,
        tape: &mut Tape<S>,
        y_t: &Grid<S>,
        t: usize,
        cond: &EncodedSeq,
    ) -> Result<NodeId, NnError> {
        let cfg = &self.config;
        if y_t.h() != cfg.height || y_t.w() != cfg.width {
            return Err(NnError::ShapeMismatch(format!(
                "latent {}x{} does not match configured canvas {}x{}",
                y_t.h(),
                y_t.w(),
                cfg.height,
                cfg.width
            )));
        }
        if t < 1 || t > cfg.max_t {
            return Err(NnError::ShapeMismatch(format!(
                "timestep {t} outside schedule 1..={}",
                cfg.max_t
            )));
        }
        if cond.ids.len() > cfg.max_len {
            return Err(NnError::ShapeMismatch(format!(
                "conditioning length {} exceeds capacity {}",
                cond.ids.len(),
                cfg.max_len
            )));
        }
        let view = CondView::from_seq(cond, cfg.vocab_size)?;
        let (c0, c1, cb) = cfg.widths();
        let (bh, bw) = (cfg.height / 4, cfg.width / 4);

        let mut temb = self.time_nodes(tape, t);
        if cfg.mode == ConditioningMode::Pooled {
            let pooled = self.pooled_nodes(tape, &view);
            let w = tape.param("cond.proj.w", &self.params);
            let b = tape.param("cond.proj.b", &self.params);
            let c = tape.matmul(pooled, w);
            let c = tape.add_row_bias(c, b);
            temb = tape.add(temb, c);
        }

        let y = tape.input(Tensor::from_vec(&[1, y_t.h(), y_t.w()], y_t.as_slice().to_vec()));
        let stem_w = tape.param("unet.stem.w", &self.params);
        let stem_b = tape.param("unet.stem.b", &self.params);
        let x0 = tape.conv2d(y, stem_w, 1);
        let x0 = tape.add_chan_bias(x0, stem_b);

        let skip0 = self.conv_block(
            tape, x0, temb, "unet.down0.conv1", "unet.down0.temb", "unet.down0.norm1", c1,
        );
        let x = self.downsample(tape, skip0, "unet.down0.down");
        let skip1 = self.conv_block(
            tape, x, temb, "unet.down1.conv1", "unet.down1.temb", "unet.down1.norm1", cb,
        );
        let x = self.downsample(tape, skip1, "unet.down1.down");

        let mut m = self.conv_block(
            tape, x, temb, "unet.mid.conv1", "unet.mid.temb1", "unet.mid.norm1", cb,
        );
        if cfg.uses_attention() {
            let rows = tape.spatial_to_rows(m);
            let q_in = if cfg.mode == ConditioningMode::CrossAttnPos {
                let pr = tape.param("pos.row", &self.params);
                let pc = tape.param("pos.col", &self.params);
                tape.add_grid_pos(rows, pr, pc, bh, bw)
            } else {
                rows
            };
            let wq = tape.param("attn.wq", &self.params);
            let wk = tape.param("attn.wk", &self.params);
            let wv = tape.param("attn.wv", &self.params);
            let wo = tape.param("attn.wo", &self.params);
            let seq = self.sequence_nodes(tape, &view);
            let q = tape.matmul(q_in, wq);
            let k = tape.matmul(seq, wk);
            let v = tape.matmul(seq, wv);
            let ctx = tape.attention(q, k, v);
            let ctx = tape.matmul(ctx, wo);
            let ctx = tape.rows_to_spatial(ctx, cb, bh, bw);
            m = tape.add(m, ctx);
        }
        let m = self.conv_block(
            tape, m, temb, "unet.mid.conv2", "unet.mid.temb2", "unet.mid.norm2", cb,
        );

        let u = self.upsample(tape, m, "unet.up1.upconv");
        let u = tape.concat_chan(u, skip1);
        let u = self.conv_block(
            tape, u, temb, "unet.up1.conv1", "unet.up1.temb", "unet.up1.norm1", c1,
        );
        let u = self.upsample(tape, u, "unet.up0.upconv");
        let u = tape.concat_chan(u, skip0);
        let u = self.conv_block(
            tape, u, temb, "unet.up0.conv1", "unet.up0.temb", "unet.up0.norm1", c0,
        );

        // Unnormalized input channel alongside the trunk features; see
        // init_params on why the head needs it.
        let u = tape.concat_chan(u, y);
        let hw = tape.param("head.w", &self.params);
        let hb = tape.param("head.b", &self.params);
        let out = tape.conv2d(u, hw, 1);
        let out = tape.add_chan_bias(out, hb);
        if tape.value(out).data.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NumericalDivergence("denoiser forward".into()));
        }
        Ok(out)
    }

    /// Pooled condition vector as plain numbers; exposed for cross-checks.
    pub fn pooled_condition(&self, cond: &EncodedSeq) -> Result<Vec<S>, NnError> {
        let view = CondView::from_seq(cond, self.config.vocab_size)?;
        let mut tape = Tape::new();
        let node = self.pooled_nodes(&mut tape, &view);
        Ok(tape.value(node).data.clone())
    }
}

impl<S: Scalar> EpsDenoiser<S> for UNetDenoiser<S> {
    fn eps(&self, y_t: &Grid<S>, t: usize, cond: &EncodedSeq) -> Result<Grid<S>, NnError> {
        let mut tape = Tape::new();
        let out = self.build(&mut tape, y_t, t, cond)?;
        self.evals.set(self.evals.get() + 1);
        let v = tape.value(out);
        Ok(Grid::from_vec(y_t.h(), y_t.w(), v.data.clone()))
    }

    fn eps_with_grad(
        &self,
        y_t: &Grid<S>,
        t: usize,
        cond: &EncodedSeq,
    ) -> Result<(Grid<S>, BackwardFn<'_, S>), NnError> {
        let mut tape = Tape::new();
        let out = self.build(&mut tape, y_t, t, cond)?;
        self.evals.set(self.evals.get() + 1);
        let v = tape.value(out);
        let grid = Grid::from_vec(y_t.h(), y_t.w(), v.data.clone());
        let back: BackwardFn<'_, S> = Box::new(move |seed: &Grid<S>| {
            assert_eq!(
                (seed.h(), seed.w()),
                grid_h_w(&tape, out),
                "backward seed shape mismatch"
            );
            tape.backward(out, seed.as_slice())
        });
        Ok((grid, back))
    }

    fn eval_count(&self) -> Option<u64> {
        Some(self.evals.get())
    }
}

fn grid_h_w<S: Scalar>(tape: &Tape<S>, node: NodeId) -> (usize, usize) {
    let shape = &tape.value(node).shape;
    (shape[1], shape[2])
}
