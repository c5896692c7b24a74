//! Minimal reverse-mode automatic differentiation.
//!
//! A `Tape` is a define-by-run graph: builder methods compute values eagerly
//! and append one node per op. `backward` seeds a cotangent at any node and
//! walks the list in reverse, accumulating vector-Jacobian products; leaf
//! `Param` nodes collect their cotangents into a `GradStore`.
//!
//! The op set is exactly what the denoiser needs: elementwise add/mul/scale,
//! bias broadcasts, matmul, 3x3 convolution (stride 1 or 2, pad 1), 2x2
//! stride-2 transposed convolution, SiLU, group normalization, fused softmax
//! attention, embedding gathers (per-row and counted-bag mean), grid position
//! offsets, channel concat, transposes between spatial and row layouts, and a
//! mean-square reduction.

use super::tensor::{Params, Tensor};
use super::GradStore;
use crate::scalar::Scalar;

pub type NodeId = usize;

const GN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(String),
    Add,
    Mul,
    Scale(f64),
    /// (n,d) + (1,d), bias shared across rows.
    AddRowBias,
    /// (c,h,w) + (1,c), bias shared across a channel plane.
    AddChanBias,
    /// (n,k) x (k,m).
    Matmul,
    /// x:(ci,h,w), w:(co,ci,3,3), pad 1.
    Conv2d { stride: usize },
    /// x:(ci,h,w), w:(ci,co,2,2), stride 2 upsample.
    ConvT2d,
    Silu,
    /// x:(c,h,w), gamma:(1,c), beta:(1,c).
    GroupNorm { groups: usize },
    /// q:(n,dk), k:(l,dk), v:(l,dv); out (n,dv); l = 0 gives zeros.
    Attention,
    /// table:(v,d) -> (ids.len(), d).
    EmbedRows { ids: Vec<usize> },
    /// table:(v,d) -> (1,d): sum of count * row / len over ascending ids.
    BagMean { counts: Vec<(usize, usize)>, len: usize },
    /// x:(n,c) with n = h*w, row:(h,c), col:(w,c).
    AddGridPos { h: usize, w: usize },
    /// (c1,h,w) ++ (c2,h,w) along channels.
    ConcatChan,
    /// (c,h,w) -> (h*w, c).
    SpatialToRows,
    /// (h*w, c) -> (c,h,w).
    RowsToSpatial { c: usize, h: usize, w: usize },
    /// any -> (1): mean of squared entries.
    MeanSquare,
}

struct Node<S> {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor<S>,
    /// Forward byproducts the backward pass reuses (softmax matrix,
    /// normalization statistics).
    aux: Vec<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor<S>, aux: Vec<S>) -> NodeId {
        self.nodes.push(Node { op, inputs, value, aux });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Input, vec![], value, vec![])
    }

    /// Leaf bound to a named parameter; its cotangent lands in the GradStore.
    pub fn param(&mut self, name: &str, params: &Params<S>) -> NodeId {
        let value = params.get(name).value.clone();
        self.push(Op::Param(name.to_string()), vec![], value, vec![])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape, vb.shape, "add shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x + y).collect();
        let shape = va.shape.clone();
        self.push(Op::Add, vec![a, b], Tensor { shape, data }, vec![])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape, vb.shape, "mul shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x * y).collect();
        let shape = va.shape.clone();
        self.push(Op::Mul, vec![a, b], Tensor { shape, data }, vec![])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = &self.nodes[a].value;
        let k = S::fp(c);
        let data = va.data.iter().map(|&x| x * k).collect();
        let shape = va.shape.clone();
        self.push(Op::Scale(c), vec![a], Tensor { shape, data }, vec![])
    }

    pub fn add_row_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (vx, vb) = (&self.nodes[x].value, &self.nodes[b].value);
        let (n, d) = (vx.shape[0], vx.shape[1]);
        assert_eq!(vb.shape, vec![1, d], "row bias shape mismatch");
        let mut data = vx.data.clone();
        for r in 0..n {
            for c in 0..d {
                data[r * d + c] = data[r * d + c] + vb.data[c];
            }
        }
        self.push(Op::AddRowBias, vec![x, b], Tensor { shape: vec![n, d], data }, vec![])
    }

    pub fn add_chan_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (vx, vb) = (&self.nodes[x].value, &self.nodes[b].value);
        let (c, h, w) = chw(&vx.shape);
        assert_eq!(vb.shape, vec![1, c], "channel bias shape mismatch");
        let hw = h * w;
        let mut data = vx.data.clone();
        for ch in 0..c {
            let bias = vb.data[ch];
            for v in &mut data[ch * hw..(ch + 1) * hw] {
                *v = *v + bias;
            }
        }
        self.push(Op::AddChanBias, vec![x, b], Tensor { shape: vec![c, h, w], data }, vec![])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (n, k) = (va.shape[0], va.shape[1]);
        let (k2, m) = (vb.shape[0], vb.shape[1]);
        assert_eq!(k, k2, "matmul inner dim mismatch");
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            for p in 0..k {
                let aip = va.data[i * k + p];
                let brow = &vb.data[p * m..(p + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + aip * bv;
                }
            }
        }
        self.push(Op::Matmul, vec![a, b], Tensor { shape: vec![n, m], data: out }, vec![])
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize) -> NodeId {
        assert!(stride == 1 || stride == 2, "conv stride must be 1 or 2");
        let (vx, vw) = (&self.nodes[x].value, &self.nodes[w].value);
        let (ci, h, wd) = chw(&vx.shape);
        assert_eq!(vw.shape[1], ci, "conv weight channel mismatch");
        assert_eq!((vw.shape[2], vw.shape[3]), (3, 3), "conv kernel must be 3x3");
        let co = vw.shape[0];
        let (ho, wo) = ((h - 1) / stride + 1, (wd - 1) / stride + 1);
        let mut out = vec![S::zero(); co * ho * wo];
        for oc in 0..co {
            for ic in 0..ci {
                let wk = &vw.data[(oc * ci + ic) * 9..(oc * ci + ic) * 9 + 9];
                let xplane = &vx.data[ic * h * wd..(ic + 1) * h * wd];
                let oplane = &mut out[oc * ho * wo..(oc + 1) * ho * wo];
                for yo in 0..ho {
                    for ky in 0..3usize {
                        let yi = (yo * stride + ky) as isize - 1;
                        if yi < 0 || yi >= h as isize {
                            continue;
                        }
                        let xrow = &xplane[yi as usize * wd..(yi as usize + 1) * wd];
                        let orow = &mut oplane[yo * wo..(yo + 1) * wo];
                        for kx in 0..3usize {
                            let wv = wk[ky * 3 + kx];
                            conv_row_acc(orow, xrow, wv, kx, stride, wd);
                        }
                    }
                }
            }
        }
        self.push(
            Op::Conv2d { stride },
            vec![x, w],
            Tensor { shape: vec![co, ho, wo], data: out },
            vec![],
        )
    }

    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (vx, vw) = (&self.nodes[x].value, &self.nodes[w].value);
        let (ci, h, wd) = chw(&vx.shape);
        assert_eq!(vw.shape[0], ci, "convT weight channel mismatch");
        assert_eq!((vw.shape[2], vw.shape[3]), (2, 2), "convT kernel must be 2x2");
        let co = vw.shape[1];
        let (ho, wo) = (2 * h, 2 * wd);
        let mut out = vec![S::zero(); co * ho * wo];
        for ic in 0..ci {
            let xplane = &vx.data[ic * h * wd..(ic + 1) * h * wd];
            for oc in 0..co {
                let wk = &vw.data[(ic * co + oc) * 4..(ic * co + oc) * 4 + 4];
                let oplane = &mut out[oc * ho * wo..(oc + 1) * ho * wo];
                for y in 0..h {
                    let xrow = &xplane[y * wd..(y + 1) * wd];
                    for ky in 0..2usize {
                        let orow = &mut oplane[(2 * y + ky) * wo..(2 * y + ky + 1) * wo];
                        for kx in 0..2usize {
                            let wv = wk[ky * 2 + kx];
                            for xx in 0..wd {
                                orow[2 * xx + kx] = orow[2 * xx + kx] + wv * xrow[xx];
                            }
                        }
                    }
                }
            }
        }
        self.push(Op::ConvT2d, vec![x, w], Tensor { shape: vec![co, ho, wo], data: out }, vec![])
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x].value;
        let data = vx
            .data
            .iter()
            .map(|&v| {
                let s = S::one() / (S::one() + (-v).exp());
                v * s
            })
            .collect();
        let shape = vx.shape.clone();
        self.push(Op::Silu, vec![x], Tensor { shape, data }, vec![])
    }

    /// Group normalization over (c,h,w); stores per-group mean and inverse
    /// standard deviation for the backward pass.
    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize) -> NodeId {
        let (vx, vg, vb) = (&self.nodes[x].value, &self.nodes[gamma].value, &self.nodes[beta].value);
        let (c, h, w) = chw(&vx.shape);
        assert_eq!(c % groups, 0, "channels not divisible by groups");
        assert_eq!(vg.shape, vec![1, c], "gamma shape");
        assert_eq!(vb.shape, vec![1, c], "beta shape");
        let gs = c / groups;
        let hw = h * w;
        let n = gs * hw;
        let mut out = vec![S::zero(); c * hw];
        let mut aux = Vec::with_capacity(2 * groups);
        for g in 0..groups {
            let base = g * gs * hw;
            let xs = &vx.data[base..base + n];
            let mean = xs.iter().fold(S::zero(), |a, &v| a + v) / S::fp(n as f64);
            let var = xs.iter().fold(S::zero(), |a, &v| a + (v - mean) * (v - mean))
                / S::fp(n as f64);
            let inv = S::one() / (var + S::fp(GN_EPS)).sqrt();
            aux.push(mean);
            aux.push(inv);
            for local_c in 0..gs {
                let ch = g * gs + local_c;
                let (ga, be) = (vg.data[ch], vb.data[ch]);
                for i in 0..hw {
                    let idx = ch * hw + i;
                    out[idx] = ga * (vx.data[idx] - mean) * inv + be;
                }
            }
        }
        self.push(
            Op::GroupNorm { groups },
            vec![x, gamma, beta],
            Tensor { shape: vec![c, h, w], data: out },
            aux,
        )
    }

    /// Fused scaled-dot-product attention with row softmax. Zero keys is
    /// legal and yields a zero context.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId) -> NodeId {
        let (vq, vk, vv) = (&self.nodes[q].value, &self.nodes[k].value, &self.nodes[v].value);
        let (n, dk) = (vq.shape[0], vq.shape[1]);
        let (l, dk2) = (vk.shape[0], vk.shape[1]);
        let (l2, dv) = (vv.shape[0], vv.shape[1]);
        assert_eq!(dk, dk2, "q/k width mismatch");
        assert_eq!(l, l2, "k/v length mismatch");
        if l == 0 {
            return self.push(
                Op::Attention,
                vec![q, k, v],
                Tensor::zeros(&[n, dv]),
                vec![],
            );
        }
        let scale = S::fp(1.0 / (dk as f64).sqrt());
        // A = softmax(q k^T * scale), stored row-major (n, l) in aux.
        let mut a = vec![S::zero(); n * l];
        for i in 0..n {
            let qrow = &vq.data[i * dk..(i + 1) * dk];
            let arow = &mut a[i * l..(i + 1) * l];
            for (j, slot) in arow.iter_mut().enumerate() {
                let krow = &vk.data[j * dk..(j + 1) * dk];
                let mut s = S::zero();
                for (&qa, &kb) in qrow.iter().zip(krow) {
                    s = s + qa * kb;
                }
                *slot = s * scale;
            }
            let max = arow.iter().fold(S::neg_infinity(), |m, &v| if v > m { v } else { m });
            let mut z = S::zero();
            for v in arow.iter_mut() {
                *v = (*v - max).exp();
                z = z + *v;
            }
            for v in arow.iter_mut() {
                *v = *v / z;
            }
        }
        let mut out = vec![S::zero(); n * dv];
        for i in 0..n {
            let arow = &a[i * l..(i + 1) * l];
            let orow = &mut out[i * dv..(i + 1) * dv];
            for (j, &aij) in arow.iter().enumerate() {
                let vrow = &vv.data[j * dv..(j + 1) * dv];
                for (o, &vb) in orow.iter_mut().zip(vrow) {
                    *o = *o + aij * vb;
                }
            }
        }
        self.push(Op::Attention, vec![q, k, v], Tensor { shape: vec![n, dv], data: out }, a)
    }

    pub fn embed_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let vt = &self.nodes[table].value;
        let (vocab, d) = (vt.shape[0], vt.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < vocab, "embedding id {id} out of range {vocab}");
            data.extend_from_slice(&vt.data[id * d..(id + 1) * d]);
        }
        self.push(
            Op::EmbedRows { ids: ids.to_vec() },
            vec![table],
            Tensor { shape: vec![ids.len(), d], data },
            vec![],
        )
    }

    /// Counted-bag mean of table rows: sum(count * row) / len, iterating ids
    /// in ascending order so the result is exactly permutation invariant.
    pub fn bag_mean(&mut self, table: NodeId, counts: &[(usize, usize)], len: usize) -> NodeId {
        let vt = &self.nodes[table].value;
        let (vocab, d) = (vt.shape[0], vt.shape[1]);
        debug_assert!(counts.windows(2).all(|w| w[0].0 < w[1].0), "counts must ascend");
        debug_assert_eq!(counts.iter().map(|c| c.1).sum::<usize>(), len, "count total");
        let mut data = vec![S::zero(); d];
        if len > 0 {
            let inv = S::fp(1.0 / len as f64);
            for &(id, count) in counts {
                assert!(id < vocab, "bag id {id} out of range {vocab}");
                let row = &vt.data[id * d..(id + 1) * d];
                let k = S::fp(count as f64) * inv;
                for (o, &r) in data.iter_mut().zip(row) {
                    *o = *o + k * r;
                }
            }
        }
        self.push(
            Op::BagMean { counts: counts.to_vec(), len },
            vec![table],
            Tensor { shape: vec![1, d], data },
            vec![],
        )
    }

    pub fn add_grid_pos(&mut self, x: NodeId, row: NodeId, col: NodeId, h: usize, w: usize) -> NodeId {
        let (vx, vr, vc) = (&self.nodes[x].value, &self.nodes[row].value, &self.nodes[col].value);
        let (n, c) = (vx.shape[0], vx.shape[1]);
        assert_eq!(n, h * w, "grid positions do not tile the rows");
        assert_eq!(vr.shape, vec![h, c], "row table shape");
        assert_eq!(vc.shape, vec![w, c], "col table shape");
        let mut data = vx.data.clone();
        for i in 0..n {
            let (r, cl) = (i / w, i % w);
            for ch in 0..c {
                data[i * c + ch] = data[i * c + ch] + vr.data[r * c + ch] + vc.data[cl * c + ch];
            }
        }
        self.push(
            Op::AddGridPos { h, w },
            vec![x, row, col],
            Tensor { shape: vec![n, c], data },
            vec![],
        )
    }

    pub fn concat_chan(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (c1, h, w) = chw(&va.shape);
        let (c2, h2, w2) = chw(&vb.shape);
        assert_eq!((h, w), (h2, w2), "concat spatial mismatch");
        let mut data = Vec::with_capacity((c1 + c2) * h * w);
        data.extend_from_slice(&va.data);
        data.extend_from_slice(&vb.data);
        self.push(
            Op::ConcatChan,
            vec![a, b],
            Tensor { shape: vec![c1 + c2, h, w], data },
            vec![],
        )
    }

    pub fn spatial_to_rows(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x].value;
        let (c, h, w) = chw(&vx.shape);
        let hw = h * w;
        let mut data = vec![S::zero(); c * hw];
        for ch in 0..c {
            for i in 0..hw {
                data[i * c + ch] = vx.data[ch * hw + i];
            }
        }
        self.push(Op::SpatialToRows, vec![x], Tensor { shape: vec![hw, c], data }, vec![])
    }

    pub fn rows_to_spatial(&mut self, x: NodeId, c: usize, h: usize, w: usize) -> NodeId {
        let vx = &self.nodes[x].value;
        assert_eq!(vx.shape, vec![h * w, c], "rows shape mismatch");
        let hw = h * w;
        let mut data = vec![S::zero(); c * hw];
        for i in 0..hw {
            for ch in 0..c {
                data[ch * hw + i] = vx.data[i * c + ch];
            }
        }
        self.push(
            Op::RowsToSpatial { c, h, w },
            vec![x],
            Tensor { shape: vec![c, h, w], data },
            vec![],
        )
    }

    pub fn mean_square(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x].value;
        let n = vx.data.len();
        let sum = vx.data.iter().fold(S::zero(), |a, &v| a + v * v);
        let val = sum / S::fp(n as f64);
        self.push(Op::MeanSquare, vec![x], Tensor { shape: vec![1], data: vec![val] }, vec![])
    }

    /// Reverse sweep from `root`, seeded with dL/d(root) = `seed`. Returns
    /// gradients for every `Param` leaf reachable from the root.
    pub fn backward(&self, root: NodeId, seed: &[S]) -> GradStore<S> {
        assert_eq!(seed.len(), self.nodes[root].value.data.len(), "seed shape mismatch");
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[root] = Some(seed.to_vec());
        let mut store = GradStore::new();
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Param(name) => match store.get_mut(name) {
                    Some(slot) => {
                        for (a, b) in slot.iter_mut().zip(&g) {
                            *a = *a + *b;
                        }
                    }
                    None => {
                        store.insert(name.clone(), g);
                    }
                },
                Op::Add => {
                    self.accum(&mut grads, node.inputs[0], &g);
                    self.accum(&mut grads, node.inputs[1], &g);
                }
                Op::Mul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let da: Vec<S> =
                        g.iter().zip(&self.nodes[b].value.data).map(|(&gv, &bv)| gv * bv).collect();
                    let db: Vec<S> =
                        g.iter().zip(&self.nodes[a].value.data).map(|(&gv, &av)| gv * av).collect();
                    self.accum(&mut grads, a, &da);
                    self.accum(&mut grads, b, &db);
                }
                Op::Scale(c) => {
                    let k = S::fp(*c);
                    let dx: Vec<S> = g.iter().map(|&gv| gv * k).collect();
                    self.accum(&mut grads, node.inputs[0], &dx);
                }
                Op::AddRowBias => {
                    let d = self.nodes[node.inputs[1]].value.shape[1];
                    let mut db = vec![S::zero(); d];
                    for row in g.chunks_exact(d) {
                        for (s, &gv) in db.iter_mut().zip(row) {
                            *s = *s + gv;
                        }
                    }
                    self.accum(&mut grads, node.inputs[0], &g);
                    self.accum(&mut grads, node.inputs[1], &db);
                }
                Op::AddChanBias => {
                    let (c, h, w) = chw(&self.nodes[node.inputs[0]].value.shape);
                    let hw = h * w;
                    let mut db = vec![S::zero(); c];
                    for ch in 0..c {
                        let mut s = S::zero();
                        for &gv in &g[ch * hw..(ch + 1) * hw] {
                            s = s + gv;
                        }
                        db[ch] = s;
                    }
                    self.accum(&mut grads, node.inputs[0], &g);
                    self.accum(&mut grads, node.inputs[1], &db);
                }
                Op::Matmul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                    let (n, k) = (va.shape[0], va.shape[1]);
                    let m = vb.shape[1];
                    let mut da = vec![S::zero(); n * k];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        let darow = &mut da[i * k..(i + 1) * k];
                        for (p, slot) in darow.iter_mut().enumerate() {
                            let brow = &vb.data[p * m..(p + 1) * m];
                            let mut s = S::zero();
                            for (&gv, &bv) in grow.iter().zip(brow) {
                                s = s + gv * bv;
                            }
                            *slot = s;
                        }
                    }
                    let mut db = vec![S::zero(); k * m];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let aip = va.data[i * k + p];
                            let dbrow = &mut db[p * m..(p + 1) * m];
                            for (s, &gv) in dbrow.iter_mut().zip(grow) {
                                *s = *s + aip * gv;
                            }
                        }
                    }
                    self.accum(&mut grads, a, &da);
                    self.accum(&mut grads, b, &db);
                }
                Op::Conv2d { stride } => {
                    let (x, w) = (node.inputs[0], node.inputs[1]);
                    let (dx, dw) = self.conv2d_backward(x, w, *stride, &g);
                    self.accum(&mut grads, x, &dx);
                    self.accum(&mut grads, w, &dw);
                }
                Op::ConvT2d => {
                    let (x, w) = (node.inputs[0], node.inputs[1]);
                    let (dx, dw) = self.conv_transpose_backward(x, w, &g);
                    self.accum(&mut grads, x, &dx);
                    self.accum(&mut grads, w, &dw);
                }
                Op::Silu => {
                    let vx = &self.nodes[node.inputs[0]].value;
                    let dx: Vec<S> = vx
                        .data
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gv)| {
                            let s = S::one() / (S::one() + (-v).exp());
                            gv * s * (S::one() + v * (S::one() - s))
                        })
                        .collect();
                    self.accum(&mut grads, node.inputs[0], &dx);
                }
                Op::GroupNorm { groups } => {
                    let (x, ga, be) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                    let (dx, dg, db) = self.group_norm_backward(x, ga, *groups, &node.aux, &g);
                    self.accum(&mut grads, x, &dx);
                    self.accum(&mut grads, ga, &dg);
                    self.accum(&mut grads, be, &db);
                }
                Op::Attention => {
                    let (q, k, v) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                    let l = self.nodes[k].value.shape[0];
                    if l == 0 {
                        continue;
                    }
                    let (dq, dk, dv) = self.attention_backward(q, k, v, &node.aux, &g);
                    self.accum(&mut grads, q, &dq);
                    self.accum(&mut grads, k, &dk);
                    self.accum(&mut grads, v, &dv);
                }
                Op::EmbedRows { ids } => {
                    let vt = &self.nodes[node.inputs[0]].value;
                    let d = vt.shape[1];
                    let mut dt = vec![S::zero(); vt.data.len()];
                    for (row, &id) in ids.iter().enumerate() {
                        let grow = &g[row * d..(row + 1) * d];
                        let trow = &mut dt[id * d..(id + 1) * d];
                        for (s, &gv) in trow.iter_mut().zip(grow) {
                            *s = *s + gv;
                        }
                    }
                    self.accum(&mut grads, node.inputs[0], &dt);
                }
                Op::BagMean { counts, len } => {
                    let vt = &self.nodes[node.inputs[0]].value;
                    let d = vt.shape[1];
                    let mut dt = vec![S::zero(); vt.data.len()];
                    if *len > 0 {
                        let inv = S::fp(1.0 / *len as f64);
                        for &(id, count) in counts {
                            let k = S::fp(count as f64) * inv;
                            let trow = &mut dt[id * d..(id + 1) * d];
                            for (s, &gv) in trow.iter_mut().zip(&g) {
                                *s = *s + k * gv;
                            }
                        }
                    }
                    self.accum(&mut grads, node.inputs[0], &dt);
                }
                Op::AddGridPos { h, w } => {
                    let c = self.nodes[node.inputs[0]].value.shape[1];
                    let mut drow = vec![S::zero(); h * c];
                    let mut dcol = vec![S::zero(); w * c];
                    for i in 0..h * w {
                        let (r, cl) = (i / w, i % w);
                        let grow = &g[i * c..(i + 1) * c];
                        for ch in 0..c {
                            drow[r * c + ch] = drow[r * c + ch] + grow[ch];
                            dcol[cl * c + ch] = dcol[cl * c + ch] + grow[ch];
                        }
                    }
                    self.accum(&mut grads, node.inputs[0], &g);
                    self.accum(&mut grads, node.inputs[1], &drow);
                    self.accum(&mut grads, node.inputs[2], &dcol);
                }
                Op::ConcatChan => {
                    let n1 = self.nodes[node.inputs[0]].value.data.len();
                    self.accum(&mut grads, node.inputs[0], &g[..n1]);
                    self.accum(&mut grads, node.inputs[1], &g[n1..]);
                }
                Op::SpatialToRows => {
                    let (c, h, w) = chw(&self.nodes[node.inputs[0]].value.shape);
                    let hw = h * w;
                    let mut dx = vec![S::zero(); c * hw];
                    for ch in 0..c {
                        for i in 0..hw {
                            dx[ch * hw + i] = g[i * c + ch];
                        }
                    }
                    self.accum(&mut grads, node.inputs[0], &dx);
                }
                Op::RowsToSpatial { c, h, w } => {
                    let hw = h * w;
                    let mut dx = vec![S::zero(); hw * c];
                    for i in 0..hw {
                        for ch in 0..*c {
                            dx[i * c + ch] = g[ch * hw + i];
                        }
                    }
                    self.accum(&mut grads, node.inputs[0], &dx);
                }
                Op::MeanSquare => {
                    let vx = &self.nodes[node.inputs[0]].value;
                    let k = g[0] * S::fp(2.0 / vx.data.len() as f64);
                    let dx: Vec<S> = vx.data.iter().map(|&v| v * k).collect();
                    self.accum(&mut grads, node.inputs[0], &dx);
                }
            }
        }
        store
    }

    fn accum(&self, grads: &mut [Option<Vec<S>>], id: NodeId, delta: &[S]) {
        match &mut grads[id] {
            Some(slot) => {
                debug_assert_eq!(slot.len(), delta.len());
                for (a, &b) in slot.iter_mut().zip(delta) {
                    *a = *a + b;
                }
            }
            None => grads[id] = Some(delta.to_vec()),
        }
    }

    fn conv2d_backward(&self, x: NodeId, w: NodeId, stride: usize, g: &[S]) -> (Vec<S>, Vec<S>) {
        let (vx, vw) = (&self.nodes[x].value, &self.nodes[w].value);
        let (ci, h, wd) = chw(&vx.shape);
        let co = vw.shape[0];
        let (ho, wo) = ((h - 1) / stride + 1, (wd - 1) / stride + 1);
        let mut dx = vec![S::zero(); ci * h * wd];
        let mut dw = vec![S::zero(); vw.data.len()];
        for oc in 0..co {
            let gplane = &g[oc * ho * wo..(oc + 1) * ho * wo];
            for ic in 0..ci {
                let wk = &vw.data[(oc * ci + ic) * 9..(oc * ci + ic) * 9 + 9];
                let dwk = (oc * ci + ic) * 9;
                let xplane = &vx.data[ic * h * wd..(ic + 1) * h * wd];
                let dxplane = &mut dx[ic * h * wd..(ic + 1) * h * wd];
                for yo in 0..ho {
                    let grow = &gplane[yo * wo..(yo + 1) * wo];
                    for ky in 0..3usize {
                        let yi = (yo * stride + ky) as isize - 1;
                        if yi < 0 || yi >= h as isize {
                            continue;
                        }
                        let xrow = &xplane[yi as usize * wd..(yi as usize + 1) * wd];
                        let dxrow = &mut dxplane[yi as usize * wd..(yi as usize + 1) * wd];
                        for kx in 0..3usize {
                            let (lo, hi) = conv_x_range(kx, stride, wd, wo);
                            if lo > hi {
                                continue;
                            }
                            // dW: correlation of upstream grad with input.
                            let mut acc = S::zero();
                            if stride == 1 {
                                for xo in lo..=hi {
                                    acc = acc + grow[xo] * xrow[xo + kx - 1];
                                }
                            } else {
                                for xo in lo..=hi {
                                    acc = acc + grow[xo] * xrow[xo * stride + kx - 1];
                                }
                            }
                            dw[dwk + ky * 3 + kx] = dw[dwk + ky * 3 + kx] + acc;
                            // dX: scatter upstream grad through the kernel.
                            let wv = wk[ky * 3 + kx];
                            if stride == 1 {
                                for xo in lo..=hi {
                                    dxrow[xo + kx - 1] = dxrow[xo + kx - 1] + wv * grow[xo];
                                }
                            } else {
                                for xo in lo..=hi {
                                    dxrow[xo * stride + kx - 1] =
                                        dxrow[xo * stride + kx - 1] + wv * grow[xo];
                                }
                            }
                        }
                    }
                }
            }
        }
        (dx, dw)
    }

    fn conv_transpose_backward(&self, x: NodeId, w: NodeId, g: &[S]) -> (Vec<S>, Vec<S>) {
        let (vx, vw) = (&self.nodes[x].value, &self.nodes[w].value);
        let (ci, h, wd) = chw(&vx.shape);
        let co = vw.shape[1];
        let (ho, wo) = (2 * h, 2 * wd);
        let mut dx = vec![S::zero(); ci * h * wd];
        let mut dw = vec![S::zero(); vw.data.len()];
        for ic in 0..ci {
            let xplane = &vx.data[ic * h * wd..(ic + 1) * h * wd];
            let dxplane = &mut dx[ic * h * wd..(ic + 1) * h * wd];
            for oc in 0..co {
                let wk = &vw.data[(ic * co + oc) * 4..(ic * co + oc) * 4 + 4];
                let dwk = (ic * co + oc) * 4;
                let gplane = &g[oc * ho * wo..(oc + 1) * ho * wo];
                for y in 0..h {
                    let xrow = &xplane[y * wd..(y + 1) * wd];
                    let dxrow = &mut dxplane[y * wd..(y + 1) * wd];
                    for ky in 0..2usize {
                        let grow = &gplane[(2 * y + ky) * wo..(2 * y + ky + 1) * wo];
                        for kx in 0..2usize {
                            let wv = wk[ky * 2 + kx];
                            let mut acc = S::zero();
                            for xx in 0..wd {
                                let gv = grow[2 * xx + kx];
                                dxrow[xx] = dxrow[xx] + wv * gv;
                                acc = acc + xrow[xx] * gv;
                            }
                            dw[dwk + ky * 2 + kx] = dw[dwk + ky * 2 + kx] + acc;
                        }
                    }
                }
            }
        }
        (dx, dw)
    }

    fn group_norm_backward(
        &self,
        x: NodeId,
        gamma: NodeId,
        groups: usize,
        aux: &[S],
        g: &[S],
    ) -> (Vec<S>, Vec<S>, Vec<S>) {
        let vx = &self.nodes[x].value;
        let vg = &self.nodes[gamma].value;
        let (c, h, w) = chw(&vx.shape);
        let gs = c / groups;
        let hw = h * w;
        let n = gs * hw;
        let n_s = S::fp(n as f64);
        let mut dx = vec![S::zero(); c * hw];
        let mut dgamma = vec![S::zero(); c];
        let mut dbeta = vec![S::zero(); c];
        for grp in 0..groups {
            let (mean, inv) = (aux[2 * grp], aux[2 * grp + 1]);
            // First pass: per-channel gamma/beta grads and group sums.
            let mut sum1 = S::zero();
            let mut sum2 = S::zero();
            for local in 0..gs {
                let ch = grp * gs + local;
                let ga = vg.data[ch];
                let mut dg_c = S::zero();
                let mut db_c = S::zero();
                for i in 0..hw {
                    let idx = ch * hw + i;
                    let xhat = (vx.data[idx] - mean) * inv;
                    let gv = g[idx];
                    dg_c = dg_c + gv * xhat;
                    db_c = db_c + gv;
                    let dxhat = gv * ga;
                    sum1 = sum1 + dxhat;
                    sum2 = sum2 + dxhat * xhat;
                }
                dgamma[ch] = dg_c;
                dbeta[ch] = db_c;
            }
            // Second pass: dx = inv * (dxhat - sum1/N - xhat * sum2/N).
            for local in 0..gs {
                let ch = grp * gs + local;
                let ga = vg.data[ch];
                for i in 0..hw {
                    let idx = ch * hw + i;
                    let xhat = (vx.data[idx] - mean) * inv;
                    let dxhat = g[idx] * ga;
                    dx[idx] = inv * (dxhat - sum1 / n_s - xhat * sum2 / n_s);
                }
            }
        }
        (dx, dgamma, dbeta)
    }

    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        a: &[S],
        g: &[S],
    ) -> (Vec<S>, Vec<S>, Vec<S>) {
        let (vq, vk, vv) = (&self.nodes[q].value, &self.nodes[k].value, &self.nodes[v].value);
        let (n, dk) = (vq.shape[0], vq.shape[1]);
        let (l, dv) = (vv.shape[0], vv.shape[1]);
        let scale = S::fp(1.0 / (dk as f64).sqrt());
        let mut dq = vec![S::zero(); n * dk];
        let mut dkm = vec![S::zero(); l * dk];
        let mut dvm = vec![S::zero(); l * dv];
        let mut ds_row = vec![S::zero(); l];
        for i in 0..n {
            let arow = &a[i * l..(i + 1) * l];
            let grow = &g[i * dv..(i + 1) * dv];
            // dV += A^T g ; dA = g V^T.
            let mut dot = S::zero();
            for j in 0..l {
                let vrow = &vv.data[j * dv..(j + 1) * dv];
                let dvrow = &mut dvm[j * dv..(j + 1) * dv];
                let mut da_ij = S::zero();
                for (idx, &gv) in grow.iter().enumerate() {
                    dvrow[idx] = dvrow[idx] + arow[j] * gv;
                    da_ij = da_ij + gv * vrow[idx];
                }
                ds_row[j] = da_ij;
                dot = dot + da_ij * arow[j];
            }
            // Softmax jacobian: dS = A * (dA - <dA, A>).
            for j in 0..l {
                ds_row[j] = arow[j] * (ds_row[j] - dot);
            }
            // dQ_i += sum_j dS_ij K_j * scale ; dK_j += dS_ij Q_i * scale.
            let qrow = &vq.data[i * dk..(i + 1) * dk];
            let dqrow = &mut dq[i * dk..(i + 1) * dk];
            for j in 0..l {
                let s = ds_row[j] * scale;
                let krow = &vk.data[j * dk..(j + 1) * dk];
                let dkrow = &mut dkm[j * dk..(j + 1) * dk];
                for idx in 0..dk {
                    dqrow[idx] = dqrow[idx] + s * krow[idx];
                    dkrow[idx] = dkrow[idx] + s * qrow[idx];
                }
            }
        }
        (dq, dkm, dvm)
    }
}

fn chw(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected (c,h,w), got {shape:?}");
    (shape[0], shape[1], shape[2])
}

/// Valid output-column range for kernel column `kx`: all xo with
/// 0 <= xo*stride + kx - 1 < input width.
fn conv_x_range(kx: usize, stride: usize, w_in: usize, w_out: usize) -> (usize, usize) {
    let lo = if kx == 0 { 1usize.div_ceil(stride) } else { 0 };
    let hi = ((w_in - kx) / stride).min(w_out.saturating_sub(1));
    (lo, hi)
}

/// orow[xo] += wv * xrow[xo*stride + kx - 1] over the valid range.
fn conv_row_acc<S: Scalar>(orow: &mut [S], xrow: &[S], wv: S, kx: usize, stride: usize, w_in: usize) {
    let (lo, hi) = conv_x_range(kx, stride, w_in, orow.len());
    if lo > hi {
        return;
    }
    if stride == 1 {
        // Contiguous: offset = kx - 1 with kx >= 0; lo guards kx = 0.
        let src = &xrow[lo + kx - 1..=hi + kx - 1];
        for (o, &xv) in orow[lo..=hi].iter_mut().zip(src) {
            *o = *o + wv * xv;
        }
    } else {
        for xo in lo..=hi {
            orow[xo] = orow[xo] + wv * xrow[xo * stride + kx - 1];
        }
    }
}
