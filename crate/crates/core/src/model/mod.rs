//! Encoder-only transformer for fixed-geometry arithmetic sequences.
//!
//! Tokens are embedded (plus a learned absolute position table under APE),
//! layer-normalized, passed through `depth` post-LN encoder layers and
//! truncated to the first `n_out` positions, each of which is classified over
//! the 15-token vocabulary. Under RPE the position signal enters only the
//! attention scores, through offset tables clipped at `k_clip` and shared by
//! all heads of a layer.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::engine::{Graph, Scalar, Tensor, Var};
use crate::rng::{stream_rng, Rng, Stream};
use crate::taskgen::{TokenId, S_VOCAB};

pub use checkpoint::{
    checkpoint_bytes, checkpoint_bytes_with_meta, load_checkpoint, load_checkpoint_with_meta, parse_checkpoint,
    parse_checkpoint_with_meta, save_checkpoint, save_checkpoint_with_meta, CheckpointError, Metadata,
    CHECKPOINT_VERSION,
};

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input length {len} is shorter than n_out = {n_out}")]
    InputTooShort { len: usize, n_out: usize },
    #[error("input length {len} exceeds the position table ({max_positions})")]
    InputTooLong { len: usize, max_positions: usize },
    #[error("token id {0} out of range")]
    TokenOutOfRange(usize),
    #[error("{ids} token ids do not split into a batch of {batch}")]
    BatchShape { ids: usize, batch: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PeKind {
    /// Learned absolute position table added to the token embeddings.
    Ape,
    /// Relative offsets on the key side of the attention scores.
    RpeK,
    /// Relative offsets on both key and query sides.
    RpeKq,
}

impl PeKind {
    pub fn name(self) -> &'static str {
        match self {
            PeKind::Ape => "ape",
            PeKind::RpeK => "rpe_k",
            PeKind::RpeKq => "rpe_kq",
        }
    }

    pub fn is_relative(self) -> bool {
        self != PeKind::Ape
    }
}

impl fmt::Display for PeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PeKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ape" => Ok(PeKind::Ape),
            "rpe_k" => Ok(PeKind::RpeK),
            "rpe_kq" => Ok(PeKind::RpeKq),
            _ => Err(ModelError::InvalidConfig(format!("unknown position embedding {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizePreset {
    Base,
    Standard,
    Large,
}

impl SizePreset {
    /// (depth, d_model, heads)
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            SizePreset::Base => (6, 512, 8),
            SizePreset::Standard => (6, 1024, 16),
            SizePreset::Large => (10, 1024, 16),
        }
    }
}

impl fmt::Display for SizePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SizePreset::Base => "base",
            SizePreset::Standard => "standard",
            SizePreset::Large => "large",
        })
    }
}

impl FromStr for SizePreset {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" | "B" => Ok(SizePreset::Base),
            "standard" | "S" => Ok(SizePreset::Standard),
            "large" | "L" => Ok(SizePreset::Large),
            _ => Err(ModelError::InvalidConfig(format!("unknown model size {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub pe_kind: PeKind,
    /// One parameter set applied `depth` times.
    pub shared_layers: bool,
    pub k_clip: usize,
    /// One relative table pair for the whole stack instead of one per layer.
    pub shared_rel_tables: bool,
    pub max_positions: usize,
    pub s_vocab: usize,
    pub n_out: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(
        depth: usize,
        d_model: usize,
        heads: usize,
        pe_kind: PeKind,
        max_positions: usize,
        n_out: usize,
    ) -> Self {
        ModelConfig {
            depth,
            d_model,
            heads,
            ffn_mult: 4,
            pe_kind,
            shared_layers: false,
            k_clip: 16,
            shared_rel_tables: false,
            max_positions,
            s_vocab: S_VOCAB,
            n_out,
            dropout: 0.0,
        }
    }

    pub fn from_preset(size: SizePreset, pe_kind: PeKind, max_positions: usize, n_out: usize) -> Self {
        let (depth, d_model, heads) = size.dims();
        Self::new(depth, d_model, heads, pe_kind, max_positions, n_out)
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn d_ffn(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.depth == 0 || self.d_model == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return bad("depth, d_model, heads and ffn_mult must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.s_vocab != S_VOCAB {
            return bad(format!("s_vocab must be {S_VOCAB}, got {}", self.s_vocab));
        }
        if self.n_out == 0 || self.n_out > self.max_positions {
            return bad(format!("n_out {} must be in 1..=max_positions ({})", self.n_out, self.max_positions));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count.
    ///
    /// ```text
    /// embeddings  V·d + 2d (+ P·d under APE)
    /// layer       4(d² + d) + 2·d·f + f + d + 4d (+ R·d_head per relative table)
    /// classifier  d·V + V
    /// ```
    /// with `f = ffn_mult·d`, `R = 2·k_clip + 1`, one relative table under
    /// RPE_k and two under RPE_kq, and a single layer when layers are shared.
    pub fn parameter_count(&self) -> usize {
        let (d, v, f) = (self.d_model, self.s_vocab, self.d_ffn());
        let mut embed = v * d + 2 * d;
        if self.pe_kind == PeKind::Ape {
            embed += self.max_positions * d;
        }
        let layer = 4 * (d * d + d) + 2 * d * f + f + d + 4 * d;
        let tables = match self.pe_kind {
            PeKind::Ape => 0,
            PeKind::RpeK => 1,
            PeKind::RpeKq => 2,
        };
        let rel = tables * (2 * self.k_clip + 1) * self.d_head();
        let stacks = if self.shared_layers { 1 } else { self.depth };
        let rel_total = if self.shared_rel_tables { rel } else { rel * stacks };
        embed + stacks * layer + rel_total + d * v + v
    }
}

/// What a parameter tensor is, for weight-decay selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Matrix,
    Bias,
    Norm,
    Position,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Embedding | ParamKind::Matrix)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_g: usize,
    ln2_b: usize,
    rel_k: Option<usize>,
    rel_q: Option<usize>,
}

/// Index of every logical tensor in the flat parameter list.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    tok: usize,
    pos: Option<usize>,
    emb_ln_g: usize,
    emb_ln_b: usize,
    layers: Vec<LayerIdx>,
    cls_w: usize,
    cls_b: usize,
}

/// Name, kind and shape of each parameter, in canonical order.
pub type ParamSpec = (String, ParamKind, Vec<usize>);

fn layout(c: &ModelConfig) -> (Layout, Vec<ParamSpec>) {
    let mut specs: Vec<ParamSpec> = Vec::new();
    let mut add = |name: String, kind: ParamKind, shape: Vec<usize>| {
        specs.push((name, kind, shape));
        specs.len() - 1
    };
    let (d, f, r) = (c.d_model, c.d_ffn(), 2 * c.k_clip + 1);
    let tok = add("embeddings.token".into(), ParamKind::Embedding, vec![c.s_vocab, d]);
    let pos = (c.pe_kind == PeKind::Ape)
        .then(|| add("embeddings.position".into(), ParamKind::Position, vec![c.max_positions, d]));
    let emb_ln_g = add("embeddings.norm.gamma".into(), ParamKind::Norm, vec![d]);
    let emb_ln_b = add("embeddings.norm.beta".into(), ParamKind::Norm, vec![d]);

    let rel_tables = |add: &mut dyn FnMut(String, ParamKind, Vec<usize>) -> usize, prefix: &str| {
        let rk =
            c.pe_kind.is_relative().then(|| add(format!("{prefix}.rel_k"), ParamKind::Position, vec![r, c.d_head()]));
        let rq = (c.pe_kind == PeKind::RpeKq)
            .then(|| add(format!("{prefix}.rel_q"), ParamKind::Position, vec![r, c.d_head()]));
        (rk, rq)
    };
    let shared_rel = if c.shared_rel_tables { Some(rel_tables(&mut add, "encoder")) } else { None };

    let stacks = if c.shared_layers { 1 } else { c.depth };
    let mut distinct = Vec::with_capacity(stacks);
    for l in 0..stacks {
        let p = format!("layers.{l}");
        let mut m = |s: &str, kind, shape| add(format!("{p}.{s}"), kind, shape);
        let mut idx = LayerIdx {
            wq: m("attn.wq", ParamKind::Matrix, vec![d, d]),
            bq: m("attn.bq", ParamKind::Bias, vec![d]),
            wk: m("attn.wk", ParamKind::Matrix, vec![d, d]),
            bk: m("attn.bk", ParamKind::Bias, vec![d]),
            wv: m("attn.wv", ParamKind::Matrix, vec![d, d]),
            bv: m("attn.bv", ParamKind::Bias, vec![d]),
            wo: m("attn.wo", ParamKind::Matrix, vec![d, d]),
            bo: m("attn.bo", ParamKind::Bias, vec![d]),
            ln1_g: m("attn_norm.gamma", ParamKind::Norm, vec![d]),
            ln1_b: m("attn_norm.beta", ParamKind::Norm, vec![d]),
            w1: m("ffn.w1", ParamKind::Matrix, vec![d, f]),
            b1: m("ffn.b1", ParamKind::Bias, vec![f]),
            w2: m("ffn.w2", ParamKind::Matrix, vec![f, d]),
            b2: m("ffn.b2", ParamKind::Bias, vec![d]),
            ln2_g: m("ffn_norm.gamma", ParamKind::Norm, vec![d]),
            ln2_b: m("ffn_norm.beta", ParamKind::Norm, vec![d]),
            rel_k: None,
            rel_q: None,
        };
        let (rk, rq) = match shared_rel {
            Some(t) => t,
            None => rel_tables(&mut add, &p),
        };
        idx.rel_k = rk;
        idx.rel_q = rq;
        distinct.push(idx);
    }
    let layers = (0..c.depth).map(|l| distinct[if c.shared_layers { 0 } else { l }].clone()).collect();
    let cls_w = add("classifier.w".into(), ParamKind::Matrix, vec![d, c.s_vocab]);
    let cls_b = add("classifier.b".into(), ParamKind::Bias, vec![c.s_vocab]);
    (Layout { tok, pos, emb_ln_g, emb_ln_b, layers, cls_w, cls_b }, specs)
}

/// Parameter specs for a config, in canonical order.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    layout(config).1
}

/// Offset index `clip(j - i) + k_clip` into a relative table.
pub fn rel_offset(i: usize, j: usize, k_clip: usize) -> usize {
    let k = k_clip as isize;
    ((j as isize - i as isize).clamp(-k, k) + k) as usize
}

/// Pre-softmax scores of one attention head, `[len × len]` row-major.
///
/// `q` and `k` are `[len × d_head]`; `rel_k`/`rel_q` are `[(2·k_clip+1) × d_head]`.
#[allow(clippy::too_many_arguments)]
pub fn attention_scores<T: Scalar>(
    q: &[T],
    k: &[T],
    len: usize,
    d_head: usize,
    pe_kind: PeKind,
    rel_k: Option<&[T]>,
    rel_q: Option<&[T]>,
    k_clip: usize,
) -> Vec<T> {
    let dot = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>();
    fn row<T>(m: &[T], i: usize, d_head: usize) -> &[T] {
        &m[i * d_head..(i + 1) * d_head]
    }
    let scale = T::from_f64(1.0 / (d_head as f64).sqrt());
    let mut out = Vec::with_capacity(len * len);
    for i in 0..len {
        for j in 0..len {
            let o = rel_offset(i, j, k_clip);
            let mut s = dot(row(q, i, d_head), row(k, j, d_head));
            if pe_kind.is_relative() {
                s += dot(row(q, i, d_head), row(rel_k.expect("rel_k table"), o, d_head));
            }
            if pe_kind == PeKind::RpeKq {
                s += dot(row(k, j, d_head), row(rel_q.expect("rel_q table"), o, d_head));
            }
            out.push(s * scale);
        }
    }
    out
}

/// Graph handles produced by a forward pass.
pub struct ForwardOutput {
    /// `[batch, n_out, s_vocab]`
    pub logits: Var,
    /// One handle per parameter, in canonical order.
    pub params: Vec<Var>,
    /// Per layer, scaled pre-softmax scores `[batch·heads, len, len]`.
    pub scores: Vec<Var>,
    /// Per layer, output of the final layer norm `[batch, len, d_model]`.
    pub hidden: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub params: Vec<Param<T>>,
    layout: Layout,
}

/// Gaussian(0, 0.02²) weights, zero biases, unit layer-norm scales.
pub fn init_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>, ModelError> {
    config.validate()?;
    let (layout, specs) = layout(config);
    let mut rng = stream_rng(seed, Stream::Init);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let params = specs
        .into_iter()
        .map(|(name, kind, shape)| {
            let n: usize = shape.iter().product();
            let data: Vec<T> = match kind {
                ParamKind::Bias => vec![T::ZERO; n],
                ParamKind::Norm if name.ends_with("gamma") => vec![T::ONE; n],
                ParamKind::Norm => vec![T::ZERO; n],
                _ => (0..n).map(|_| T::from_f64(normal.sample(&mut rng))).collect(),
            };
            Param { name, kind, tensor: Tensor::from_vec(shape, data) }
        })
        .collect();
    Ok(ModelParams { config: config.clone(), params, layout })
}

impl<T: Scalar> ModelParams<T> {
    pub(crate) fn from_parts(config: ModelConfig, params: Vec<Param<T>>) -> Self {
        let (layout, _) = layout(&config);
        ModelParams { config, params, layout }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), kind: p.kind, tensor: p.tensor.cast() })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            buf.clear();
            p.tensor.data().iter().for_each(|v| v.to_le_bytes_vec(&mut buf));
            h.update(&buf);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_input(&self, ids: &[TokenId], batch: usize) -> Result<usize, ModelError> {
        if batch == 0 || !ids.len().is_multiple_of(batch) {
            return Err(ModelError::BatchShape { ids: ids.len(), batch });
        }
        let len = ids.len() / batch;
        if len < self.config.n_out {
            return Err(ModelError::InputTooShort { len, n_out: self.config.n_out });
        }
        if self.config.pe_kind == PeKind::Ape && len > self.config.max_positions {
            return Err(ModelError::InputTooLong { len, max_positions: self.config.max_positions });
        }
        if let Some(&t) = ids.iter().find(|&&t| t as usize >= self.config.s_vocab) {
            return Err(ModelError::TokenOutOfRange(t as usize));
        }
        Ok(len)
    }

    /// Records the forward pass for `batch` sequences laid out back to back in `ids`.
    /// Dropout is applied only when `dropout_rng` is given and the configured rate is positive.
    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        ids: &[TokenId],
        batch: usize,
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<ForwardOutput, ModelError> {
        let len = self.check_input(ids, batch)?;
        let c = &self.config;
        let (d, h, dh) = (c.d_model, c.heads, c.d_head());
        let pv: Vec<Var> = self.params.iter().map(|p| g.param(&p.tensor)).collect();
        let lay = &self.layout;
        let p_drop = c.dropout;
        let mut drop = |g: &mut Graph<'a, T>, x: Var| match dropout_rng.as_deref_mut() {
            Some(rng) => g.dropout(x, p_drop, rng),
            None => x,
        };

        let ids_usize: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let mut x = g.embed(pv[lay.tok], &ids_usize, &[batch, len]);
        if let Some(pos) = lay.pos {
            let positions: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
            let pe = g.embed(pv[pos], &positions, &[batch, len]);
            x = g.add(x, pe);
        }
        x = g.layer_norm(x, pv[lay.emb_ln_g], pv[lay.emb_ln_b], LAYER_NORM_EPS);
        x = drop(g, x);

        // head split/merge and relative-offset index maps, shared by all layers
        let split: Vec<usize> = (0..batch)
            .flat_map(|b| {
                (0..h).flat_map(move |hd| {
                    (0..len).flat_map(move |i| (0..dh).map(move |e| (b * len + i) * d + hd * dh + e))
                })
            })
            .collect();
        let mut merge = vec![0usize; batch * len * d];
        for (src, &dst) in split.iter().enumerate() {
            merge[dst] = src;
        }
        let r = 2 * c.k_clip + 1;
        let n_heads = batch * h;
        let rel_idx = |by_key: bool| -> Vec<usize> {
            let mut v = Vec::with_capacity(n_heads * len * len);
            for n in 0..n_heads {
                for i in 0..len {
                    for j in 0..len {
                        let row = if by_key { j } else { i };
                        v.push((n * len + row) * r + rel_offset(i, j, c.k_clip));
                    }
                }
            }
            v
        };
        let q_rel_idx = c.pe_kind.is_relative().then(|| rel_idx(false));
        let k_rel_idx = (c.pe_kind == PeKind::RpeKq).then(|| rel_idx(true));
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let head_shape = vec![n_heads, len, dh];

        let mut scores = Vec::with_capacity(c.depth);
        let mut hidden = Vec::with_capacity(c.depth);
        for li in &lay.layers {
            let proj = |g: &mut Graph<'a, T>, x: Var, w: usize, b: usize| {
                let y = g.matmul(x, pv[w]);
                g.add_bias(y, pv[b])
            };
            let q = proj(g, x, li.wq, li.bq);
            let k = proj(g, x, li.wk, li.bk);
            let v = proj(g, x, li.wv, li.bv);
            let qh = g.gather(q, split.clone(), head_shape.clone());
            let kh = g.gather(k, split.clone(), head_shape.clone());
            let vh = g.gather(v, split.clone(), head_shape.clone());
            let mut s = g.bmm_nt(qh, kh);
            if let (Some(rk), Some(idx)) = (li.rel_k, &q_rel_idx) {
                let qr = g.matmul_nt(qh, pv[rk]);
                let t = g.gather(qr, idx.clone(), vec![n_heads, len, len]);
                s = g.add(s, t);
            }
            if let (Some(rq), Some(idx)) = (li.rel_q, &k_rel_idx) {
                let kr = g.matmul_nt(kh, pv[rq]);
                let t = g.gather(kr, idx.clone(), vec![n_heads, len, len]);
                s = g.add(s, t);
            }
            let s = g.scale(s, scale);
            scores.push(s);
            let p = g.softmax(s);
            let p = drop(g, p);
            let ctx = g.bmm(p, vh);
            let ctx = g.gather(ctx, merge.clone(), vec![batch, len, d]);
            let o = proj(g, ctx, li.wo, li.bo);
            let o = drop(g, o);
            let res = g.add(x, o);
            let x1 = g.layer_norm(res, pv[li.ln1_g], pv[li.ln1_b], LAYER_NORM_EPS);
            let f = proj(g, x1, li.w1, li.b1);
            let f = g.gelu(f);
            let f = proj(g, f, li.w2, li.b2);
            let f = drop(g, f);
            let res = g.add(x1, f);
            x = g.layer_norm(res, pv[li.ln2_g], pv[li.ln2_b], LAYER_NORM_EPS);
            hidden.push(x);
        }

        let t = g.slice(x, 1, 0, c.n_out);
        let logits = g.matmul(t, pv[lay.cls_w]);
        let logits = g.add_bias(logits, pv[lay.cls_b]);
        Ok(ForwardOutput { logits, params: pv, scores, hidden })
    }

    /// Logits `[batch, n_out, s_vocab]` without gradient tracking.
    pub fn logits(&self, ids: &[TokenId], batch: usize) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::no_grad();
        let out = self.forward(&mut g, ids, batch, None)?;
        Ok(g.tensor(out.logits))
    }

    /// Positionwise argmax of the logits, `batch·n_out` ids. Ties go to the lowest id.
    /// Large batches are processed in chunks of `chunk` sequences.
    pub fn predict(&self, ids: &[TokenId], batch: usize, chunk: usize) -> Result<Vec<TokenId>, ModelError> {
        let len = self.check_input(ids, batch)?;
        let chunk = chunk.max(1);
        let mut out = Vec::with_capacity(batch * self.config.n_out);
        for part in ids.chunks(chunk * len) {
            let logits = self.logits(part, part.len() / len)?;
            out.extend(argmax_rows(logits.data(), self.config.s_vocab));
        }
        Ok(out)
    }
}

/// Index of the maximum of each row; the first maximum wins.
pub fn argmax_rows<T: Scalar>(data: &[T], width: usize) -> Vec<TokenId> {
    data.chunks(width)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best as TokenId
        })
        .collect()
}
