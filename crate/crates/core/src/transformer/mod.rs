//! The bidirectional triplet transformer and its task heads.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::tokenizer::{Segment, TokenBatch, TokenizerParams, TripletToken};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlobalTopology {
    /// Rotary rotation of queries and keys by sequence position.
    #[default]
    Rotary,
    /// A learned position table added to the tokens.
    Additive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub token_dim: usize,
    pub hidden_dim: usize,
    pub intermediate_dim: usize,
    pub rope_base: f64,
    pub global_topology: GlobalTopology,
    /// Zero-padding target of each numeric part.
    pub part_capacity: usize,
    pub topology_capacity: usize,
    pub vocab_size: usize,
    /// Output width of the text and point pre-embeddings.
    pub pre_embed_dim: usize,
    pub point_hidden: usize,
    /// Rows of the additive position table.
    pub position_capacity: usize,
    pub norm_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Full-size architecture: 8 blocks of width 256 with 8 heads.
    pub fn paper() -> Self {
        Self { n_blocks: 8, n_heads: 8, hidden_dim: 256, intermediate_dim: 512, ..Self::desk() }
    }

    /// Small architecture used for CPU experiments and tests.
    pub fn desk() -> Self {
        Self {
            n_blocks: 2,
            n_heads: 4,
            token_dim: 512,
            hidden_dim: 64,
            intermediate_dim: 128,
            rope_base: 10_000.0,
            global_topology: GlobalTopology::Rotary,
            part_capacity: 384,
            topology_capacity: 1000,
            vocab_size: 4096,
            pre_embed_dim: 256,
            point_hidden: 64,
            position_capacity: 1000,
            norm_eps: 1e-6,
            init_std: 0.02,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("token_dim", self.token_dim),
            ("hidden_dim", self.hidden_dim),
            ("n_heads", self.n_heads),
            ("intermediate_dim", self.intermediate_dim),
            ("part_capacity", self.part_capacity),
            ("topology_capacity", self.topology_capacity),
            ("vocab_size", self.vocab_size),
            ("pre_embed_dim", self.pre_embed_dim),
            ("point_hidden", self.point_hidden),
            ("position_capacity", self.position_capacity),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            bail!(Config, "{} must be positive", name);
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            bail!(Config, "hidden_dim {} is not divisible by {} heads", self.hidden_dim, self.n_heads);
        }
        if self.global_topology == GlobalTopology::Rotary && !self.head_dim().is_multiple_of(2) {
            bail!(Config, "rotary head dimension {} is odd", self.head_dim());
        }
        if self.pre_embed_dim > self.part_capacity {
            bail!(Config, "pre-embedding width {} exceeds part capacity {}", self.pre_embed_dim, self.part_capacity);
        }
        if !(self.rope_base > 0.0) || !(self.norm_eps > 0.0) || !(self.init_std >= 0.0) {
            bail!(Config, "rope_base and norm_eps must be positive, init_std non-negative");
        }
        Ok(())
    }
}

pub(crate) fn normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = if std > 0.0 {
        let dist = Normal::new(0.0, std).expect("positive std");
        (0..rows * cols).map(|_| dist.sample(rng)).collect()
    } else {
        vec![0.0; rows * cols]
    };
    Tensor::matrix(rows, cols, data).expect("non-empty")
}

fn filled(rows: usize, cols: usize, v: f64) -> Tensor {
    Tensor::matrix(rows, cols, vec![v; rows * cols]).expect("non-empty")
}

/// Affine map `x · W + b` with `W: in × out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub(crate) fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), normal(rng, fan_in, fan_out, std), true);
        let bias = store.add(format!("{name}.bias"), filled(1, fan_out, 0.0), false);
        Self { weight, bias }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.affine(x, w, b)
    }
}

/// Pre-norm attention and gated feed-forward weights of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockParams {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ffn_norm: ParamId,
    pub w_gate: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
}

/// Shape of a task head: an optional SiLU hidden layer, then the output
/// layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub out_dim: usize,
    pub hidden: Option<usize>,
}

impl HeadSpec {
    pub fn mlp(out_dim: usize, hidden: usize) -> Self {
        Self { out_dim, hidden: Some(hidden) }
    }

    pub fn linear(out_dim: usize) -> Self {
        Self { out_dim, hidden: None }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    #[default]
    Random,
    /// Random hidden layer, all-zero output layer.
    ZeroFinal,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Head {
    pub spec: HeadSpec,
    pub layers: Vec<Linear>,
}

/// All learnable parameters of a model together with its configuration.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub tokenizer: TokenizerParams,
    pub input_proj: Linear,
    pub blocks: Vec<BlockParams>,
    pub final_norm: ParamId,
    pub heads: BTreeMap<String, Head>,
}

/// Post-softmax attention weights of one sequence, laid out as
/// `[layer][head][query][key]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMaps {
    pub layers: usize,
    pub heads: usize,
    pub tokens: usize,
    pub weights: Vec<f64>,
}

impl AttentionMaps {
    pub fn new(layers: usize, heads: usize, tokens: usize) -> Self {
        Self { layers, heads, tokens, weights: vec![0.0; layers * heads * tokens * tokens] }
    }

    pub fn get(&self, layer: usize, head: usize, query: usize, key: usize) -> f64 {
        self.weights[((layer * self.heads + head) * self.tokens + query) * self.tokens + key]
    }

    fn block_mut(&mut self, layer: usize, head: usize) -> &mut [f64] {
        let t2 = self.tokens * self.tokens;
        let start = (layer * self.heads + head) * t2;
        &mut self.weights[start..start + t2]
    }

    /// `tokens × tokens` weights of one layer averaged over heads.
    pub fn head_mean(&self, layer: usize) -> Vec<f64> {
        let t2 = self.tokens * self.tokens;
        let mut out = vec![0.0; t2];
        for h in 0..self.heads {
            let start = (layer * self.heads + h) * t2;
            for (o, w) in out.iter_mut().zip(&self.weights[start..start + t2]) {
                *o += w;
            }
        }
        out.iter_mut().for_each(|o| *o /= self.heads as f64);
        out
    }
}

impl ModelState {
    /// Fresh model with every parameter drawn from the seeded initializer.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tokenizer = TokenizerParams::init(&mut store, &config, &mut rng);
        let s = config.init_std;
        let (h, m) = (config.hidden_dim, config.intermediate_dim);
        let input_proj = Linear::init(&mut store, "input_proj", config.token_dim, h, s, &mut rng);
        let blocks = (0..config.n_blocks)
            .map(|i| {
                let mut w = |name: &str, r: usize, c: usize| store.add(format!("block{i}.{name}"), normal(&mut rng, r, c, s), true);
                let (wq, wk, wv, wo) = (w("wq", h, h), w("wk", h, h), w("wv", h, h), w("wo", h, h));
                let (w_gate, w_up, w_down) = (w("w_gate", h, m), w("w_up", h, m), w("w_down", m, h));
                let attn_norm = store.add(format!("block{i}.attn_norm"), filled(1, h, 1.0), false);
                let ffn_norm = store.add(format!("block{i}.ffn_norm"), filled(1, h, 1.0), false);
                BlockParams { attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down }
            })
            .collect();
        let final_norm = store.add("final_norm", filled(1, h, 1.0), false);
        Ok(Self { config, store, tokenizer, input_proj, blocks, final_norm, heads: BTreeMap::new() })
    }

    /// Attaches head `name`, re-initializing it if it already exists.
    pub fn attach_head(&mut self, name: &str, spec: HeadSpec, init: HeadInit, seed: u64) -> Result<()> {
        if spec.out_dim == 0 || spec.hidden == Some(0) {
            bail!(Config, "head {} needs positive widths", name);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = self.config.init_std;
        let mut widths = vec![self.config.hidden_dim];
        widths.extend(spec.hidden);
        widths.push(spec.out_dim);
        let tensors: Vec<(Tensor, Tensor)> = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let last = i + 2 == widths.len();
                let std = if last && init == HeadInit::ZeroFinal { 0.0 } else { s };
                (normal(&mut rng, w[0], w[1], std), filled(1, w[1], 0.0))
            })
            .collect();
        match self.heads.get_mut(name) {
            Some(head) if head.layers.len() == tensors.len() => {
                for (layer, (w, b)) in head.layers.iter().zip(tensors) {
                    self.store.reset(layer.weight, w);
                    self.store.reset(layer.bias, b);
                }
                head.spec = spec;
            }
            Some(_) => bail!(Config, "head {} cannot change its layer count", name),
            None => {
                let layers = tensors
                    .into_iter()
                    .enumerate()
                    .map(|(i, (w, b))| Linear {
                        weight: self.store.add(format!("head.{name}.{i}.weight"), w, true),
                        bias: self.store.add(format!("head.{name}.{i}.bias"), b, false),
                    })
                    .collect();
                self.heads.insert(name.to_string(), Head { spec, layers });
            }
        }
        Ok(())
    }

    pub fn head(&self, name: &str) -> Result<&Head> {
        match self.heads.get(name) {
            Some(h) => Ok(h),
            None => bail!(Contract, "no head named {:?} is attached", name),
        }
    }

    pub fn head_specs(&self) -> BTreeMap<String, HeadSpec> {
        self.heads.iter().map(|(k, h)| (k.clone(), h.spec)).collect()
    }

    /// Ids of every parameter that belongs to a head.
    pub fn head_param_ids(&self) -> Vec<ParamId> {
        self.heads.values().flat_map(|h| h.layers.iter().flat_map(|l| [l.weight, l.bias])).collect()
    }

    /// Freezes (or unfreezes) everything except the heads.
    pub fn freeze_body(&mut self, frozen: bool) {
        let heads = self.head_param_ids();
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let is_head = heads.contains(&id);
            self.store.set_trainable(id, is_head || !frozen);
        }
    }

    /// Hidden states for a tokenized batch.
    pub fn encode(&self, g: &mut Graph<'_>, batch: &TokenBatch) -> Result<Var> {
        self.encode_inner(g, batch, None)
    }

    /// Hidden states plus per-sequence attention maps.
    pub fn encode_with_attention(&self, g: &mut Graph<'_>, batch: &TokenBatch) -> Result<(Var, Vec<AttentionMaps>)> {
        let (l, h) = (self.blocks.len(), self.config.n_heads);
        let mut maps: Vec<AttentionMaps> = batch.segments.iter().map(|s| AttentionMaps::new(l, h, s.len())).collect();
        let out = self.encode_inner(g, batch, Some(&mut maps))?;
        Ok((out, maps))
    }

    fn encode_inner(&self, g: &mut Graph<'_>, batch: &TokenBatch, mut capture: Option<&mut [AttentionMaps]>) -> Result<Var> {
        let d = g.dims(batch.tokens);
        if d.cols != self.config.token_dim {
            bail!(Config, "tokens of width {}, model expects {}", d.cols, self.config.token_dim);
        }
        let total: usize = batch.segments.iter().map(Segment::len).sum();
        if total != d.rows || batch.segments.iter().any(Segment::is_empty) {
            bail!(Config, "segments cover {} of {} token rows", total, d.rows);
        }
        let mut h = self.input_proj.apply(g, batch.tokens)?;
        for (layer, b) in self.blocks.iter().enumerate() {
            let maps = capture.as_deref_mut().map(|m| (layer, m));
            h = self.block(g, b, h, &batch.segments, maps)?;
        }
        let gain = g.param(self.final_norm);
        g.rms_norm(h, gain, self.config.norm_eps)
    }

    fn block(
        &self,
        g: &mut Graph<'_>,
        b: &BlockParams,
        h: Var,
        segments: &[Segment],
        mut capture: Option<(usize, &mut [AttentionMaps])>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let hd = cfg.head_dim();
        let eps = cfg.norm_eps;
        let gain = g.param(b.attn_norm);
        let xn = g.rms_norm(h, gain, eps)?;
        let (wq, wk, wv) = (g.param(b.wq), g.param(b.wk), g.param(b.wv));
        let (q, k, v) = (g.matmul(xn, wq)?, g.matmul(xn, wk)?, g.matmul(xn, wv)?);
        let positions: Vec<usize> = segments.iter().flat_map(|s| s.positions.iter().copied()).collect();
        let scale = 1.0 / libm::sqrt(hd as f64);
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let mut qh = g.slice_cols(q, head * hd, hd)?;
            let mut kh = g.slice_cols(k, head * hd, hd)?;
            let vh = g.slice_cols(v, head * hd, hd)?;
            if cfg.global_topology == GlobalTopology::Rotary {
                qh = g.rope(qh, &positions, cfg.rope_base)?;
                kh = g.rope(kh, &positions, cfg.rope_base)?;
            }
            let mut outs = Vec::with_capacity(segments.len());
            for (si, seg) in segments.iter().enumerate() {
                let (qs, ks, vs) = if segments.len() == 1 {
                    (qh, kh, vh)
                } else {
                    (
                        g.slice_rows(qh, seg.offset, seg.len())?,
                        g.slice_rows(kh, seg.offset, seg.len())?,
                        g.slice_rows(vh, seg.offset, seg.len())?,
                    )
                };
                let scores = g.matmul_t(qs, ks)?;
                let scores = g.scale(scores, scale);
                let att = g.softmax_rows(scores);
                if let Some((layer, maps)) = capture.as_mut() {
                    maps[si].block_mut(*layer, head).copy_from_slice(g.value(att));
                }
                outs.push(g.matmul(att, vs)?);
            }
            heads.push(if outs.len() == 1 { outs[0] } else { g.concat_rows(&outs)? });
        }
        let attn = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let wo = g.param(b.wo);
        let attn = g.matmul(attn, wo)?;
        let h = g.add(h, attn)?;

        let gain = g.param(b.ffn_norm);
        let xn = g.rms_norm(h, gain, eps)?;
        let (wg, wu, wd) = (g.param(b.w_gate), g.param(b.w_up), g.param(b.w_down));
        let gate = g.matmul(xn, wg)?;
        let gate = g.silu(gate);
        let up = g.matmul(xn, wu)?;
        let act = g.mul(gate, up)?;
        let down = g.matmul(act, wd)?;
        g.add(h, down)
    }

    /// Applies head `name` to the given rows of `hidden`.
    pub fn decode_per_token(&self, g: &mut Graph<'_>, hidden: Var, rows: &[usize], name: &str) -> Result<Var> {
        if rows.is_empty() {
            bail!(Contract, "no positions to decode");
        }
        let head = self.head(name)?;
        let mut x = g.gather_rows(hidden, rows)?;
        let last = head.layers.len() - 1;
        for (i, layer) in head.layers.iter().enumerate() {
            x = layer.apply(g, x)?;
            if i < last {
                x = g.silu(x);
            }
        }
        Ok(x)
    }

    /// Applies head `name` to the reconstruction token of every segment.
    pub fn decode_recon(&self, g: &mut Graph<'_>, hidden: Var, segments: &[Segment], name: &str) -> Result<Var> {
        let rows: Vec<usize> = segments.iter().map(|s| s.offset).collect();
        self.decode_per_token(g, hidden, &rows, name)
    }
}

fn token_batch(g: &mut Graph<'_>, tokens: &[TripletToken], width: usize) -> Result<TokenBatch> {
    if tokens.is_empty() {
        bail!(Contract, "empty token list");
    }
    if let Some(bad) = tokens.iter().find(|t| t.vector.len() != width) {
        bail!(Config, "token of width {}, model expects {}", bad.vector.len(), width);
    }
    let data: Vec<f64> = tokens.iter().flat_map(|t| t.vector.iter().copied()).collect();
    let x = g.constant_rows(tokens.len(), width, data)?;
    let positions = tokens.iter().map(TripletToken::position).collect();
    Ok(TokenBatch { tokens: x, segments: vec![Segment { offset: 0, positions }] })
}

/// Hidden states (`len × hidden_dim`) of one token sequence.
pub fn forward(tokens: &[TripletToken], model: &ModelState) -> Result<Tensor> {
    let mut g = Graph::with_params(&model.store);
    let batch = token_batch(&mut g, tokens, model.config.token_dim)?;
    let h = model.encode(&mut g, &batch)?;
    Ok(g.tensor(h))
}

/// [`forward`] plus the attention maps of every layer and head.
pub fn forward_with_attention(tokens: &[TripletToken], model: &ModelState) -> Result<(Tensor, AttentionMaps)> {
    let mut g = Graph::with_params(&model.store);
    let batch = token_batch(&mut g, tokens, model.config.token_dim)?;
    let (h, mut maps) = model.encode_with_attention(&mut g, &batch)?;
    Ok((g.tensor(h), maps.remove(0)))
}

/// Rotary rotation of one query or key vector.
pub fn rope_rotate(v: &[f64], position: usize, base: f64) -> Result<Vec<f64>> {
    if !v.len().is_multiple_of(2) {
        bail!(Config, "rotary width {} is odd", v.len());
    }
    let mut out = v.to_vec();
    crate::tensor::rotate_in_place(&mut out, position, base);
    Ok(out)
}

/// Learnable scalar counts, grouped.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCount {
    pub total: usize,
    /// Numeric layer, topology table, special tokens and position table.
    pub tokenizer: usize,
    /// Word table and point encoder.
    pub pre_embed: usize,
    /// Input projection, blocks and final norm.
    pub body: usize,
    pub heads: usize,
    pub per_tensor: Vec<(String, usize)>,
}

pub fn count_parameters(model: &ModelState) -> ParameterCount {
    let per_tensor: Vec<(String, usize)> = model.store.iter().map(|(_, p)| (p.name.clone(), p.value.len())).collect();
    let sum = |pred: &dyn Fn(&str) -> bool| per_tensor.iter().filter(|(n, _)| pred(n)).map(|(_, c)| c).sum::<usize>();
    let pre = |n: &str| n.starts_with("tokenizer.word") || n.starts_with("tokenizer.point");
    ParameterCount {
        total: per_tensor.iter().map(|(_, c)| c).sum(),
        tokenizer: sum(&|n| n.starts_with("tokenizer.") && !pre(n)),
        pre_embed: sum(&pre),
        body: sum(&|n| !n.starts_with("tokenizer.") && !n.starts_with("head.")),
        heads: sum(&|n| n.starts_with("head.")),
        per_tensor,
    }
}

#[cfg(test)]
mod tests;
