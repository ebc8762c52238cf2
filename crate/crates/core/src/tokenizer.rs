//! The shared tokenizer: raw triplets to `token_dim` vectors.
//!
//! Numeric parts (after the text and point pre-embeds) are zero-padded to
//! the part capacity, concatenated and mapped by one affine layer; the local
//! topology embedding is the mean of the topology-table rows named by the
//! triplet's local indices.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::modality::ModalityKind;
use crate::tensor::{Graph, ParamId, ParamStore, Var};
use crate::transformer::{normal, GlobalTopology, Linear, ModelConfig, ModelState};
use crate::triplet::{RawTriplet, TripletSet};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizerParams {
    pub numeric: Linear,
    pub topology_table: ParamId,
    pub word_table: ParamId,
    pub point_in: Linear,
    pub point_out: Linear,
    pub mask_token: ParamId,
    pub recon_token: ParamId,
    /// Present only with additive global topology.
    pub position_table: Option<ParamId>,
}

impl TokenizerParams {
    pub(crate) fn init<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let s = cfg.init_std;
        let numeric = Linear::init(store, "tokenizer.numeric", 2 * cfg.part_capacity, cfg.token_dim, s, rng);
        let topology_table = store.add("tokenizer.topology", normal(rng, cfg.topology_capacity, cfg.token_dim, s), true);
        let word_table = store.add("tokenizer.word", normal(rng, cfg.vocab_size, cfg.pre_embed_dim, s), true);
        let point_in = Linear::init(store, "tokenizer.point.0", 3, cfg.point_hidden, s, rng);
        let point_out = Linear::init(store, "tokenizer.point.1", cfg.point_hidden, cfg.pre_embed_dim, s, rng);
        let mask_token = store.add("tokenizer.mask_token", normal(rng, 1, cfg.token_dim, s), false);
        let recon_token = store.add("tokenizer.recon_token", normal(rng, 1, cfg.token_dim, s), false);
        let position_table = (cfg.global_topology == GlobalTopology::Additive)
            .then(|| store.add("tokenizer.position", normal(rng, cfg.position_capacity, cfg.token_dim, s), true));
        Self { numeric, topology_table, word_table, point_in, point_out, mask_token, recon_token, position_table }
    }
}

/// A tokenized triplet. The reconstruction token has no global index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletToken {
    pub vector: Vec<f64>,
    pub global_index: Option<usize>,
}

impl TripletToken {
    /// Sequence position used by the global topology: 0 for the
    /// reconstruction token, `j + 1` for triplet `j`.
    pub fn position(&self) -> usize {
        self.global_index.map_or(0, |j| j + 1)
    }
}

/// One sample's contiguous rows inside a batched token matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub offset: usize,
    pub positions: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Token matrix of several samples, each prefixed by the reconstruction
/// token.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub tokens: Var,
    pub segments: Vec<Segment>,
}

/// Word-table row of a token id.
pub fn embed_text_id(id: usize, model: &ModelState) -> Result<Vec<f64>> {
    if id >= model.config.vocab_size {
        bail!(Contract, "token id {} outside vocabulary of {}", id, model.config.vocab_size);
    }
    Ok(model.store.value(model.tokenizer.word_table).row(id).to_vec())
}

/// Point-group pre-embedding: a shared per-point map followed by a max-pool
/// over the group's points. `group` is `k×3` row-major.
pub fn embed_point_group(group: &[f64], model: &ModelState) -> Result<Vec<f64>> {
    if group.is_empty() || !group.len().is_multiple_of(3) {
        bail!(Contract, "point group of {} values is not a non-empty k×3 array", group.len());
    }
    let mut g = Graph::with_params(&model.store);
    let points = g.constant_rows(group.len() / 3, 3, group.to_vec())?;
    let out = point_embed(&mut g, &model.tokenizer, points, group.len() / 3)?;
    Ok(g.value(out).to_vec())
}

/// Token of a single triplet (no reconstruction token, no masking).
pub fn tokenize(t: &RawTriplet, modality: ModalityKind, model: &ModelState) -> Result<TripletToken> {
    let mut g = Graph::with_params(&model.store);
    let num = numeric_rows(&mut g, model, modality, core::slice::from_ref(t))?;
    let mut tok = token_rows(&mut g, model, num, core::slice::from_ref(t))?;
    if let Some(table) = model.tokenizer.position_table {
        tok = add_positions(&mut g, table, tok, &[t.global_index + 1], model.config.position_capacity)?;
    }
    Ok(TripletToken { vector: g.value(tok).to_vec(), global_index: Some(t.global_index) })
}

/// Tokens of a whole set, reconstruction token first.
pub fn tokenize_set(s: &TripletSet, model: &ModelState) -> Result<Vec<TripletToken>> {
    let mut g = Graph::with_params(&model.store);
    let batch = embed_sets(&mut g, model, &[s], None)?;
    let d = model.config.token_dim;
    let values = g.value(batch.tokens);
    Ok(batch.segments[0]
        .positions
        .iter()
        .enumerate()
        .map(|(r, &p)| TripletToken { vector: values[r * d..(r + 1) * d].to_vec(), global_index: p.checked_sub(1) })
        .collect())
}

/// Records the tokenization of several sets into `g`.
///
/// `masked[s][j] == true` replaces triplet `j` of set `s` by the mask token
/// (image pre-training); its global position is kept.
pub fn embed_sets(
    g: &mut Graph<'_>,
    model: &ModelState,
    sets: &[&TripletSet],
    masked: Option<&[Vec<bool>]>,
) -> Result<TokenBatch> {
    if sets.is_empty() {
        bail!(Contract, "no samples to tokenize");
    }
    if let Some(m) = masked {
        if m.len() != sets.len() || m.iter().zip(sets).any(|(m, s)| m.len() != s.len()) {
            bail!(Contract, "mask record does not match the batch");
        }
    }
    let mut parts = Vec::with_capacity(sets.len());
    for s in sets {
        if s.is_empty() {
            bail!(Contract, "{} set has no triplets", s.modality);
        }
        let num = numeric_rows(g, model, s.modality, &s.triplets)?;
        parts.push(num);
    }
    let num = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
    let all: Vec<&RawTriplet> = sets.iter().flat_map(|s| &s.triplets).collect();
    let tokens = token_rows_ref(g, model, num, &all)?;

    // rows: 0 recon, 1 mask, 2.. triplet tokens
    let recon = g.param(model.tokenizer.recon_token);
    let mask = g.param(model.tokenizer.mask_token);
    let pool = g.concat_rows(&[recon, mask, tokens])?;
    let mut index = Vec::with_capacity(all.len() + sets.len());
    let mut segments = Vec::with_capacity(sets.len());
    let mut next = 2;
    for (si, s) in sets.iter().enumerate() {
        let offset = index.len();
        let mut positions = Vec::with_capacity(s.len() + 1);
        index.push(0);
        positions.push(0);
        for (j, t) in s.triplets.iter().enumerate() {
            let hidden = masked.is_some_and(|m| m[si][j]);
            index.push(if hidden { 1 } else { next });
            positions.push(t.global_index + 1);
            next += 1;
        }
        segments.push(Segment { offset, positions });
    }
    let mut tokens = g.gather_rows(pool, &index)?;
    if let Some(table) = model.tokenizer.position_table {
        let positions: Vec<usize> = segments.iter().flat_map(|s| s.positions.iter().copied()).collect();
        tokens = add_positions(g, table, tokens, &positions, model.config.position_capacity)?;
    }
    Ok(TokenBatch { tokens, segments })
}

fn add_positions(g: &mut Graph<'_>, table: ParamId, tokens: Var, positions: &[usize], capacity: usize) -> Result<Var> {
    if let Some(&bad) = positions.iter().find(|&&p| p >= capacity) {
        bail!(Config, "position {} exceeds the additive position table of {}", bad, capacity);
    }
    let t = g.param(table);
    let pos = g.gather_rows(t, positions)?;
    g.add(tokens, pos)
}

fn token_rows(g: &mut Graph<'_>, model: &ModelState, num: Var, triplets: &[RawTriplet]) -> Result<Var> {
    let refs: Vec<&RawTriplet> = triplets.iter().collect();
    token_rows_ref(g, model, num, &refs)
}

/// `affine(num) + mean(topology[local_indices])` for each triplet.
fn token_rows_ref(g: &mut Graph<'_>, model: &ModelState, num: Var, triplets: &[&RawTriplet]) -> Result<Var> {
    let cap = model.config.topology_capacity;
    let mut bags = Vec::with_capacity(triplets.len());
    for t in triplets {
        if t.local_indices.is_empty() {
            bail!(Contract, "triplet {} has no local indices", t.global_index);
        }
        if let Some(&index) = t.local_indices.iter().find(|&&i| i >= cap) {
            return Err(Error::TopologyCapacity { index, capacity: cap });
        }
        bags.push(t.local_indices.clone());
    }
    let lin = model.tokenizer.numeric;
    let (w, b) = (g.param(lin.weight), g.param(lin.bias));
    let t_num = g.affine(num, w, b)?;
    let table = g.param(model.tokenizer.topology_table);
    let topo = g.embedding_bag_mean(table, bags)?;
    g.add(t_num, topo)
}

/// The `n × 2·capacity` padded-and-concatenated numeric rows.
fn numeric_rows(g: &mut Graph<'_>, model: &ModelState, modality: ModalityKind, triplets: &[RawTriplet]) -> Result<Var> {
    let cap = model.config.part_capacity;
    let n = triplets.len();
    match modality {
        ModalityKind::Text => {
            let vocab = model.config.vocab_size;
            let mut ids = [Vec::with_capacity(n), Vec::with_capacity(n)];
            for t in triplets {
                for (dst, part) in ids.iter_mut().zip([&t.num1, &t.num2]) {
                    let id = match part.as_slice() {
                        [v] if *v >= 0.0 && v.fract() == 0.0 && (*v as usize) < vocab => *v as usize,
                        _ => bail!(Contract, "text part {:?} is not a token id below {}", part, vocab),
                    };
                    dst.push(id);
                }
            }
            let table = g.param(model.tokenizer.word_table);
            let e1 = g.gather_rows(table, &ids[0])?;
            let e2 = g.gather_rows(table, &ids[1])?;
            pad_pair(g, e1, e2, model.config.pre_embed_dim, cap)
        }
        ModalityKind::PointCloud => {
            let k = triplets[0].num1.len() / 3;
            let mut points = Vec::with_capacity(n * 2 * k * 3);
            for t in triplets {
                for part in [&t.num1, &t.num2] {
                    if k == 0 || part.len() != k * 3 {
                        bail!(Contract, "point group of {} values, expected {}×3", part.len(), k);
                    }
                    points.extend_from_slice(part);
                }
            }
            let p = g.constant_rows(n * 2 * k, 3, points)?;
            let pooled = point_embed(g, &model.tokenizer, p, k)?;
            let even: Vec<usize> = (0..n).map(|i| 2 * i).collect();
            let odd: Vec<usize> = (0..n).map(|i| 2 * i + 1).collect();
            let e1 = g.gather_rows(pooled, &even)?;
            let e2 = g.gather_rows(pooled, &odd)?;
            pad_pair(g, e1, e2, model.config.pre_embed_dim, cap)
        }
        _ => {
            let mut x = vec![0.0; n * 2 * cap];
            for (r, t) in triplets.iter().enumerate() {
                for (slot, part) in [&t.num1, &t.num2].into_iter().enumerate() {
                    if part.len() > cap {
                        return Err(Error::PaddingCapacity { len: part.len(), capacity: cap });
                    }
                    let start = r * 2 * cap + slot * cap;
                    x[start..start + part.len()].copy_from_slice(part);
                }
            }
            g.constant_rows(n, 2 * cap, x)
        }
    }
}

fn pad_pair(g: &mut Graph<'_>, e1: Var, e2: Var, width: usize, cap: usize) -> Result<Var> {
    if width > cap {
        return Err(Error::PaddingCapacity { len: width, capacity: cap });
    }
    if width == cap {
        return g.concat_cols(&[e1, e2]);
    }
    let n = g.dims(e1).rows;
    let z = g.zeros(n, cap - width);
    g.concat_cols(&[e1, z, e2, z])
}

/// Per-point `3 → hidden → pre_embed` map with SiLU, max-pooled over each
/// run of `k` rows.
fn point_embed(g: &mut Graph<'_>, tok: &TokenizerParams, points: Var, k: usize) -> Result<Var> {
    let (w1, b1) = (g.param(tok.point_in.weight), g.param(tok.point_in.bias));
    let h = g.affine(points, w1, b1)?;
    let h = g.silu(h);
    let (w2, b2) = (g.param(tok.point_out.weight), g.param(tok.point_out.bias));
    let e = g.affine(h, w2, b2)?;
    g.max_pool_rows(e, k)
}
