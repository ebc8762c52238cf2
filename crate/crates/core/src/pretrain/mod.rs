//! Masked-reconstruction pre-training across modalities.
//!
//! A parallel step computes each modality's reconstruction loss
//! independently and applies the gradient of their arithmetic mean in one
//! optimizer update. The CT variant updates once per modality instead.

mod optim;
mod prep;

pub use optim::{lr_at, AdamState, OptimizerConfig, ScheduleConfig};
pub use prep::{
    choose_masked_tokens, corrupt_ids, corrupt_values, impute_missing, normalize, ColumnKind, CorruptionMode,
    CorruptionSpec, ImageNorm, NormStats,
};

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::modality::ModalityKind;
use crate::tensor::{Gradients, Graph, Var};
use crate::tokenizer::embed_sets;
use crate::transformer::{HeadSpec, ModelConfig, ModelState};
use crate::triplet::{self, TripletSet, GRAPH_NEIGHBORS, IMAGE_SHAPE};

/// One batch of clean (imputed and normalized) samples of one modality,
/// each flattened: a table row, a 256-step window, an anchor row followed
/// by its 32 neighbour rows, a 224×224×3 image, or 512 token ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityBatch {
    pub modality: ModalityKind,
    /// Reconstruction head used for this batch.
    pub head: String,
    pub samples: Vec<Vec<f64>>,
    /// Seed of the table encoder; fixed per dataset.
    #[serde(default)]
    pub encode_seed: u64,
}

/// Head shape for reconstructing samples of `sample_len` values.
pub fn recon_head_spec(modality: ModalityKind, sample_len: usize, config: &ModelConfig) -> Result<HeadSpec> {
    let h = config.hidden_dim;
    Ok(match modality {
        ModalityKind::Table | ModalityKind::TimeSeries | ModalityKind::Graph => HeadSpec::mlp(sample_len, h),
        ModalityKind::Image => HeadSpec::mlp(2 * triplet::PATCH[0] * triplet::PATCH[1] * 3, h),
        ModalityKind::Text => HeadSpec::mlp(2 * config.vocab_size, h),
        _ => bail!(Config, "{} has no pre-training objective", modality),
    })
}

/// What a reconstruction is scored against.
#[derive(Clone, Debug, PartialEq)]
pub enum ReconTarget {
    /// Every raw value of every sample, row-major.
    Full(Vec<f64>),
    /// The raw values of the masked triplets, one row per triplet.
    MaskedPatches(Vec<f64>),
    /// Original `(id1, id2)` pairs of the masked triplets.
    MaskedIds(Vec<[usize; 2]>),
}

/// Mean-square error for numeric targets; cross-entropy over both ids of
/// each masked text triplet, with `pred` holding `2·V` logits per row.
pub fn recon_loss(g: &mut Graph<'_>, modality: ModalityKind, pred: Var, target: &ReconTarget) -> Result<Var> {
    let d = g.dims(pred);
    match (modality, target) {
        (ModalityKind::Table | ModalityKind::TimeSeries | ModalityKind::Graph, ReconTarget::Full(t))
        | (ModalityKind::Image, ReconTarget::MaskedPatches(t)) => {
            if t.is_empty() {
                bail!(Contract, "no masked positions to reconstruct");
            }
            if t.len() != d.len() {
                bail!(Dimension, "prediction of {} values for {} targets", d.len(), t.len());
            }
            let t = g.constant_rows(d.rows, d.cols, t.clone())?;
            g.mse(pred, t)
        }
        (ModalityKind::Text, ReconTarget::MaskedIds(ids)) => {
            if ids.is_empty() {
                bail!(Contract, "no masked positions to reconstruct");
            }
            if ids.len() != d.rows || !d.cols.is_multiple_of(2) {
                bail!(Dimension, "{}×{} logits for {} masked triplets", d.rows, d.cols, ids.len());
            }
            let v = d.cols / 2;
            let first = g.slice_cols(pred, 0, v)?;
            let second = g.slice_cols(pred, v, v)?;
            let logits = g.concat_rows(&[first, second])?;
            let targets: Vec<usize> = ids.iter().map(|p| p[0]).chain(ids.iter().map(|p| p[1])).collect();
            g.cross_entropy(logits, &targets)
        }
        _ => bail!(Contract, "{:?} target does not fit {}", target, modality),
    }
}

fn encode_numeric(modality: ModalityKind, x: &[f64], seed: u64) -> Result<TripletSet> {
    match modality {
        ModalityKind::Table => triplet::encode_table(x, seed),
        ModalityKind::TimeSeries => triplet::encode_timeseries(x),
        ModalityKind::Graph => {
            let rows = GRAPH_NEIGHBORS + 1;
            if x.is_empty() || !x.len().is_multiple_of(rows) {
                bail!(Dimension, "graph sample of {} values is not {} node rows", x.len(), rows);
            }
            let d = x.len() / rows;
            let neighbors: Vec<Vec<f64>> = x[d..].chunks(d).map(<[f64]>::to_vec).collect();
            triplet::encode_graph(&x[..d], &neighbors)
        }
        _ => bail!(Contract, "{} is not reconstructed from the reconstruction token", modality),
    }
}

fn ids_of(sample: &[f64], vocab: usize) -> Result<Vec<u32>> {
    sample
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < vocab {
                Ok(v as u32)
            } else {
                Err(crate::Error::Contract(alloc::format!("{v} is not a token id below {vocab}")))
            }
        })
        .collect()
}

/// Everything one modality contributes to a step.
#[derive(Clone, Copy, Debug)]
pub struct ModalityJob<'a> {
    pub batch: &'a ModalityBatch,
    pub spec: CorruptionSpec,
    pub mask_id: u32,
    /// Seeds this job's corruption draws.
    pub seed: u64,
}

/// Records one modality's corrupted forward pass and reconstruction loss.
pub fn modality_loss(g: &mut Graph<'_>, model: &ModelState, job: &ModalityJob<'_>) -> Result<Var> {
    let b = job.batch;
    job.spec.validate()?;
    if job.spec.modality != b.modality {
        bail!(Config, "{} corruption spec for a {} batch", job.spec.modality, b.modality);
    }
    if b.samples.is_empty() {
        bail!(Contract, "empty {} batch", b.modality);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
    match b.modality {
        ModalityKind::Table | ModalityKind::TimeSeries | ModalityKind::Graph => {
            let mut sets = Vec::with_capacity(b.samples.len());
            for s in &b.samples {
                let (noisy, _) = corrupt_values(s, &job.spec, &mut rng)?;
                sets.push(encode_numeric(b.modality, &noisy, b.encode_seed)?);
            }
            let refs: Vec<&TripletSet> = sets.iter().collect();
            let batch = embed_sets(g, model, &refs, None)?;
            let h = model.encode(g, &batch)?;
            let pred = model.decode_recon(g, h, &batch.segments, &b.head)?;
            let target = ReconTarget::Full(b.samples.concat());
            recon_loss(g, b.modality, pred, &target)
        }
        ModalityKind::Image => {
            let mut sets = Vec::with_capacity(b.samples.len());
            let mut masks = Vec::with_capacity(b.samples.len());
            for s in &b.samples {
                let set = triplet::encode_image(s, IMAGE_SHAPE)?;
                masks.push(choose_masked_tokens(set.len(), &job.spec, &mut rng)?);
                sets.push(set);
            }
            let refs: Vec<&TripletSet> = sets.iter().collect();
            let batch = embed_sets(g, model, &refs, Some(&masks))?;
            let mut rows = Vec::new();
            let mut target = Vec::new();
            for ((set, mask), seg) in sets.iter().zip(&masks).zip(&batch.segments) {
                for (j, t) in set.triplets.iter().enumerate().filter(|(j, _)| mask[*j]) {
                    rows.push(seg.offset + j + 1);
                    target.extend_from_slice(&t.num1);
                    target.extend_from_slice(&t.num2);
                }
            }
            if rows.is_empty() {
                bail!(Contract, "no masked image triplets");
            }
            let h = model.encode(g, &batch)?;
            let pred = model.decode_per_token(g, h, &rows, &b.head)?;
            recon_loss(g, b.modality, pred, &ReconTarget::MaskedPatches(target))
        }
        ModalityKind::Text => {
            let vocab = model.config.vocab_size;
            let mut sets = Vec::with_capacity(b.samples.len());
            let mut hidden = Vec::with_capacity(b.samples.len());
            for s in &b.samples {
                let ids = ids_of(s, vocab)?;
                let (masked_ids, masked) = corrupt_ids(&ids, &job.spec, job.mask_id, &mut rng)?;
                sets.push(triplet::encode_text(&masked_ids, vocab)?);
                hidden.push((ids, masked));
            }
            let refs: Vec<&TripletSet> = sets.iter().collect();
            let batch = embed_sets(g, model, &refs, None)?;
            let mut rows = Vec::new();
            let mut target = Vec::new();
            for ((ids, masked), seg) in hidden.iter().zip(&batch.segments) {
                let mut triplets: Vec<usize> = masked.iter().map(|i| i / 2).collect();
                triplets.dedup();
                for j in triplets {
                    rows.push(seg.offset + j + 1);
                    target.push([ids[2 * j] as usize, ids[2 * j + 1] as usize]);
                }
            }
            if rows.is_empty() {
                bail!(Contract, "no masked text triplets");
            }
            let h = model.encode(g, &batch)?;
            let pred = model.decode_per_token(g, h, &rows, &b.head)?;
            recon_loss(g, b.modality, pred, &ReconTarget::MaskedIds(target))
        }
        _ => bail!(Config, "{} has no pre-training objective", b.modality),
    }
}

/// Loss and gradient of a single modality.
pub fn modality_gradients(model: &ModelState, job: &ModalityJob<'_>) -> Result<(f64, Gradients)> {
    let mut g = Graph::with_params(&model.store);
    let loss = modality_loss(&mut g, model, job)?;
    g.backward(loss)?;
    let value = g.scalar(loss);
    Ok((value, g.into_param_grads()))
}

/// Per-modality losses and the gradient of their mean, from one graph.
pub fn joint_gradients(model: &ModelState, jobs: &[ModalityJob<'_>]) -> Result<(Vec<f64>, Gradients)> {
    if jobs.is_empty() {
        bail!(Contract, "no modality batches");
    }
    let mut g = Graph::with_params(&model.store);
    let losses = jobs.iter().map(|j| modality_loss(&mut g, model, j)).collect::<Result<Vec<_>>>()?;
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    let mean = g.scale(total, 1.0 / losses.len() as f64);
    g.backward(mean)?;
    let values = losses.iter().map(|&l| g.scalar(l)).collect();
    Ok((values, g.into_param_grads()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct PretrainConfig {
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    /// Overrides of the default corruption per modality.
    pub corruption: BTreeMap<ModalityKind, CorruptionSpec>,
    /// Text mask id; the last vocabulary entry when unset.
    pub mask_id: Option<u32>,
}


impl PretrainConfig {
    pub fn spec_for(&self, modality: ModalityKind) -> Result<CorruptionSpec> {
        match self.corruption.get(&modality) {
            Some(s) => Ok(*s),
            None => CorruptionSpec::default_for(modality),
        }
    }

    pub fn mask_id(&self, config: &ModelConfig) -> u32 {
        self.mask_id.unwrap_or(config.vocab_size as u32 - 1)
    }
}

/// Mutable training state besides the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub loss_history: BTreeMap<ModalityKind, Vec<f64>>,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        Self { step: 0, adam: AdamState::default(), rng: ChaCha8Rng::seed_from_u64(seed), loss_history: BTreeMap::new() }
    }
}

/// Log entry of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub losses: Vec<(ModalityKind, f64)>,
}

impl StepRecord {
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().map(|l| l.1).sum::<f64>() / self.losses.len() as f64
    }
}

/// Draws one corruption seed per batch from the state's generator, in
/// batch order.
pub fn plan_jobs<'a>(
    state: &mut TrainState,
    batches: &'a [ModalityBatch],
    cfg: &PretrainConfig,
    model: &ModelConfig,
) -> Result<Vec<ModalityJob<'a>>> {
    if batches.is_empty() {
        bail!(Contract, "no modality batches");
    }
    let mask_id = cfg.mask_id(model);
    batches
        .iter()
        .map(|batch| Ok(ModalityJob { batch, spec: cfg.spec_for(batch.modality)?, mask_id, seed: state.rng.next_u64() }))
        .collect()
}

fn apply_update(model: &mut ModelState, state: &mut TrainState, cfg: &PretrainConfig, grads: &Gradients) -> f64 {
    let lr = lr_at(state.step, &cfg.schedule, cfg.optimizer.lr);
    state.adam.step(&mut model.store, grads, &cfg.optimizer, lr);
    state.step += 1;
    lr
}

/// Parallel reconstruction step using one joint graph.
pub fn pretrain_step_parallel(
    model: &mut ModelState,
    state: &mut TrainState,
    batches: &[ModalityBatch],
    cfg: &PretrainConfig,
) -> Result<StepRecord> {
    pretrain_step_parallel_with(model, state, batches, cfg, |m, jobs| {
        let (losses, grads) = joint_gradients(m, jobs)?;
        Ok((losses, grads))
    })
}

/// Parallel reconstruction step with a caller-supplied gradient routine,
/// which returns the per-job losses and the gradient of their mean.
pub fn pretrain_step_parallel_with<F>(
    model: &mut ModelState,
    state: &mut TrainState,
    batches: &[ModalityBatch],
    cfg: &PretrainConfig,
    compute: F,
) -> Result<StepRecord>
where
    F: FnOnce(&ModelState, &[ModalityJob<'_>]) -> Result<(Vec<f64>, Gradients)>,
{
    let jobs = plan_jobs(state, batches, cfg, &model.config)?;
    let (losses, grads) = compute(model, &jobs)?;
    if losses.len() != jobs.len() {
        bail!(Contract, "{} losses for {} batches", losses.len(), jobs.len());
    }
    let step = state.step;
    let lr = apply_update(model, state, cfg, &grads);
    let losses: Vec<(ModalityKind, f64)> = batches.iter().map(|b| b.modality).zip(losses).collect();
    for &(m, l) in &losses {
        state.loss_history.entry(m).or_default().push(l);
    }
    Ok(StepRecord { step, lr, losses })
}

/// Separately computed per-modality gradients, averaged in batch order.
pub fn separate_mean_gradients(model: &ModelState, jobs: &[ModalityJob<'_>]) -> Result<(Vec<f64>, Gradients)> {
    let parts = jobs.iter().map(|j| modality_gradients(model, j)).collect::<Result<Vec<_>>>()?;
    let losses = parts.iter().map(|p| p.0).collect();
    let grads: Vec<Gradients> = parts.into_iter().map(|p| p.1).collect();
    Ok((losses, Gradients::mean_of(&grads)))
}

/// CT variant: one backward pass and one optimizer step per modality, in
/// batch order. Returns one record per update.
pub fn pretrain_step_ct(
    model: &mut ModelState,
    state: &mut TrainState,
    batches: &[ModalityBatch],
    cfg: &PretrainConfig,
) -> Result<Vec<StepRecord>> {
    let seeds: Vec<(CorruptionSpec, u64)> = {
        let jobs = plan_jobs(state, batches, cfg, &model.config)?;
        jobs.iter().map(|j| (j.spec, j.seed)).collect()
    };
    let mask_id = cfg.mask_id(&model.config);
    let mut records = Vec::with_capacity(batches.len());
    for (batch, (spec, seed)) in batches.iter().zip(seeds) {
        let job = ModalityJob { batch, spec, mask_id, seed };
        let (loss, grads) = modality_gradients(model, &job)?;
        let step = state.step;
        let lr = apply_update(model, state, cfg, &grads);
        state.loss_history.entry(batch.modality).or_default().push(loss);
        records.push(StepRecord { step, lr, losses: alloc::vec![(batch.modality, loss)] });
    }
    Ok(records)
}

#[cfg(test)]
mod tests;
