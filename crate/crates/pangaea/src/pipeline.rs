//! Pre-training, fine-tuning, evaluation and attention-dump drivers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pangaea_core::eval::{evaluate, finetune, EpochRecord, FinetuneConfig, LossKind};
use pangaea_core::pretrain::{
    pretrain_step_ct, pretrain_step_parallel_with, recon_head_spec, ModalityBatch, NormStats, StepRecord, TrainState,
};
use pangaea_core::scaling::{attention_affinity, AffinityMatrix, AttentionSlice};
use pangaea_core::tokenizer::{tokenize_set, TripletToken};
use pangaea_core::transformer::{forward_with_attention, AttentionMaps, HeadInit, ModelState};
use pangaea_core::{Error, ModalityKind};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::dataset::{Dataset, TaskSpec};
use crate::error::Result;
use crate::manifest::{RunManifest, Strategy};
use crate::plot::write_plotdata;
use crate::records::{epoch_records, step_records, RecordWriter};
use crate::runner;

/// File names of run artifacts inside the output directory.
pub mod paths {
    pub const STEP_LOG: &str = "steps.jsonl";
    pub const EPOCH_LOG: &str = "epochs.jsonl";
    pub const LOSS_PLOT: &str = "loss.csv";
    pub const CHECKPOINT: &str = "checkpoint.pgck";
    pub const FINETUNED: &str = "finetuned.pgck";
    pub const MANIFEST: &str = "manifest.json";
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainOutcome {
    pub steps: u64,
    pub updates: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    /// Mean reconstruction loss of every step.
    #[serde(skip)]
    pub trace: Vec<(u64, f64)>,
}

/// One pre-training data source with its reconstruction head.
#[derive(Clone, Debug)]
pub struct Source {
    pub modality: ModalityKind,
    pub head: String,
    pub samples: Vec<Vec<f64>>,
    pub encode_seed: u64,
}

impl Source {
    /// Normalized samples of `dataset`, bound to head `recon/<index>-<modality>`.
    pub fn from_dataset(dataset: &Dataset, index: usize, seed: u64) -> Result<Self> {
        let modality = dataset.modality();
        if !modality.is_pretraining() {
            return Err(Error::Config(format!("{modality} has no pre-training objective")).into());
        }
        let (samples, _) = dataset.prepared(seed, None)?;
        Ok(Self { modality, head: format!("recon/{index}-{modality}"), samples, encode_seed: dataset.meta.encode_seed })
    }

    fn batch<R: Rng>(&self, size: usize, rng: &mut R) -> ModalityBatch {
        let samples = (0..size).map(|_| self.samples[rng.random_range(0..self.samples.len())].clone()).collect();
        ModalityBatch { modality: self.modality, head: self.head.clone(), samples, encode_seed: self.encode_seed }
    }
}

/// Attaches any missing reconstruction heads for `sources`.
pub fn attach_recon_heads(model: &mut ModelState, sources: &[Source], seed: u64) -> Result<()> {
    for (i, s) in sources.iter().enumerate() {
        if model.heads.contains_key(&s.head) {
            continue;
        }
        let len = s.samples.first().map_or(0, Vec::len);
        let spec = recon_head_spec(s.modality, len, &model.config)?;
        model.attach_head(&s.head, spec, HeadInit::Random, seed.wrapping_add(i as u64 + 1))?;
    }
    Ok(())
}

/// Runs `steps` pre-training steps over `sources`, calling `on_step` with
/// the records of every step.
pub fn pretrain_loop(
    model: &mut ModelState,
    state: &mut TrainState,
    sources: &[Source],
    manifest: &RunManifest,
    threads: usize,
    mut on_step: impl FnMut(u64, &[StepRecord], &ModelState, &TrainState) -> Result<()>,
) -> Result<Vec<(u64, f64)>> {
    if sources.is_empty() || sources.iter().any(|s| s.samples.is_empty()) {
        return Err(Error::Contract("pre-training needs at least one non-empty dataset".into()).into());
    }
    let mut cfg = manifest.pretrain.clone();
    let per_step = match manifest.strategy {
        Strategy::Parallel => 1,
        Strategy::Ct => sources.len() as u64,
    };
    cfg.schedule.total_steps = (manifest.steps * per_step).max(1);
    cfg.schedule.validate()?;
    let mut trace = Vec::with_capacity(manifest.steps as usize);
    for step in 0..manifest.steps {
        let batches: Vec<ModalityBatch> = sources.iter().map(|s| s.batch(manifest.batch_size, &mut state.rng)).collect();
        let records = match manifest.strategy {
            Strategy::Parallel => vec![pretrain_step_parallel_with(model, state, &batches, &cfg, |m, jobs| {
                runner::parallel_gradients(m, jobs, threads)
            })?],
            Strategy::Ct => pretrain_step_ct(model, state, &batches, &cfg)?,
        };
        let losses: Vec<f64> = records.iter().flat_map(|r| r.losses.iter().map(|l| l.1)).collect();
        trace.push((step, losses.iter().sum::<f64>() / losses.len() as f64));
        on_step(step, &records, model, state)?;
    }
    Ok(trace)
}

fn load_sources(manifest: &RunManifest) -> Result<Vec<Source>> {
    let mut sources = Vec::new();
    for (i, path) in manifest.datasets.iter().enumerate() {
        let ds = Dataset::load(path)?;
        if manifest.modalities.is_empty() || manifest.modalities.contains(&ds.modality()) {
            sources.push(Source::from_dataset(&ds, i, manifest.seed)?);
        }
    }
    if sources.is_empty() {
        return Err(Error::Config("no pre-training dataset matches the selected modalities".into()).into());
    }
    Ok(sources)
}

fn initial_model(manifest: &RunManifest, checkpoint: Option<&Path>) -> Result<ModelState> {
    match checkpoint {
        Some(p) => Ok(load_checkpoint(p)?.model),
        None => Ok(ModelState::new(manifest.model.clone(), manifest.seed)?),
    }
}

/// Pre-trains as described by `manifest`, writing the step log, loss plot
/// data, checkpoints and a copy of the manifest to `manifest.out`.
pub fn run_pretrain(manifest: &RunManifest, threads: usize) -> Result<PretrainOutcome> {
    manifest.validate()?;
    let sources = load_sources(manifest)?;
    let mut model = initial_model(manifest, manifest.init_checkpoint.as_deref())?;
    attach_recon_heads(&mut model, &sources, manifest.seed)?;
    let out = &manifest.out;
    crate::ensure_dir(out)?;
    manifest.write(out.join(paths::MANIFEST))?;
    let mut log = RecordWriter::create(out.join(paths::STEP_LOG))?;
    let mut state = TrainState::new(manifest.seed);
    let meta = |step: u64| BTreeMap::from([("kind".to_string(), json!("pretrain")), ("steps".to_string(), json!(step))]);
    let trace = pretrain_loop(&mut model, &mut state, &sources, manifest, threads, |step, records, m, st| {
        for r in records {
            log.write_all(&step_records(r))?;
        }
        let due = manifest.checkpoint_every.is_some_and(|k| k > 0 && (step + 1) % k == 0 && step + 1 < manifest.steps);
        if due {
            save_checkpoint(out.join(format!("checkpoint-{}.pgck", step + 1)), m, Some(st), &meta(step + 1))?;
        }
        Ok(())
    })?;
    log.finish()?;
    let checkpoint = out.join(paths::CHECKPOINT);
    save_checkpoint(&checkpoint, &model, Some(&state), &meta(manifest.steps))?;
    if !trace.is_empty() {
        let points: Vec<(f64, f64)> = trace.iter().map(|&(s, l)| (s as f64, l)).collect();
        write_plotdata(out.join(paths::LOSS_PLOT), "step", "loss", &points)?;
    }
    Ok(PretrainOutcome {
        steps: manifest.steps,
        updates: state.step,
        initial_loss: trace.first().map_or(f64::NAN, |t| t.1),
        final_loss: trace.last().map_or(f64::NAN, |t| t.1),
        checkpoint,
        trace,
    })
}

/// Information a fine-tuned checkpoint carries for later evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub head: String,
    pub task: TaskSpec,
    pub loss: LossKind,
    pub norm: NormStats,
}

impl TaskMeta {
    const KEY: &'static str = "task";

    pub fn from_meta(meta: &BTreeMap<String, serde_json::Value>) -> Option<Self> {
        meta.get(Self::KEY).and_then(|v| serde_json::from_value(v.clone()).ok())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneOutcome {
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: PathBuf,
}

/// Fine-tuning configuration adapted to a dataset's task.
pub fn task_config(base: &FinetuneConfig, task: TaskSpec) -> FinetuneConfig {
    let mut cfg = base.clone();
    cfg.head_out_dim = task.out_dim();
    cfg.loss = match (task, base.loss) {
        (TaskSpec::Classification { .. }, LossKind::Bce) => LossKind::Bce,
        _ => task.loss(),
    };
    cfg
}

/// Fine-tunes on `manifest.finetune.train`, tracking metrics on the eval
/// split (the training split when none is given).
pub fn run_finetune(manifest: &RunManifest) -> Result<FinetuneOutcome> {
    let ft = &manifest.finetune;
    let train_path = ft.train.as_ref().ok_or_else(|| Error::Config("fine-tuning needs a training dataset".into()))?;
    let train = Dataset::load(train_path)?;
    let eval = match &ft.eval {
        Some(p) => Dataset::load(p)?,
        None => train.clone(),
    };
    if eval.modality() != train.modality() {
        return Err(Error::Config(format!("training data is {}, evaluation data {}", train.modality(), eval.modality())).into());
    }
    let task = train.meta.task.ok_or_else(|| Error::Config("training dataset has no labels".into()))?;
    let mut model = initial_model(manifest, ft.checkpoint.as_deref())?;
    let mut cfg = task_config(&ft.config, task);
    cfg.seed = manifest.seed;
    let vocab = model.config.vocab_size;
    let (train_ex, stats) = train.examples(manifest.seed, vocab, None)?;
    let (eval_ex, _) = eval.examples(manifest.seed, vocab, Some(&stats))?;
    let epochs = finetune(&mut model, &train_ex, &eval_ex, &cfg)?;
    let out = &manifest.out;
    crate::ensure_dir(out)?;
    manifest.write(out.join(paths::MANIFEST))?;
    let mut log = RecordWriter::create(out.join(paths::EPOCH_LOG))?;
    for e in &epochs {
        log.write_all(&epoch_records(e))?;
    }
    log.finish()?;
    let losses: Vec<(f64, f64)> = epochs.iter().filter_map(|e| e.train_loss.map(|l| (e.epoch as f64, l))).collect();
    if !losses.is_empty() {
        write_plotdata(out.join(paths::LOSS_PLOT), "epoch", "loss", &losses)?;
    }
    let task_meta = TaskMeta { head: cfg.head.clone(), task, loss: cfg.loss, norm: stats };
    let meta = BTreeMap::from([
        ("kind".to_string(), json!("finetune")),
        (TaskMeta::KEY.to_string(), serde_json::to_value(&task_meta)?),
    ]);
    let checkpoint = out.join(paths::FINETUNED);
    save_checkpoint(&checkpoint, &model, None, &meta)?;
    Ok(FinetuneOutcome { epochs, checkpoint })
}

/// Metrics of a fine-tuned checkpoint on a labelled dataset.
pub fn run_eval(checkpoint: &Path, data: &Path, head: Option<&str>, seed: u64) -> Result<BTreeMap<String, f64>> {
    let ck = load_checkpoint(checkpoint)?;
    let ds = Dataset::load(data)?;
    let stored = TaskMeta::from_meta(&ck.manifest.meta);
    let task = ds.meta.task.or(stored.as_ref().map(|t| t.task)).ok_or_else(|| Error::Config("dataset has no labels".into()))?;
    let head = head.map(str::to_string).or(stored.as_ref().map(|t| t.head.clone())).unwrap_or_else(|| "task".into());
    let spec = *ck.model.head_specs().get(&head).ok_or_else(|| Error::Config(format!("checkpoint has no head {head:?}")))?;
    let mut cfg = task_config(&FinetuneConfig::default(), task);
    cfg.head = head;
    cfg.head_out_dim = spec.out_dim;
    if let Some(t) = &stored {
        cfg.loss = t.loss;
    }
    let stats = stored.as_ref().filter(|t| !t.norm.mean.is_empty()).map(|t| &t.norm);
    let (examples, _) = ds.examples(seed, ck.model.config.vocab_size, stats)?;
    Ok(evaluate(&ck.model, &examples, &cfg)?)
}

/// Attention maps of mixed-modality sequences with the modality of every
/// token; the reconstruction token is unlabelled.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub maps: Vec<AttentionMaps>,
    pub labels: Vec<Vec<Option<ModalityKind>>>,
}

/// One sequence per sample index: a reconstruction token followed by the
/// triplet tokens of one sample from each dataset, with global indices
/// continuing across datasets.
pub fn attention_dump(model: &ModelState, datasets: &[Dataset], samples: usize, seed: u64) -> Result<AttentionDump> {
    if datasets.is_empty() || samples == 0 {
        return Err(Error::Contract("need at least one dataset and one sample".into()).into());
    }
    let mut encoded = Vec::with_capacity(datasets.len());
    for ds in datasets {
        let (sets, _) = ds.encode(seed, model.config.vocab_size, None)?;
        if sets.is_empty() {
            return Err(Error::Contract(format!("{} dataset is empty", ds.modality())).into());
        }
        encoded.push(sets);
    }
    let mut dump = AttentionDump::default();
    for i in 0..samples {
        let mut tokens: Vec<TripletToken> = Vec::new();
        let mut labels = Vec::new();
        let mut offset = 0;
        for sets in &encoded {
            let set = &sets[i % sets.len()];
            let toks = tokenize_set(set, model)?;
            for t in toks {
                match t.global_index {
                    None if tokens.is_empty() => {
                        tokens.push(t);
                        labels.push(None);
                    }
                    None => {}
                    Some(j) => {
                        tokens.push(TripletToken { vector: t.vector, global_index: Some(j + offset) });
                        labels.push(Some(set.modality));
                    }
                }
            }
            offset += set.len();
        }
        let (_, maps) = forward_with_attention(&tokens, model)?;
        dump.maps.push(maps);
        dump.labels.push(labels);
    }
    Ok(dump)
}

pub fn affinity(dump: &AttentionDump, slice: &AttentionSlice) -> Result<AffinityMatrix> {
    Ok(attention_affinity(&dump.maps, &dump.labels, slice)?)
}
