use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{self, EvalBatch, F1Average};
use crate::error::{bail, Result};
use crate::pretrain::{AdamState, OptimizerConfig};
use crate::tensor::{Graph, Var};
use crate::tokenizer::embed_sets;
use crate::transformer::{HeadInit, HeadSpec, ModelState};
use crate::triplet::TripletSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Softmax cross-entropy over `head_out_dim` classes.
    CrossEntropy,
    /// Sigmoid cross-entropy on one logit per class against a one-hot
    /// target; with a single logit the class label itself is the target.
    Bce,
    Mse,
}

impl LossKind {
    pub fn is_classification(self) -> bool {
        self != LossKind::Mse
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Class(usize),
    Values(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub set: TripletSet,
    pub target: Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub head: String,
    pub head_out_dim: usize,
    pub head_hidden: Option<usize>,
    pub head_init: HeadInit,
    pub loss: LossKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub freeze_body: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            head: "task".to_string(),
            head_out_dim: 2,
            head_hidden: Some(64),
            head_init: HeadInit::Random,
            loss: LossKind::CrossEntropy,
            lr: 1e-3,
            weight_decay: 0.05,
            epochs: 10,
            batch_size: 32,
            freeze_body: false,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn head_spec(&self) -> HeadSpec {
        HeadSpec { out_dim: self.head_out_dim, hidden: self.head_hidden }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig { lr: self.lr, weight_decay: self.weight_decay, ..OptimizerConfig::default() }
    }

    /// Checks the config and that every target fits the head and loss.
    pub fn validate(&self, examples: &[Example]) -> Result<()> {
        self.optimizer().validate()?;
        if self.batch_size == 0 || self.head_out_dim == 0 {
            bail!(Config, "batch size and head width must be positive");
        }
        if self.loss == LossKind::CrossEntropy && self.head_out_dim < 2 {
            bail!(Config, "cross-entropy needs at least 2 classes, head has {}", self.head_out_dim);
        }
        let classes = if self.loss == LossKind::Bce && self.head_out_dim == 1 { 2 } else { self.head_out_dim };
        for (i, ex) in examples.iter().enumerate() {
            match (&ex.target, self.loss.is_classification()) {
                (Target::Class(c), true) if *c < classes => {}
                (Target::Values(v), false) if v.len() == self.head_out_dim => {}
                (t, _) => bail!(Config, "example {}: target {:?} does not fit a {:?} head of width {}", i, t, self.loss, self.head_out_dim),
            }
        }
        Ok(())
    }
}

/// Metrics after one epoch; epoch 0 describes the model before any update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub metrics: BTreeMap<String, f64>,
}

fn batch_loss(g: &mut Graph<'_>, out: Var, targets: &[&Target], loss: LossKind, width: usize) -> Result<Var> {
    match loss {
        LossKind::CrossEntropy => {
            let classes: Vec<usize> = targets.iter().map(|t| class_of(t)).collect::<Result<_>>()?;
            g.cross_entropy(out, &classes)
        }
        LossKind::Bce => {
            let mut flat = Vec::with_capacity(targets.len() * width);
            for t in targets {
                let c = class_of(t)?;
                if width == 1 {
                    flat.push(c as f64);
                } else {
                    flat.extend((0..width).map(|k| if k == c { 1.0 } else { 0.0 }));
                }
            }
            g.bce_with_logits(out, &flat)
        }
        LossKind::Mse => {
            let mut flat = Vec::with_capacity(targets.len() * width);
            for t in targets {
                match t {
                    Target::Values(v) => flat.extend_from_slice(v),
                    Target::Class(_) => bail!(Contract, "class target under a regression loss"),
                }
            }
            let target = g.constant_rows(targets.len(), width, flat)?;
            g.mse(out, target)
        }
    }
}

fn class_of(t: &Target) -> Result<usize> {
    match t {
        Target::Class(c) => Ok(*c),
        Target::Values(_) => bail!(Contract, "value target under a classification loss"),
    }
}

fn head_outputs<'p>(g: &mut Graph<'p>, model: &'p ModelState, sets: &[&TripletSet], head: &str) -> Result<Var> {
    let batch = embed_sets(g, model, sets, None)?;
    let hidden = model.encode(g, &batch)?;
    model.decode_recon(g, hidden, &batch.segments, head)
}

/// Raw head outputs (logits or regression values), one row per set.
pub fn predict(model: &ModelState, sets: &[&TripletSet], head: &str, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    if batch_size == 0 {
        bail!(Config, "batch size must be positive");
    }
    let width = model.head(head)?.spec.out_dim;
    let mut out = Vec::with_capacity(sets.len());
    for chunk in sets.chunks(batch_size) {
        let mut g = Graph::with_params(&model.store);
        let y = head_outputs(&mut g, model, chunk, head)?;
        out.extend(g.value(y).chunks(width).map(<[f64]>::to_vec));
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, v)| if *v > row[best] { i } else { best })
}

/// Mean loss and task metrics of `head` on `examples`.
///
/// Classification reports `acc` and `f1` (binary with two classes,
/// weighted otherwise) plus `auc` for two classes when both occur;
/// regression reports `mse`, `mae` and `rmse` over all output values.
pub fn evaluate(model: &ModelState, examples: &[Example], cfg: &FinetuneConfig) -> Result<BTreeMap<String, f64>> {
    if examples.is_empty() {
        bail!(Contract, "no examples to evaluate");
    }
    cfg.validate(examples)?;
    let width = model.head(&cfg.head)?.spec.out_dim;
    if width != cfg.head_out_dim {
        bail!(Config, "head {} has width {}, config says {}", cfg.head, width, cfg.head_out_dim);
    }
    let mut total = 0.0;
    let mut outputs = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(cfg.batch_size) {
        let mut g = Graph::with_params(&model.store);
        let sets: Vec<&TripletSet> = chunk.iter().map(|e| &e.set).collect();
        let y = head_outputs(&mut g, model, &sets, &cfg.head)?;
        let targets: Vec<&Target> = chunk.iter().map(|e| &e.target).collect();
        let l = batch_loss(&mut g, y, &targets, cfg.loss, width)?;
        total += g.scalar(l) * chunk.len() as f64;
        outputs.extend(g.value(y).chunks(width).map(<[f64]>::to_vec));
    }
    let mut m = BTreeMap::new();
    m.insert("loss".to_string(), total / examples.len() as f64);
    if cfg.loss.is_classification() {
        let truth: Vec<usize> = examples.iter().map(|e| class_of(&e.target)).collect::<Result<_>>()?;
        let binary = width <= 2;
        let score = |row: &[f64]| if width == 1 { row[0] } else { row[1] - row[0] };
        let pred: Vec<usize> = outputs
            .iter()
            .map(|row| if width == 1 { usize::from(row[0] > 0.0) } else { argmax(row) })
            .collect();
        let b = EvalBatch::classification(&truth, &pred)?;
        m.insert("acc".to_string(), metrics::metric_acc(&b)?);
        let avg = if binary { F1Average::Binary } else { F1Average::Weighted };
        m.insert("f1".to_string(), metrics::metric_f1(&b, avg)?.value);
        if binary {
            let labels: Vec<bool> = truth.iter().map(|&c| c == 1).collect();
            let scores: Vec<f64> = outputs.iter().map(|r| score(r)).collect();
            if let Ok(auc) = metrics::metric_auc(&EvalBatch::scores(&labels, &scores)?) {
                m.insert("auc".to_string(), auc);
            }
        }
    } else {
        let y: Vec<f64> = examples
            .iter()
            .flat_map(|e| match &e.target {
                Target::Values(v) => v.clone(),
                Target::Class(_) => Vec::new(),
            })
            .collect();
        let y_hat: Vec<f64> = outputs.concat();
        let b = EvalBatch::regression(&y, &y_hat)?;
        m.insert("mse".to_string(), metrics::metric_mse(&b)?);
        m.insert("mae".to_string(), metrics::metric_mae(&b)?);
        m.insert("rmse".to_string(), metrics::metric_rmse(&b)?);
    }
    Ok(m)
}

/// Re-initializes the task head, then trains with AdamW at a constant
/// learning rate. The body is updated too unless `freeze_body` is set.
///
/// Returns one record per epoch, starting with epoch 0 before training;
/// metrics are measured on `eval_set`.
pub fn finetune(model: &mut ModelState, train: &[Example], eval_set: &[Example], cfg: &FinetuneConfig) -> Result<Vec<EpochRecord>> {
    if train.is_empty() {
        bail!(Contract, "no training examples");
    }
    cfg.validate(train)?;
    cfg.validate(eval_set)?;
    model.attach_head(&cfg.head, cfg.head_spec(), cfg.head_init, cfg.seed)?;
    model.freeze_body(cfg.freeze_body);
    let opt = cfg.optimizer();
    let mut adam = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    trace.push(EpochRecord { epoch: 0, train_loss: None, metrics: evaluate(model, eval_set, cfg)? });
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (loss, grads) = {
                let mut g = Graph::with_params(&model.store);
                let sets: Vec<&TripletSet> = chunk.iter().map(|&i| &train[i].set).collect();
                let y = head_outputs(&mut g, model, &sets, &cfg.head)?;
                let targets: Vec<&Target> = chunk.iter().map(|&i| &train[i].target).collect();
                let l = batch_loss(&mut g, y, &targets, cfg.loss, cfg.head_out_dim)?;
                g.backward(l)?;
                (g.scalar(l), g.into_param_grads())
            };
            adam.step(&mut model.store, &grads, &opt, cfg.lr);
            total += loss * chunk.len() as f64;
        }
        trace.push(EpochRecord { epoch, train_loss: Some(total / train.len() as f64), metrics: evaluate(model, eval_set, cfg)? });
    }
    Ok(trace)
}
