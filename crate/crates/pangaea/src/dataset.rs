//! Dataset directories: `meta.json`, `samples.pgt` with one row per sample
//! (per node for graphs), `targets.pgt` when the data is labelled, and a
//! `table.csv` copy of table data.

use std::fs;
use std::path::Path;

use pangaea_core::data::{self, Adjacency, EncodeOptions, LinearTruth, SynthDataset, SynthSpec, TableTask, POINT_SHAPES};
use pangaea_core::eval::{Example, LossKind, Target};
use pangaea_core::pretrain::{normalize, ImageNorm, NormStats};
use pangaea_core::triplet::TripletSet;
use pangaea_core::{Error, ModalityKind};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IoError, Result};
use crate::tabular::Table;
use crate::tensorfile::TensorFile;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskSpec {
    Classification { classes: usize },
    Regression,
}

impl TaskSpec {
    pub fn loss(self) -> LossKind {
        match self {
            TaskSpec::Classification { .. } => LossKind::CrossEntropy,
            TaskSpec::Regression => LossKind::Mse,
        }
    }

    pub fn out_dim(self) -> usize {
        match self {
            TaskSpec::Classification { classes } => classes,
            TaskSpec::Regression => 1,
        }
    }

    fn target(self, v: f64) -> Result<Target> {
        match self {
            TaskSpec::Classification { classes } => {
                if v < 0.0 || v.fract() != 0.0 || v as usize >= classes {
                    return Err(Error::Contract(format!("label {v} outside 0..{classes}")).into());
                }
                Ok(Target::Class(v as usize))
            }
            TaskSpec::Regression => Ok(Target::Values(vec![v])),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub modality: ModalityKind,
    #[serde(default)]
    pub task: Option<TaskSpec>,
    /// Seed of the table part split.
    #[serde(default)]
    pub encode_seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<(usize, usize)>,
    /// Graph nodes that form the samples of this split; all nodes when
    /// absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<Vec<usize>>,
    /// Point clouds stored as raw `points × 3` rows rather than groups.
    #[serde(default)]
    pub raw_points: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<LinearTruth>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SynthSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    /// One row per sample, or per node for graphs.
    pub samples: Vec<Vec<f64>>,
    /// One entry per sample, or per anchor for graphs.
    pub targets: Vec<f64>,
}

/// Point-cloud grouping used when encoding raw clouds.
pub const POINT_GROUPS: usize = 64;
pub const POINT_GROUP_SIZE: usize = 32;

impl Dataset {
    pub fn from_synth(ds: SynthDataset, spec: &SynthSpec, seed: u64) -> Self {
        let task = match spec {
            SynthSpec::Table { task: TableTask::Binary, .. } => Some(TaskSpec::Classification { classes: 2 }),
            SynthSpec::Table { .. } => Some(TaskSpec::Regression),
            SynthSpec::Image { classes, .. } | SynthSpec::Audio { classes, .. } => Some(TaskSpec::Classification { classes: *classes }),
            SynthSpec::Graph { blocks, .. } => Some(TaskSpec::Classification { classes: *blocks }),
            SynthSpec::PointCloud { .. } => Some(TaskSpec::Classification { classes: POINT_SHAPES }),
            SynthSpec::TimeSeries { .. } | SynthSpec::Text { .. } => None,
        };
        Self {
            meta: DatasetMeta {
                modality: ds.modality,
                task,
                encode_seed: seed,
                edges: ds.edges,
                anchors: None,
                raw_points: ds.modality == ModalityKind::PointCloud,
                truth: ds.truth,
                generator: Some(spec.clone()),
                seed: Some(seed),
            },
            samples: ds.samples,
            targets: ds.targets,
        }
    }

    pub fn modality(&self) -> ModalityKind {
        self.meta.modality
    }

    /// Number of samples; anchors for graphs.
    pub fn len(&self) -> usize {
        match (&self.meta.anchors, self.modality()) {
            (Some(a), _) => a.len(),
            _ => self.samples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn anchors(&self) -> Vec<usize> {
        self.meta.anchors.clone().unwrap_or_else(|| (0..self.samples.len()).collect())
    }

    /// Deterministic split into a training part and an evaluation part
    /// holding `round(fraction × len)` samples.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("evaluation fraction {fraction} outside [0, 1)")).into());
        }
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_eval = (fraction * n as f64).round() as usize;
        let (eval_idx, train_idx) = order.split_at(n_eval);
        let mut eval_idx = eval_idx.to_vec();
        let mut train_idx = train_idx.to_vec();
        eval_idx.sort_unstable();
        train_idx.sort_unstable();
        Ok((self.subset(&train_idx), self.subset(&eval_idx)))
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        let targets = if self.targets.is_empty() { Vec::new() } else { idx.iter().map(|&i| self.targets[i]).collect() };
        if self.modality() == ModalityKind::Graph {
            let anchors = self.anchors();
            let mut meta = self.meta.clone();
            meta.anchors = Some(idx.iter().map(|&i| anchors[i]).collect());
            return Dataset { meta, samples: self.samples.clone(), targets };
        }
        Dataset { meta: self.meta.clone(), samples: idx.iter().map(|&i| self.samples[i].clone()).collect(), targets }
    }

    /// Samples in the flat layout of `encode_sample`: graph anchors with
    /// 32 sampled neighbours, point clouds grouped, everything else as
    /// stored.
    pub fn flat_samples(&self, seed: u64) -> Result<Vec<Vec<f64>>> {
        match self.modality() {
            ModalityKind::Graph => {
                let adj = Adjacency::from_edges(self.samples.len(), &self.meta.edges)?;
                self.anchors()
                    .into_iter()
                    .map(|a| Ok(data::graph_sample(&self.samples, &adj, a, seed ^ a as u64)?))
                    .collect()
            }
            ModalityKind::PointCloud if self.meta.raw_points => self
                .samples
                .iter()
                .map(|s| {
                    let pts: Vec<[f64; 3]> = s.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
                    Ok(data::group_pointcloud(&pts, POINT_GROUPS, POINT_GROUP_SIZE, seed)?)
                })
                .collect(),
            _ => Ok(self.samples.clone()),
        }
    }

    /// Flat samples after the modality's normalization. Tables reuse
    /// `stats` when given, so evaluation data follows the training columns.
    pub fn prepared(&self, seed: u64, stats: Option<&NormStats>) -> Result<(Vec<Vec<f64>>, NormStats)> {
        let flat = self.flat_samples(seed)?;
        match (self.modality(), stats) {
            (ModalityKind::Table, Some(s)) => {
                let out = flat
                    .iter()
                    .map(|r| {
                        if r.len() != s.mean.len() {
                            return Err(Error::Dimension(format!("{} columns, statistics cover {}", r.len(), s.mean.len())).into());
                        }
                        Ok(r.iter().enumerate().map(|(c, v)| (v - s.mean[c]) / s.std[c]).collect())
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((out, s.clone()))
            }
            (m, _) => Ok(normalize(&flat, m, &ImageNorm::default())?),
        }
    }

    pub fn encode_options(&self, vocab: usize) -> EncodeOptions {
        EncodeOptions { table_seed: self.meta.encode_seed, vocab, groups: POINT_GROUPS, group_size: POINT_GROUP_SIZE }
    }

    pub fn encode(&self, seed: u64, vocab: usize, stats: Option<&NormStats>) -> Result<(Vec<TripletSet>, NormStats)> {
        let (flat, stats) = self.prepared(seed, stats)?;
        let opts = self.encode_options(vocab);
        let sets = flat.iter().map(|s| data::encode_sample(self.modality(), s, &opts)).collect::<pangaea_core::Result<_>>()?;
        Ok((sets, stats))
    }

    /// Labelled examples for fine-tuning or evaluation.
    pub fn examples(&self, seed: u64, vocab: usize, stats: Option<&NormStats>) -> Result<(Vec<Example>, NormStats)> {
        let task = self.meta.task.ok_or_else(|| Error::Config(format!("{} dataset has no task labels", self.modality())))?;
        if self.targets.len() != self.len() {
            return Err(Error::Dimension(format!("{} targets for {} samples", self.targets.len(), self.len())).into());
        }
        let (sets, stats) = self.encode(seed, vocab, stats)?;
        let examples = sets
            .into_iter()
            .zip(&self.targets)
            .map(|(set, &t)| Ok(Example { set, target: task.target(t)? }))
            .collect::<Result<_>>()?;
        Ok((examples, stats))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        crate::ensure_dir(dir)?;
        let width = self.samples.first().map_or(0, Vec::len);
        if self.samples.iter().any(|s| s.len() != width) {
            return Err(Error::Dimension("samples of unequal length".into()).into());
        }
        let flat: Vec<f64> = self.samples.iter().flatten().copied().collect();
        TensorFile::from_f64(vec![self.samples.len(), width], &flat)?.write(dir.join("samples.pgt"))?;
        if !self.targets.is_empty() {
            TensorFile::from_f64(vec![self.targets.len()], &self.targets)?.write(dir.join("targets.pgt"))?;
        }
        if self.modality() == ModalityKind::Table {
            let mut table = Table::from_rows(&self.samples);
            if self.targets.len() == self.samples.len() {
                table.header.push("target".into());
                table.schema.push(crate::tabular::CsvColumn::Continuous);
                table.categories.push(Vec::new());
                for (row, &t) in table.rows.iter_mut().zip(&self.targets) {
                    row.push(Some(t));
                }
            }
            table.write(dir.join("table.csv"))?;
        }
        let meta = serde_json::to_string_pretty(&self.meta)?;
        crate::write_atomic(&dir.join("meta.json"), meta.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("meta.json");
        let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(&meta_path).map_err(IoError::io(&meta_path))?)?;
        let samples = TensorFile::read(dir.join("samples.pgt"))?;
        if samples.dims.len() != 2 {
            return Err(IoError::format("dataset", format!("samples.pgt has rank {}, expected 2", samples.dims.len())));
        }
        let targets_path = dir.join("targets.pgt");
        let targets = if targets_path.exists() { TensorFile::read(&targets_path)?.to_f64() } else { Vec::new() };
        Ok(Self { meta, samples: samples.rows(), targets })
    }
}
