//! Run manifests: everything a pre-training or fine-tuning run depends on.

use std::fs;
use std::path::{Path, PathBuf};

use pangaea_core::eval::FinetuneConfig;
use pangaea_core::pretrain::PretrainConfig;
use pangaea_core::transformer::ModelConfig;
use pangaea_core::ModalityKind;
use serde::{Deserialize, Serialize};

use crate::error::{IoError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// One update per step from the mean of the modality gradients.
    #[default]
    Parallel,
    /// One update per modality batch.
    Ct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct FinetuneSection {
    /// Checkpoint to start from; a fresh model when absent.
    pub checkpoint: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub config: FinetuneConfig,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunManifest {
    pub seed: u64,
    /// Modalities to pre-train on; every listed dataset when empty.
    pub modalities: Vec<ModalityKind>,
    pub model: ModelConfig,
    /// Optimizer, schedule shape and corruption settings. The schedule
    /// length is always the number of optimizer updates of the run.
    pub pretrain: PretrainConfig,
    pub strategy: Strategy,
    pub steps: u64,
    /// Samples per modality batch.
    pub batch_size: usize,
    /// Pre-training dataset directories.
    pub datasets: Vec<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    /// Also keep a checkpoint every this many steps.
    pub checkpoint_every: Option<u64>,
    pub finetune: FinetuneSection,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            seed: 0,
            modalities: Vec::new(),
            model: ModelConfig::desk(),
            pretrain: PretrainConfig::default(),
            strategy: Strategy::Parallel,
            steps: 100,
            batch_size: 32,
            datasets: Vec::new(),
            init_checkpoint: None,
            out: PathBuf::from("out"),
            checkpoint_every: None,
            finetune: FinetuneSection::default(),
        }
    }
}

impl RunManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(IoError::io(path))?;
        let mut m: Self = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        m.resolve_paths(base);
        Ok(m)
    }

    /// Makes relative paths relative to the manifest's directory.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.datasets.iter_mut().for_each(fix);
        fix(&mut self.out);
        if let Some(p) = self.init_checkpoint.as_mut() {
            fix(p);
        }
        for p in [&mut self.finetune.checkpoint, &mut self.finetune.train, &mut self.finetune.eval].into_iter().flatten() {
            fix(p);
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        crate::write_atomic(path.as_ref(), text.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(pangaea_core::Error::Config("batch size must be positive".into()).into());
        }
        for m in &self.modalities {
            if !m.is_pretraining() {
                return Err(pangaea_core::Error::Config(format!("{m} has no pre-training objective")).into());
            }
        }
        Ok(())
    }
}
