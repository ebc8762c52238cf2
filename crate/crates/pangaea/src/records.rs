//! Line-delimited JSON records of training progress: one `(step | epoch,
//! name, value)` entry per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use pangaea_core::eval::EpochRecord;
use pangaea_core::pretrain::StepRecord;
use serde::{Deserialize, Serialize};

use crate::error::{IoError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<u64>,
    pub name: String,
    /// Non-finite values are written as `null`.
    pub value: Option<f64>,
}

impl Record {
    pub fn at_step(step: u64, name: impl Into<String>, value: f64) -> Self {
        Self { step: Some(step), epoch: None, name: name.into(), value: value.is_finite().then_some(value) }
    }

    pub fn at_epoch(epoch: u64, name: impl Into<String>, value: f64) -> Self {
        Self { step: None, epoch: Some(epoch), name: name.into(), value: value.is_finite().then_some(value) }
    }
}

/// Learning rate, per-modality losses and their mean.
pub fn step_records(r: &StepRecord) -> Vec<Record> {
    let mut out = vec![Record::at_step(r.step, "lr", r.lr)];
    out.extend(r.losses.iter().map(|(m, l)| Record::at_step(r.step, format!("loss/{m}"), *l)));
    out.push(Record::at_step(r.step, "loss/mean", r.mean_loss()));
    out
}

pub fn epoch_records(r: &EpochRecord) -> Vec<Record> {
    let epoch = r.epoch as u64;
    let mut out = Vec::new();
    if let Some(l) = r.train_loss {
        out.push(Record::at_epoch(epoch, "train/loss", l));
    }
    out.extend(r.metrics.iter().map(|(k, v)| Record::at_epoch(epoch, format!("eval/{k}"), *v)));
    out
}

pub struct RecordWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl RecordWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            crate::ensure_dir(dir)?;
        }
        let file = File::create(&path).map_err(IoError::io(&path))?;
        Ok(Self { path, out: BufWriter::new(file) })
    }

    pub fn write(&mut self, record: &Record) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n").map_err(IoError::io(&self.path))
    }

    pub fn write_all(&mut self, records: &[Record]) -> Result<()> {
        records.iter().try_for_each(|r| self.write(r))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(IoError::io(&self.path))
    }
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(IoError::io(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(IoError::io(path))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
