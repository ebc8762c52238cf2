//! Imputation, normalization and corruption of raw samples.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::modality::ModalityKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Discrete,
    Continuous,
    TimeSeries,
}

/// Fills missing entries: the most frequent value for discrete columns
/// (smallest value on ties), the mean for continuous ones and zero for time
/// series.
pub fn impute_missing(column: &[Option<f64>], kind: ColumnKind) -> Result<Vec<f64>> {
    let present: Vec<f64> = column.iter().flatten().copied().collect();
    let fill = match kind {
        ColumnKind::TimeSeries => 0.0,
        _ if present.is_empty() => bail!(Imputation, "column has no observed values"),
        ColumnKind::Continuous => present.iter().sum::<f64>() / present.len() as f64,
        ColumnKind::Discrete => {
            let mut sorted = present;
            sorted.sort_by(f64::total_cmp);
            let (mut best, mut best_run) = (sorted[0], 0);
            let mut i = 0;
            while i < sorted.len() {
                let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
                if j > best_run {
                    (best, best_run) = (sorted[i], j);
                }
                i += j;
            }
            best
        }
    };
    Ok(column.iter().map(|v| v.unwrap_or(fill)).collect())
}

/// Channel statistics applied to images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for ImageNorm {
    fn default() -> Self {
        Self { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] }
    }
}

/// Location and scale used by a normalization, one entry per column
/// (tables), window (time series) or channel (images).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Entries whose variance was zero; their std was replaced by 1.
    pub degenerate: Vec<bool>,
}

impl NormStats {
    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, bool) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var > 0.0 {
        (mean, libm::sqrt(var), false)
    } else {
        (mean, 1.0, true)
    }
}

/// Normalizes a dataset of samples of one modality.
///
/// Tables are z-scored per column over the dataset, time-series windows
/// per window, images per channel with fixed constants; other modalities
/// pass through.
pub fn normalize(samples: &[Vec<f64>], modality: ModalityKind, image: &ImageNorm) -> Result<(Vec<Vec<f64>>, NormStats)> {
    if samples.is_empty() || samples.iter().any(Vec::is_empty) {
        bail!(Contract, "nothing to normalize");
    }
    match modality {
        ModalityKind::Table => {
            let d = samples[0].len();
            if samples.iter().any(|s| s.len() != d) {
                bail!(Dimension, "table rows of unequal length");
            }
            let mut stats = NormStats::default();
            for c in 0..d {
                let (m, s, deg) = mean_std(samples.iter().map(|r| r[c]));
                stats.mean.push(m);
                stats.std.push(s);
                stats.degenerate.push(deg);
            }
            let out = samples
                .iter()
                .map(|r| r.iter().enumerate().map(|(c, v)| (v - stats.mean[c]) / stats.std[c]).collect())
                .collect();
            Ok((out, stats))
        }
        ModalityKind::TimeSeries => {
            let mut stats = NormStats::default();
            let out = samples
                .iter()
                .map(|w| {
                    let (m, s, deg) = mean_std(w.iter().copied());
                    stats.mean.push(m);
                    stats.std.push(s);
                    stats.degenerate.push(deg);
                    w.iter().map(|v| (v - m) / s).collect()
                })
                .collect();
            Ok((out, stats))
        }
        ModalityKind::Image => {
            if samples.iter().any(|s| s.len() % 3 != 0) {
                bail!(Dimension, "image values are not a multiple of 3 channels");
            }
            let out = samples
                .iter()
                .map(|s| s.iter().enumerate().map(|(i, v)| (v - image.mean[i % 3]) / image.std[i % 3]).collect())
                .collect();
            Ok((out, NormStats { mean: image.mean.to_vec(), std: image.std.to_vec(), degenerate: vec![false; 3] }))
        }
        _ => Ok((samples.to_vec(), NormStats::default())),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    /// Zero a random subset of values, add Gaussian noise to the rest.
    NumericMaskNoise,
    /// Replace a random subset of token ids by the mask id.
    TextMaskId,
    /// Replace a fixed share of triplet tokens by the mask token.
    ImageTokenMask,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub modality: ModalityKind,
    pub mask_fraction: f64,
    pub noise_variance: f64,
    pub mode: CorruptionMode,
}

impl CorruptionSpec {
    pub fn default_for(modality: ModalityKind) -> Result<Self> {
        let (mask_fraction, noise_variance, mode) = match modality {
            ModalityKind::Table | ModalityKind::TimeSeries | ModalityKind::Graph => (0.10, 0.10, CorruptionMode::NumericMaskNoise),
            ModalityKind::Text => (0.15, 0.0, CorruptionMode::TextMaskId),
            ModalityKind::Image => (0.75, 0.0, CorruptionMode::ImageTokenMask),
            _ => bail!(Config, "{} is not a pre-training modality", modality),
        };
        Ok(Self { modality, mask_fraction, noise_variance, mode })
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_fraction) {
            bail!(Config, "mask fraction {} outside [0, 1]", self.mask_fraction);
        }
        if !(self.noise_variance >= 0.0) || !self.noise_variance.is_finite() {
            bail!(Config, "noise variance {} must be finite and non-negative", self.noise_variance);
        }
        let expected = match self.modality {
            ModalityKind::Text => CorruptionMode::TextMaskId,
            ModalityKind::Image => CorruptionMode::ImageTokenMask,
            _ => CorruptionMode::NumericMaskNoise,
        };
        if self.mode != expected {
            bail!(Config, "{:?} corruption does not apply to {}", self.mode, self.modality);
        }
        Ok(())
    }

    fn expect(&self, mode: CorruptionMode) -> Result<()> {
        self.validate()?;
        if self.mode != mode {
            bail!(Config, "spec is {:?}, operation needs {:?}", self.mode, mode);
        }
        Ok(())
    }
}

/// Numeric corruption. Returns the corrupted values and the sorted masked
/// positions; masked values are exactly zero.
pub fn corrupt_values<R: Rng + ?Sized>(x: &[f64], spec: &CorruptionSpec, rng: &mut R) -> Result<(Vec<f64>, Vec<usize>)> {
    spec.expect(CorruptionMode::NumericMaskNoise)?;
    let noise = (spec.noise_variance > 0.0).then(|| Normal::new(0.0, libm::sqrt(spec.noise_variance)).expect("finite std"));
    let mut masked = Vec::new();
    let out = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if spec.mask_fraction > 0.0 && rng.random::<f64>() < spec.mask_fraction {
                masked.push(i);
                0.0
            } else {
                noise.as_ref().map_or(v, |n| v + n.sample(rng))
            }
        })
        .collect();
    Ok((out, masked))
}

/// Text corruption: each id is independently replaced by `mask_id` with
/// probability `mask_fraction`.
pub fn corrupt_ids<R: Rng + ?Sized>(ids: &[u32], spec: &CorruptionSpec, mask_id: u32, rng: &mut R) -> Result<(Vec<u32>, Vec<usize>)> {
    spec.expect(CorruptionMode::TextMaskId)?;
    let mut masked = Vec::new();
    let out = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            if spec.mask_fraction > 0.0 && rng.random::<f64>() < spec.mask_fraction {
                masked.push(i);
                mask_id
            } else {
                id
            }
        })
        .collect();
    Ok((out, masked))
}

/// Token masking: exactly `⌊mask_fraction · count⌋` of `count` triplets,
/// chosen uniformly without replacement, are flagged.
pub fn choose_masked_tokens<R: Rng + ?Sized>(count: usize, spec: &CorruptionSpec, rng: &mut R) -> Result<Vec<bool>> {
    spec.expect(CorruptionMode::ImageTokenMask)?;
    let k = libm::floor(spec.mask_fraction * count as f64) as usize;
    let mut out = vec![false; count];
    for i in index::sample(rng, count, k.min(count)) {
        out[i] = true;
    }
    Ok(out)
}
