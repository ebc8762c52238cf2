use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
    /// Binary labels with real-valued scores.
    RankingScore,
}

/// Ground truth and predictions of equal, non-zero length. Class labels
/// are stored as non-negative integral values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalBatch {
    pub y: Vec<f64>,
    pub y_hat: Vec<f64>,
    pub task: TaskKind,
}

impl EvalBatch {
    pub fn new(y: Vec<f64>, y_hat: Vec<f64>, task: TaskKind) -> Result<Self> {
        if y.is_empty() {
            bail!(Contract, "empty evaluation batch");
        }
        if y.len() != y_hat.len() {
            bail!(Contract, "{} targets but {} predictions", y.len(), y_hat.len());
        }
        let is_label = |v: &f64| *v >= 0.0 && v.fract() == 0.0;
        let ok = match task {
            TaskKind::Classification => y.iter().chain(&y_hat).all(is_label),
            TaskKind::RankingScore => y.iter().all(|&v| v == 0.0 || v == 1.0) && y_hat.iter().all(|v| !v.is_nan()),
            TaskKind::Regression => y.iter().chain(&y_hat).all(|v| v.is_finite()),
        };
        if !ok {
            bail!(Contract, "values do not fit a {:?} batch", task);
        }
        Ok(Self { y, y_hat, task })
    }

    pub fn classification(y: &[usize], y_hat: &[usize]) -> Result<Self> {
        Self::new(y.iter().map(|&v| v as f64).collect(), y_hat.iter().map(|&v| v as f64).collect(), TaskKind::Classification)
    }

    pub fn regression(y: &[f64], y_hat: &[f64]) -> Result<Self> {
        Self::new(y.to_vec(), y_hat.to_vec(), TaskKind::Regression)
    }

    pub fn scores(labels: &[bool], scores: &[f64]) -> Result<Self> {
        Self::new(labels.iter().map(|&b| f64::from(u8::from(b))).collect(), scores.to_vec(), TaskKind::RankingScore)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn expect(&self, task: TaskKind) -> Result<()> {
        if self.task != task {
            bail!(Contract, "{:?} metric on a {:?} batch", task, self.task);
        }
        Ok(())
    }
}

/// A metric value that may have been defined by convention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flagged {
    pub value: f64,
    /// Set when a zero denominator was replaced by the value 0.
    pub undefined: bool,
}

pub fn metric_acc(b: &EvalBatch) -> Result<f64> {
    b.expect(TaskKind::Classification)?;
    let hits = b.y.iter().zip(&b.y_hat).filter(|(a, p)| a == p).count();
    Ok(hits as f64 / b.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Average {
    /// Class 1 is the positive class.
    Binary,
    /// Support-weighted mean of one-vs-rest F1 over the true classes.
    Weighted,
}

fn one_vs_rest_f1(b: &EvalBatch, class: f64) -> Flagged {
    let tp = b.y.iter().zip(&b.y_hat).filter(|(a, p)| **a == class && **p == class).count();
    let denom = b.y.iter().filter(|&&a| a == class).count() + b.y_hat.iter().filter(|&&p| p == class).count();
    if denom == 0 {
        Flagged { value: 0.0, undefined: true }
    } else {
        Flagged { value: 2.0 * tp as f64 / denom as f64, undefined: false }
    }
}

pub fn metric_f1(b: &EvalBatch, average: F1Average) -> Result<Flagged> {
    b.expect(TaskKind::Classification)?;
    Ok(match average {
        F1Average::Binary => one_vs_rest_f1(b, 1.0),
        F1Average::Weighted => {
            let mut classes = b.y.clone();
            classes.sort_by(f64::total_cmp);
            classes.dedup();
            let n = b.len() as f64;
            let mut value = 0.0;
            let mut undefined = false;
            for c in classes {
                let support = b.y.iter().filter(|&&a| a == c).count() as f64;
                let f = one_vs_rest_f1(b, c);
                undefined |= f.undefined;
                value += support / n * f.value;
            }
            Flagged { value, undefined }
        }
    })
}

fn residuals(b: &EvalBatch) -> Result<impl Iterator<Item = f64> + '_> {
    b.expect(TaskKind::Regression)?;
    Ok(b.y.iter().zip(&b.y_hat).map(|(a, p)| a - p))
}

pub fn metric_mse(b: &EvalBatch) -> Result<f64> {
    Ok(residuals(b)?.map(|r| r * r).sum::<f64>() / b.len() as f64)
}

pub fn metric_mae(b: &EvalBatch) -> Result<f64> {
    Ok(residuals(b)?.map(f64::abs).sum::<f64>() / b.len() as f64)
}

pub fn metric_rmse(b: &EvalBatch) -> Result<f64> {
    Ok(libm::sqrt(metric_mse(b)?))
}

/// Share of (positive, negative) pairs whose positive score is strictly
/// larger; ties count as misses.
pub fn metric_auc(b: &EvalBatch) -> Result<f64> {
    b.expect(TaskKind::RankingScore)?;
    let positives = b.y.iter().filter(|&&v| v == 1.0).count();
    let negatives = b.len() - positives;
    if positives == 0 || negatives == 0 {
        bail!(UndefinedMetric, "AUC needs both classes ({} positive, {} negative)", positives, negatives);
    }
    let mut order: Vec<usize> = (0..b.len()).collect();
    order.sort_by(|&i, &j| b.y_hat[i].total_cmp(&b.y_hat[j]));
    let mut below: u64 = 0;
    let mut wins: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let score = b.y_hat[order[i]];
        let run = order[i..].iter().take_while(|&&k| b.y_hat[k] == score).count();
        let pos = order[i..i + run].iter().filter(|&&k| b.y[k] == 1.0).count() as u64;
        wins += pos * below;
        below += run as u64 - pos;
        i += run;
    }
    Ok(wins as f64 / (positives as f64 * negatives as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

/// Performance relative to the baseline `x0`, in percent (100 = equal).
pub fn percentage(x: f64, x0: f64, direction: Direction) -> Result<f64> {
    if x0 == 0.0 {
        bail!(Contract, "baseline value is zero");
    }
    Ok(match direction {
        Direction::HigherBetter => (x - x0) / x0 * 100.0 + 100.0,
        Direction::LowerBetter => (x0 - x) / x0 * 100.0 + 100.0,
    })
}

/// `percentage − 100`.
pub fn improvement(x: f64, x0: f64, direction: Direction) -> Result<f64> {
    Ok(percentage(x, x0, direction)? - 100.0)
}

pub fn minmax_norm(xs: &[f64]) -> Result<Vec<f64>> {
    let (min, max) = min_max(xs)?;
    if !(max > min) {
        bail!(DegenerateNormalization, "all {} values are equal", xs.len());
    }
    Ok(xs.iter().map(|x| (x - min) / (max - min)).collect())
}

fn min_max(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        bail!(Contract, "empty list");
    }
    Ok(xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignedNorm {
    pub values: Vec<f64>,
    /// Set when the upper side's range is zero (`max == x0`); its members
    /// then all equal `x0` and map to 0.
    pub degenerate: bool,
}

/// Maps values below `x0` to `[-1, 0)` by `-(x - x0)/(min - x0)` and the
/// rest to `[0, 1]` by `(x - x0)/(max - x0)`.
pub fn signed_norm(xs: &[f64], x0: f64) -> Result<SignedNorm> {
    let (min, max) = min_max(xs)?;
    let mut degenerate = false;
    let values = xs
        .iter()
        .map(|&x| {
            let denom = if x < x0 { min - x0 } else { max - x0 };
            if denom == 0.0 {
                degenerate = true;
                0.0
            } else if x < x0 {
                -(x - x0) / denom
            } else {
                (x - x0) / denom
            }
        })
        .collect();
    Ok(SignedNorm { values, degenerate })
}
