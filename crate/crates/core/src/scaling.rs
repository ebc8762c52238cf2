//! The modality scaling curve `y = 1 − (1 − p)^x + c`, its least-squares
//! fit, aggregation of combination sweeps and cross-modality attention
//! affinity.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::eval::Direction;
use crate::modality::ModalityKind;
use crate::transformer::AttentionMaps;

/// Probability that at least one of `k` independent trials with success
/// probability `p` succeeds.
pub fn geometric_cdf(p: f64, k: u32) -> Result<f64> {
    check_p(p)?;
    Ok(1.0 - libm::pow(1.0 - p, f64::from(k)))
}

fn check_p(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        bail!(Domain, "probability {} outside [0, 1]", p);
    }
    Ok(())
}

pub fn predicted_y(p: f64, c: f64, x: f64) -> Result<f64> {
    check_p(p)?;
    Ok(curve(p, c, x))
}

fn curve(p: f64, c: f64, x: f64) -> f64 {
    1.0 - libm::pow(1.0 - p, x) + c
}

/// Derivative of the curve with respect to `p`.
fn curve_dp(p: f64, x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * libm::pow(1.0 - p, x - 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub p: f64,
    pub c: f64,
    pub residual_sse: f64,
    pub points: Vec<(u32, f64)>,
    /// Set when `p` ended at the edge of the admissible interval, e.g. for
    /// flat data where the best curve has `p → 0`.
    pub boundary: bool,
}

impl ScalingFit {
    pub fn predict(&self, x: f64) -> f64 {
        curve(self.p, self.c, x)
    }
}

const GRID: usize = 1000;
const P_EDGE: f64 = 1e-9;
const MAX_ITERS: usize = 500;

fn sse(points: &[(u32, f64)], p: f64, c: f64) -> f64 {
    points.iter().map(|&(x, y)| (y - curve(p, c, f64::from(x))).powi(2)).sum()
}

/// The `c` that minimizes the squared error for a fixed `p`.
fn best_c(points: &[(u32, f64)], p: f64) -> f64 {
    points.iter().map(|&(x, y)| y - curve(p, 0.0, f64::from(x))).sum::<f64>() / points.len() as f64
}

/// Least-squares fit of `(p, c)`: the best `p` on a uniform grid over
/// (0, 1) seeds a Levenberg-damped Gauss-Newton refinement.
pub fn fit_scaling(points: &[(u32, f64)]) -> Result<ScalingFit> {
    if points.len() < 2 {
        bail!(Fit, "need at least 2 points, got {}", points.len());
    }
    if points.iter().any(|(_, y)| !y.is_finite()) {
        bail!(Fit, "non-finite y value");
    }
    let distinct: BTreeSet<u32> = points.iter().map(|&(x, _)| x).collect();
    if distinct.len() < 2 {
        bail!(Fit, "all points share x = {}", points[0].0);
    }
    let (mut p, mut c, mut err) = (1..GRID)
        .map(|i| {
            let p = i as f64 / GRID as f64;
            let c = best_c(points, p);
            (p, c, sse(points, p, c))
        })
        .fold((0.5, 0.0, f64::INFINITY), |best, cand| if cand.2 < best.2 { cand } else { best });
    let mut lambda = 1e-3;
    for _ in 0..MAX_ITERS {
        let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(x, y) in points {
            let x = f64::from(x);
            let r = y - curve(p, c, x);
            let jp = curve_dp(p, x);
            a11 += jp * jp;
            a12 += jp;
            a22 += 1.0;
            b1 += jp * r;
            b2 += r;
        }
        let mut improved = false;
        while lambda < 1e12 {
            let (d11, d22) = (a11 * (1.0 + lambda), a22 * (1.0 + lambda));
            let det = d11 * d22 - a12 * a12;
            if det.abs() < f64::MIN_POSITIVE {
                lambda *= 10.0;
                continue;
            }
            let dp = (d22 * b1 - a12 * b2) / det;
            let dc = (d11 * b2 - a12 * b1) / det;
            let np = (p + dp).clamp(P_EDGE, 1.0 - P_EDGE);
            let nc = c + dc;
            let ne = sse(points, np, nc);
            if ne <= err {
                let converged = (np - p).abs() <= 1e-15 && (nc - c).abs() <= 1e-15;
                (p, c, err) = (np, nc, ne);
                lambda = (lambda / 10.0).max(1e-12);
                improved = !converged;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    let boundary = p <= 2.0 * P_EDGE || p >= 1.0 - 2.0 * P_EDGE;
    Ok(ScalingFit { p, c, residual_sse: err, points: points.to_vec(), boundary })
}

/// Downstream scores of a model pre-trained on `subset`, keyed by task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinationResult {
    pub subset: BTreeSet<ModalityKind>,
    pub scores: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CardinalityCurve {
    /// `(subset size, mean normalized score)` for every size with data.
    pub points: Vec<(u32, f64)>,
    /// Sizes in `0..=5` without any result.
    pub gaps: Vec<u32>,
}

/// Min-max normalizes each task across combinations (flipped for
/// lower-is-better tasks), averages per subset size within each task, then
/// averages the tasks.
pub fn aggregate_by_cardinality(results: &[CombinationResult], tasks: &BTreeMap<String, Direction>) -> Result<CardinalityCurve> {
    if results.is_empty() || tasks.is_empty() {
        bail!(Contract, "no results or no tasks to aggregate");
    }
    for r in results {
        if let Some(bad) = r.subset.iter().find(|m| !m.is_pretraining()) {
            bail!(Contract, "{} is not a pre-training modality", bad);
        }
        if let Some(name) = r.scores.keys().find(|k| !tasks.contains_key(*k)) {
            bail!(Contract, "score for undeclared task {:?}", name);
        }
    }
    let mut sorted: Vec<&CombinationResult> = results.iter().collect();
    sorted.sort_by(|a, b| {
        a.subset.cmp(&b.subset).then_with(|| {
            let (ka, kb) = (a.scores.values(), b.scores.values());
            ka.zip(kb).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(core::cmp::Ordering::Equal)
        })
    });
    let mut per_size: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for (task, &direction) in tasks {
        let entries: Vec<(u32, f64)> = sorted.iter().filter_map(|r| r.scores.get(task).map(|&s| (r.subset.len() as u32, s))).collect();
        if entries.is_empty() {
            continue;
        }
        let raw: Vec<f64> = entries.iter().map(|e| e.1).collect();
        let normed = crate::eval::minmax_norm(&raw)?;
        let mut task_means: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        for (&(size, _), &n) in entries.iter().zip(&normed) {
            let v = if direction == Direction::LowerBetter { 1.0 - n } else { n };
            let e = task_means.entry(size).or_default();
            e.0 += v;
            e.1 += 1;
        }
        for (size, (sum, count)) in task_means {
            let e = per_size.entry(size).or_default();
            e.0 += sum / count as f64;
            e.1 += 1;
        }
    }
    let points = per_size.iter().map(|(&x, &(sum, count))| (x, sum / count as f64)).collect();
    let gaps = (0..=5).filter(|x| !per_size.contains_key(x)).collect();
    Ok(CardinalityCurve { points, gaps })
}

/// Layers and heads to average over; `None` selects all of them.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionSlice {
    pub layers: Option<Vec<usize>>,
    pub heads: Option<Vec<usize>>,
}

/// Mean attention between pre-training modalities, in the order of
/// [`ModalityKind::PRETRAINING`]. `None` marks pairs without tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinityMatrix {
    pub modalities: Vec<ModalityKind>,
    pub values: Vec<Vec<Option<f64>>>,
}

/// Averages attention weights from query tokens of modality `a` to key
/// tokens of modality `b` over all sequences and selected layers and heads.
/// `labels[s][t]` names the modality of token `t` of sequence `s`; `None`
/// marks tokens (such as the reconstruction token) that are left out.
pub fn attention_affinity(maps: &[AttentionMaps], labels: &[Vec<Option<ModalityKind>>], slice: &AttentionSlice) -> Result<AffinityMatrix> {
    if maps.is_empty() || maps.len() != labels.len() {
        bail!(Contract, "{} attention maps for {} label lists", maps.len(), labels.len());
    }
    let order = ModalityKind::PRETRAINING;
    let slot = |m: ModalityKind| order.iter().position(|&o| o == m);
    let mut sums = vec![vec![(0.0, 0usize); order.len()]; order.len()];
    let mut any = false;
    for (map, lab) in maps.iter().zip(labels) {
        if lab.len() != map.tokens {
            bail!(Contract, "{} labels for {} tokens", lab.len(), map.tokens);
        }
        let slots: Vec<Option<usize>> = lab
            .iter()
            .map(|l| match l {
                None => Ok(None),
                Some(m) => slot(*m).map(Some).ok_or_else(|| crate::Error::Contract(alloc::format!("{m} is not a pre-training modality"))),
            })
            .collect::<Result<_>>()?;
        any |= slots.iter().any(Option::is_some);
        let layers = select(&slice.layers, map.layers, "layer")?;
        let heads = select(&slice.heads, map.heads, "head")?;
        for &l in &layers {
            for &h in &heads {
                for (q, sq) in slots.iter().enumerate() {
                    let Some(a) = sq else { continue };
                    for (k, sk) in slots.iter().enumerate() {
                        let Some(b) = sk else { continue };
                        let e = &mut sums[*a][*b];
                        e.0 += map.get(l, h, q, k);
                        e.1 += 1;
                    }
                }
            }
        }
    }
    if !any {
        bail!(Contract, "no labelled tokens");
    }
    let values = sums.into_iter().map(|row| row.into_iter().map(|(s, n)| (n > 0).then(|| s / n as f64)).collect()).collect();
    Ok(AffinityMatrix { modalities: order.to_vec(), values })
}

fn select(choice: &Option<Vec<usize>>, count: usize, what: &str) -> Result<Vec<usize>> {
    match choice {
        None => Ok((0..count).collect()),
        Some(list) if list.is_empty() => bail!(Contract, "empty {} selection", what),
        Some(list) => {
            if let Some(bad) = list.iter().find(|&&i| i >= count) {
                bail!(Contract, "{} {} of {}", what, bad, count);
            }
            Ok(list.clone())
        }
    }
}
