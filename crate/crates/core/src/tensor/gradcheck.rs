use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::Rng;

use super::{Gradients, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// One scalar inside a parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Coordinate {
    pub param: ParamId,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub coordinate: Coordinate,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
    /// Largest relative error seen per parameter.
    pub max_rel_error: BTreeMap<ParamId, f64>,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(move |e| !(e.rel_error < self.tolerance))
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }
}

/// `|a − n| / max(1e-12, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Compares `analytic` gradients against central differences of `value`
/// with step `h` at each coordinate.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    mut value: F,
    analytic: &Gradients,
    coordinates: &[Coordinate],
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut entries = Vec::with_capacity(coordinates.len());
    let mut max_rel_error = BTreeMap::new();
    for &c in coordinates {
        let original = store.value(c.param).data()[c.index];
        store.get_mut(c.param).value.data_mut()[c.index] = original + h;
        let plus = value(store);
        store.get_mut(c.param).value.data_mut()[c.index] = original - h;
        let minus = value(store);
        store.get_mut(c.param).value.data_mut()[c.index] = original;
        let (plus, minus) = (plus?, minus?);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(alloc::format!(
                "non-finite objective at {}[{}]",
                store.get(c.param).name,
                c.index
            )));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = analytic.get(c.param).map_or(0.0, |g| g[c.index]);
        let rel_error = relative_error(analytic, numeric);
        let worst = max_rel_error.entry(c.param).or_insert(0.0_f64);
        *worst = worst.max(rel_error);
        entries.push(GradCheckEntry { coordinate: c, analytic, numeric, rel_error });
    }
    Ok(GradCheckReport { tolerance, entries, max_rel_error })
}

/// Builds the objective with `build`, differentiates it once, then checks
/// the sampled coordinates against central differences.
pub fn check_graph_gradients<B>(
    store: &mut ParamStore,
    build: B,
    coordinates: &[Coordinate],
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::with_params(store);
        let loss = build(&mut g)?;
        g.backward(loss)?;
        g.into_param_grads()
    };
    let value = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let loss = build(&mut g)?;
        Ok(g.scalar(loss))
    };
    finite_diff_check(store, value, &analytic, coordinates, h, tolerance)
}

/// Draws `count` coordinates uniformly over all trainable scalars.
pub fn sample_coordinates<R: Rng + ?Sized>(store: &ParamStore, count: usize, rng: &mut R) -> Vec<Coordinate> {
    let spans: Vec<(ParamId, usize)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.value.len()))
        .collect();
    let total: usize = spans.iter().map(|s| s.1).sum();
    if total == 0 {
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let mut k = rng.random_range(0..total);
            for &(param, len) in &spans {
                if k < len {
                    return Coordinate { param, index: k };
                }
                k -= len;
            }
            unreachable!("k < total")
        })
        .collect()
}
