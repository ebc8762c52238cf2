//! Upstream converters (time-series framing, point-cloud grouping, graph
//! neighbour sampling), flat-sample encoding and synthetic datasets.

mod synth;

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::modality::ModalityKind;
use crate::triplet::{self, TripletSet, AUDIO_SHAPE, GRAPH_NEIGHBORS, IMAGE_SHAPE};

pub use synth::{gen_synthetic, LinearTruth, SynthDataset, SynthSpec, TableTask, POINT_SHAPES};

/// Sliding windows of `window` steps taken every `stride` steps.
pub fn frame_timeseries(series: &[f64], window: usize, stride: usize) -> Result<Vec<Vec<f64>>> {
    if window == 0 || stride == 0 {
        bail!(Config, "window and stride must be positive");
    }
    if series.len() < window {
        bail!(Contract, "series of {} steps is shorter than a {}-step window", series.len(), window);
    }
    Ok(series.windows(window).step_by(stride).map(<[f64]>::to_vec).collect())
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

/// Indices of `g` points chosen by farthest point sampling from `start`:
/// each next pick maximizes the distance to the closest point already
/// picked (lowest index on ties).
pub fn farthest_point_sample(points: &[[f64; 3]], g: usize, start: usize) -> Result<Vec<usize>> {
    if g > points.len() {
        bail!(Contract, "{} centres requested from {} points", g, points.len());
    }
    if start >= points.len() {
        bail!(Contract, "start point {} of {}", start, points.len());
    }
    let mut chosen = Vec::with_capacity(g);
    if g == 0 {
        return Ok(chosen);
    }
    chosen.push(start);
    let mut nearest: Vec<f64> = points.iter().map(|p| dist2(p, &points[start])).collect();
    while chosen.len() < g {
        let next = nearest
            .iter()
            .enumerate()
            .fold(0, |best, (i, &d)| if d > nearest[best] { i } else { best });
        chosen.push(next);
        for (n, p) in nearest.iter_mut().zip(points) {
            *n = n.min(dist2(p, &points[next]));
        }
    }
    Ok(chosen)
}

/// `g` groups of the `k` points nearest to each farthest-point centre,
/// flattened as `g × k × 3` values. Groups follow the centre selection
/// order and list points by increasing distance (lowest index on ties).
pub fn group_pointcloud(points: &[[f64; 3]], g: usize, k: usize, seed: u64) -> Result<Vec<f64>> {
    let s = points.len();
    if g < 2 || s < g {
        bail!(Contract, "need 2 ≤ g ≤ S, got g = {} with S = {}", g, s);
    }
    if k == 0 || k > s {
        bail!(Contract, "need 1 ≤ k ≤ S, got k = {} with S = {}", k, s);
    }
    let start = ChaCha8Rng::seed_from_u64(seed).random_range(0..s);
    let centres = farthest_point_sample(points, g, start)?;
    let mut out = Vec::with_capacity(g * k * 3);
    let mut order: Vec<usize> = (0..s).collect();
    for c in centres {
        let centre = points[c];
        order.sort_by(|&a, &b| dist2(&points[a], &centre).total_cmp(&dist2(&points[b], &centre)).then(a.cmp(&b)));
        out.extend(order[..k].iter().flat_map(|&i| points[i]));
    }
    Ok(out)
}

/// Undirected adjacency lists without self loops or duplicate edges.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adjacency {
    pub neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn from_edges(nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut neighbors = vec![Vec::new(); nodes];
        for &(a, b) in edges {
            if a >= nodes || b >= nodes {
                bail!(Contract, "edge ({}, {}) outside {} nodes", a, b, nodes);
            }
            if a != b {
                neighbors[a].push(b);
                neighbors[b].push(a);
            }
        }
        for n in &mut neighbors {
            n.sort_unstable();
            n.dedup();
        }
        Ok(Self { neighbors })
    }

    pub fn nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }
}

/// `count` neighbours of `anchor`: drawn without replacement when the
/// degree allows it, with replacement otherwise. An isolated anchor stands
/// in for its own neighbours.
pub fn sample_graph_neighbors(adj: &Adjacency, anchor: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if anchor >= adj.nodes() {
        bail!(Contract, "anchor {} not among {} nodes", anchor, adj.nodes());
    }
    let ns = &adj.neighbors[anchor];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(if ns.is_empty() {
        vec![anchor; count]
    } else if ns.len() >= count {
        index::sample(&mut rng, ns.len(), count).into_iter().map(|i| ns[i]).collect()
    } else {
        (0..count).map(|_| ns[rng.random_range(0..ns.len())]).collect()
    })
}

/// Flat graph sample: the anchor's features followed by those of its 32
/// sampled neighbours.
pub fn graph_sample(features: &[Vec<f64>], adj: &Adjacency, anchor: usize, seed: u64) -> Result<Vec<f64>> {
    if features.len() != adj.nodes() {
        bail!(Dimension, "{} feature rows for {} nodes", features.len(), adj.nodes());
    }
    let ids = sample_graph_neighbors(adj, anchor, GRAPH_NEIGHBORS, seed)?;
    Ok(core::iter::once(anchor).chain(ids).flat_map(|i| features[i].iter().copied()).collect())
}

/// Settings needed to encode flat samples of some modalities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodeOptions {
    /// Seed of the table part split, fixed per dataset.
    pub table_seed: u64,
    pub vocab: usize,
    /// Point-cloud groups and points per group.
    pub groups: usize,
    pub group_size: usize,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self { table_seed: 0, vocab: 4096, groups: 64, group_size: 32 }
    }
}

/// Encodes one flattened sample in the layout used throughout the crate:
/// table rows, 256-step windows, HWC images and spectrograms, an anchor row
/// followed by 32 neighbour rows, token ids, or grouped point clouds.
pub fn encode_sample(modality: ModalityKind, sample: &[f64], opts: &EncodeOptions) -> Result<TripletSet> {
    match modality {
        ModalityKind::Table => triplet::encode_table(sample, opts.table_seed),
        ModalityKind::TimeSeries => triplet::encode_timeseries(sample),
        ModalityKind::Image => triplet::encode_image(sample, IMAGE_SHAPE),
        ModalityKind::Audio => triplet::encode_audio(sample, AUDIO_SHAPE),
        ModalityKind::Graph => {
            let rows = GRAPH_NEIGHBORS + 1;
            if sample.is_empty() || !sample.len().is_multiple_of(rows) {
                bail!(Dimension, "graph sample of {} values is not {} node rows", sample.len(), rows);
            }
            let d = sample.len() / rows;
            let neighbors: Vec<Vec<f64>> = sample[d..].chunks(d).map(<[f64]>::to_vec).collect();
            triplet::encode_graph(&sample[..d], &neighbors)
        }
        ModalityKind::Text => {
            let ids = sample
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 && v <= f64::from(u32::MAX) {
                        Ok(v as u32)
                    } else {
                        Err(crate::Error::Contract(alloc::format!("{v} is not a token id")))
                    }
                })
                .collect::<Result<Vec<u32>>>()?;
            triplet::encode_text(&ids, opts.vocab)
        }
        ModalityKind::PointCloud => triplet::encode_pointcloud(sample, opts.groups, opts.group_size),
    }
}
