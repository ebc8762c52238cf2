use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::modality::ModalityKind;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableTask {
    /// `y = w·x + b + noise·ε`.
    #[default]
    Regression,
    /// `y = 1` with probability `sigmoid((w·x + b) / noise)`; with zero
    /// noise exactly when `w·x + b > 0`.
    Binary,
}

/// Generator settings, one variant per modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "modality", rename_all = "lowercase")]
pub enum SynthSpec {
    Table {
        rows: usize,
        features: usize,
        #[serde(default)]
        task: TableTask,
        #[serde(default)]
        noise: f64,
        /// Draw features from a random linear map of this many uniform
        /// latent factors instead of independent normals.
        #[serde(default)]
        latent_rank: Option<usize>,
    },
    TimeSeries {
        windows: usize,
        #[serde(default = "default_window")]
        length: usize,
        /// Component frequencies in cycles per window.
        frequencies: Vec<f64>,
        #[serde(default)]
        noise: f64,
    },
    Image {
        samples: usize,
        classes: usize,
        #[serde(default = "default_image_shape")]
        shape: [usize; 3],
    },
    Audio {
        samples: usize,
        classes: usize,
        #[serde(default = "default_audio_shape")]
        shape: [usize; 3],
    },
    Graph {
        nodes: usize,
        blocks: usize,
        p_in: f64,
        p_out: f64,
        features: usize,
        #[serde(default = "default_feature_noise")]
        feature_noise: f64,
    },
    Text {
        sequences: usize,
        #[serde(default = "default_text_len")]
        length: usize,
        vocab: usize,
        #[serde(default = "default_branching")]
        branching: usize,
    },
    PointCloud {
        clouds: usize,
        points: usize,
        #[serde(default)]
        noise: f64,
    },
}

fn default_window() -> usize {
    crate::triplet::TIMESERIES_LEN
}
fn default_image_shape() -> [usize; 3] {
    crate::triplet::IMAGE_SHAPE
}
fn default_audio_shape() -> [usize; 3] {
    crate::triplet::AUDIO_SHAPE
}
fn default_feature_noise() -> f64 {
    0.5
}
fn default_text_len() -> usize {
    crate::triplet::TEXT_LEN
}
fn default_branching() -> usize {
    4
}

/// Number of primitive shapes the point-cloud generator draws from:
/// sphere, cube surface, cylinder and torus.
pub const POINT_SHAPES: usize = 4;

impl SynthSpec {
    pub fn modality(&self) -> ModalityKind {
        match self {
            SynthSpec::Table { .. } => ModalityKind::Table,
            SynthSpec::TimeSeries { .. } => ModalityKind::TimeSeries,
            SynthSpec::Image { .. } => ModalityKind::Image,
            SynthSpec::Audio { .. } => ModalityKind::Audio,
            SynthSpec::Graph { .. } => ModalityKind::Graph,
            SynthSpec::Text { .. } => ModalityKind::Text,
            SynthSpec::PointCloud { .. } => ModalityKind::PointCloud,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            SynthSpec::Table { rows, features, noise, latent_rank, .. } => {
                *rows > 0 && *features > 0 && noise.is_finite() && *noise >= 0.0 && *latent_rank != Some(0)
            }
            SynthSpec::TimeSeries { windows, length, frequencies, noise } => {
                *windows > 0
                    && *length > 1
                    && !frequencies.is_empty()
                    && frequencies.iter().all(|&f| f > 0.0 && f < *length as f64 / 2.0)
                    && noise.is_finite()
                    && *noise >= 0.0
            }
            SynthSpec::Image { samples, classes, shape } | SynthSpec::Audio { samples, classes, shape } => {
                *samples > 0 && *classes > 0 && shape.iter().all(|&s| s > 0)
            }
            SynthSpec::Graph { nodes, blocks, p_in, p_out, features, feature_noise } => {
                *nodes > 0
                    && *blocks > 0
                    && blocks <= nodes
                    && (0.0..=1.0).contains(p_in)
                    && (0.0..=1.0).contains(p_out)
                    && *features > 0
                    && feature_noise.is_finite()
                    && *feature_noise >= 0.0
            }
            SynthSpec::Text { sequences, length, vocab, branching } => *sequences > 0 && *length > 0 && *vocab >= 3 && *branching > 0,
            SynthSpec::PointCloud { clouds, points, noise } => *clouds > 0 && *points > 0 && noise.is_finite() && *noise >= 0.0,
        };
        if !ok {
            bail!(Config, "invalid generator settings {:?}", self);
        }
        Ok(())
    }
}

/// Ground truth of a generated table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearTruth {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearTruth {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }
}

/// A generated dataset. Samples use the flat layouts of
/// [`encode_sample`](super::encode_sample), except that graphs keep one
/// feature row per node next to their edge list and point clouds keep raw
/// `S × 3` points. Targets hold one value per sample (class index or
/// regression value) and are empty for time series and text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthDataset {
    pub modality: ModalityKind,
    pub samples: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<LinearTruth>,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Seeded dataset for `spec`; the same spec and seed always give the same
/// dataset.
pub fn gen_synthetic(spec: &SynthSpec, seed: u64) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modality = spec.modality();
    let mut out = SynthDataset { modality, samples: Vec::new(), targets: Vec::new(), edges: Vec::new(), truth: None };
    match *spec {
        SynthSpec::Table { rows, features, task, noise, latent_rank } => {
            let scale = 1.0 / libm::sqrt(features as f64);
            let truth = LinearTruth { weights: (0..features).map(|_| normal(&mut rng) * scale).collect(), bias: 0.1 * normal(&mut rng) };
            let mixing: Option<Vec<Vec<f64>>> =
                latent_rank.map(|r| (0..features).map(|_| (0..r).map(|_| rng.random_range(-1.0..1.0)).collect()).collect());
            for _ in 0..rows {
                let x: Vec<f64> = match &mixing {
                    Some(m) => {
                        let z: Vec<f64> = (0..m[0].len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                        m.iter().map(|row| row.iter().zip(&z).map(|(a, b)| a * b).sum()).collect()
                    }
                    None => (0..features).map(|_| normal(&mut rng)).collect(),
                };
                let score = truth.score(&x);
                let y = match task {
                    TableTask::Regression => score + noise * normal(&mut rng),
                    TableTask::Binary if noise == 0.0 => f64::from(u8::from(score > 0.0)),
                    TableTask::Binary => {
                        let p = 1.0 / (1.0 + libm::exp(-score / noise));
                        f64::from(u8::from(rng.random::<f64>() < p))
                    }
                };
                out.samples.push(x);
                out.targets.push(y);
            }
            out.truth = Some(truth);
        }
        SynthSpec::TimeSeries { windows, length, ref frequencies, noise } => {
            for _ in 0..windows {
                let comps: Vec<(f64, f64, f64)> =
                    frequencies.iter().map(|&f| (f, rng.random_range(0.5..1.5), rng.random_range(0.0..2.0 * PI))).collect();
                let w = (0..length)
                    .map(|t| {
                        let clean: f64 = comps.iter().map(|&(f, a, p)| a * libm::sin(2.0 * PI * f * t as f64 / length as f64 + p)).sum();
                        clean + if noise > 0.0 { noise * normal(&mut rng) } else { 0.0 }
                    })
                    .collect();
                out.samples.push(w);
            }
        }
        SynthSpec::Image { samples, classes, shape } | SynthSpec::Audio { samples, classes, shape } => {
            for _ in 0..samples {
                let class = rng.random_range(0..classes);
                out.samples.push(patterned(&mut rng, shape, class, classes));
                out.targets.push(class as f64);
            }
        }
        SynthSpec::Graph { nodes, blocks, p_in, p_out, features, feature_noise } => {
            let centroids: Vec<Vec<f64>> = (0..blocks).map(|_| (0..features).map(|_| normal(&mut rng)).collect()).collect();
            let block: Vec<usize> = (0..nodes).map(|i| i % blocks).collect();
            for a in 0..nodes {
                for b in a + 1..nodes {
                    let p = if block[a] == block[b] { p_in } else { p_out };
                    if rng.random::<f64>() < p {
                        out.edges.push((a, b));
                    }
                }
            }
            for &b in &block {
                out.samples.push(centroids[b].iter().map(|c| c + feature_noise * normal(&mut rng)).collect());
                out.targets.push(b as f64);
            }
        }
        SynthSpec::Text { sequences, length, vocab, branching } => {
            // The last id is left free for the mask token.
            let usable = vocab - 1;
            let fan = branching.min(usable);
            let table: Vec<(Vec<usize>, Vec<f64>)> = (0..usable)
                .map(|_| {
                    let next = index::sample(&mut rng, usable, fan).into_vec();
                    let mut w: Vec<f64> = (0..fan).map(|_| rng.random_range(0.1..1.0)).collect();
                    let total: f64 = w.iter().sum();
                    let mut acc = 0.0;
                    for v in &mut w {
                        acc += *v / total;
                        *v = acc;
                    }
                    (next, w)
                })
                .collect();
            for _ in 0..sequences {
                let mut id = rng.random_range(0..usable);
                let mut seq = Vec::with_capacity(length);
                for _ in 0..length {
                    seq.push(id as f64);
                    let (next, cdf) = &table[id];
                    let u: f64 = rng.random();
                    id = next[cdf.iter().position(|&c| u < c).unwrap_or(fan - 1)];
                }
                out.samples.push(seq);
            }
        }
        SynthSpec::PointCloud { clouds, points, noise } => {
            for _ in 0..clouds {
                let shape = rng.random_range(0..POINT_SHAPES);
                let mut flat = Vec::with_capacity(points * 3);
                for _ in 0..points {
                    let p = shape_point(&mut rng, shape);
                    flat.extend(p.iter().map(|v| v + if noise > 0.0 { noise * normal(&mut rng) } else { 0.0 }));
                }
                out.samples.push(flat);
                out.targets.push(shape as f64);
            }
        }
    }
    Ok(out)
}

/// An HWC array in `[0, 1]` with a class-dependent gradient direction,
/// a random offset and a per-channel tint.
fn patterned<R: Rng>(rng: &mut R, [h, w, c]: [usize; 3], class: usize, classes: usize) -> Vec<f64> {
    let angle = PI * class as f64 / classes as f64;
    let (ca, sa) = (libm::cos(angle), libm::sin(angle));
    let offset = rng.random_range(-0.2..0.2);
    let tint: Vec<f64> = (0..c).map(|_| rng.random_range(0.6..1.0)).collect();
    let norm = (h + w) as f64 / 2.0;
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let g = ((x as f64 - w as f64 / 2.0) * ca + (y as f64 - h as f64 / 2.0) * sa) / norm;
            for t in &tint {
                out.push(((0.5 + g + offset) * t).clamp(0.0, 1.0));
            }
        }
    }
    out
}

fn shape_point<R: Rng>(rng: &mut R, shape: usize) -> [f64; 3] {
    let u: f64 = rng.random_range(0.0..2.0 * PI);
    let v: f64 = rng.random_range(-1.0..1.0);
    match shape {
        0 => {
            let r = libm::sqrt(1.0 - v * v);
            [r * libm::cos(u), r * libm::sin(u), v]
        }
        1 => {
            let mut p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let axis = rng.random_range(0..3);
            p[axis] = if rng.random::<bool>() { 1.0 } else { -1.0 };
            p
        }
        2 => [libm::cos(u), libm::sin(u), v],
        _ => {
            let t: f64 = rng.random_range(0.0..2.0 * PI);
            let r = 1.0 + 0.3 * libm::cos(t);
            [r * libm::cos(u), r * libm::sin(u), 0.3 * libm::sin(t)]
        }
    }
}
