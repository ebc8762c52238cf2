//! Decomposition of raw samples into triplet sets.
//!
//! Every encoder is a pure function of its input (the table encoder also of
//! its seed). Indices are 0-based: the `j`-th triplet has `global_index`
//! `j - 1` in the usual 1-based presentation.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::modality::ModalityKind;

/// Zero-padding target for each numeric part.
pub const NUMERIC_PART_CAPACITY: usize = 384;
pub const TIMESERIES_LEN: usize = 256;
pub const TIMESERIES_TRIPLETS: usize = 8;
pub const TEXT_LEN: usize = 512;
pub const GRAPH_NEIGHBORS: usize = 32;
pub const IMAGE_SHAPE: [usize; 3] = [224, 224, 3];
pub const AUDIO_SHAPE: [usize; 3] = [512, 128, 3];
/// Patch height × width shared by images and spectrograms.
pub const PATCH: [usize; 2] = [16, 8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawTriplet {
    pub num1: Vec<f64>,
    pub num2: Vec<f64>,
    /// Original positions (features, time steps, patches, tokens or groups)
    /// the two numeric parts were taken from.
    pub local_indices: Vec<usize>,
    pub global_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletSet {
    pub modality: ModalityKind,
    pub triplets: Vec<RawTriplet>,
    pub sample_shape: Vec<usize>,
}

impl TripletSet {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Checks the count and global-index invariants.
    pub fn validate(&self) -> Result<()> {
        let expected = expected_triplet_count(self.modality, &self.sample_shape)?;
        if self.triplets.len() != expected {
            bail!(Contract, "{} set has {} triplets, expected {}", self.modality, self.triplets.len(), expected);
        }
        for (j, t) in self.triplets.iter().enumerate() {
            if t.global_index != j {
                bail!(Contract, "triplet {} carries global index {}", j, t.global_index);
            }
            if t.local_indices.is_empty() {
                bail!(Contract, "triplet {} has no local indices", j);
            }
        }
        Ok(())
    }
}

/// Triplet count per modality for a sample of the given shape.
pub fn expected_triplet_count(modality: ModalityKind, sample_shape: &[usize]) -> Result<usize> {
    Ok(match (modality, sample_shape) {
        (ModalityKind::Table, [d]) => *d,
        (ModalityKind::TimeSeries, _) => TIMESERIES_TRIPLETS,
        (ModalityKind::Image, _) => 196,
        (ModalityKind::Audio, _) => 256,
        (ModalityKind::Graph, _) => GRAPH_NEIGHBORS,
        (ModalityKind::Text, _) => TEXT_LEN / 2,
        (ModalityKind::PointCloud, [g, _, _]) => g / 2,
        _ => bail!(Dimension, "sample shape {:?} does not fit {}", sample_shape, modality),
    })
}

/// `d` triplets of random sub-vectors of a table row.
///
/// Each numeric part holds `max(1, ⌊d/2⌋)` features drawn without
/// replacement and kept in feature order; `num1` and `num2` are drawn
/// independently. `local_indices` lists `num1`'s features then `num2`'s.
pub fn encode_table(x: &[f64], seed: u64) -> Result<TripletSet> {
    let d = x.len();
    if d == 0 {
        bail!(Dimension, "empty table row");
    }
    if d >= NUMERIC_PART_CAPACITY {
        return Err(Error::PaddingCapacity { len: d, capacity: NUMERIC_PART_CAPACITY - 1 });
    }
    let part = (d / 2).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| {
        let mut idx = index::sample(rng, d, part).into_vec();
        idx.sort_unstable();
        idx
    };
    let triplets = (0..d)
        .map(|j| {
            let i1 = draw(&mut rng);
            let i2 = draw(&mut rng);
            RawTriplet {
                num1: i1.iter().map(|&i| x[i]).collect(),
                num2: i2.iter().map(|&i| x[i]).collect(),
                local_indices: i1.into_iter().chain(i2).collect(),
                global_index: j,
            }
        })
        .collect();
    Ok(TripletSet { modality: ModalityKind::Table, triplets, sample_shape: vec![d] })
}

/// Eight triplets of consecutive 16-step segments of a 256-step window.
pub fn encode_timeseries(x: &[f64]) -> Result<TripletSet> {
    if x.len() != TIMESERIES_LEN {
        bail!(Dimension, "time-series window of {} steps, expected {}", x.len(), TIMESERIES_LEN);
    }
    let triplets = (0..TIMESERIES_TRIPLETS)
        .map(|j| {
            let offset = 32 * j;
            RawTriplet {
                num1: x[offset..offset + 16].to_vec(),
                num2: x[offset + 16..offset + 32].to_vec(),
                local_indices: (offset..offset + 32).collect(),
                global_index: j,
            }
        })
        .collect();
    Ok(TripletSet { modality: ModalityKind::TimeSeries, triplets, sample_shape: vec![TIMESERIES_LEN] })
}

/// 196 triplets of horizontally adjacent 16×8×3 patches of a 224×224×3
/// image (height × width × channel, row-major).
pub fn encode_image(img: &[f64], shape: [usize; 3]) -> Result<TripletSet> {
    if shape != IMAGE_SHAPE {
        bail!(Dimension, "image shape {:?}, expected {:?}", shape, IMAGE_SHAPE);
    }
    encode_patch_pairs(ModalityKind::Image, img, shape)
}

/// 256 triplets of horizontally adjacent 16×8×3 patches of a 512×128×3
/// Mel spectrogram.
pub fn encode_audio(spec: &[f64], shape: [usize; 3]) -> Result<TripletSet> {
    if shape != AUDIO_SHAPE {
        bail!(Dimension, "spectrogram shape {:?}, expected {:?}", shape, AUDIO_SHAPE);
    }
    encode_patch_pairs(ModalityKind::Audio, spec, shape)
}

fn encode_patch_pairs(modality: ModalityKind, data: &[f64], shape: [usize; 3]) -> Result<TripletSet> {
    let [h, w, c] = shape;
    if data.len() != h * w * c {
        bail!(Dimension, "{} values for shape {:?}", data.len(), shape);
    }
    let [ph, pw] = PATCH;
    let (rows, cols) = (h / ph, w / pw);
    let patch = |p: usize| -> Vec<f64> {
        let (pr, pc) = (p / cols, p % cols);
        let mut out = Vec::with_capacity(ph * pw * c);
        for y in pr * ph..(pr + 1) * ph {
            let start = (y * w + pc * pw) * c;
            out.extend_from_slice(&data[start..start + pw * c]);
        }
        out
    };
    let mut triplets = Vec::with_capacity(rows * cols / 2);
    for pr in 0..rows {
        for m in 0..cols / 2 {
            let left = pr * cols + 2 * m;
            triplets.push(RawTriplet {
                num1: patch(left),
                num2: patch(left + 1),
                local_indices: vec![left, left + 1],
                global_index: triplets.len(),
            });
        }
    }
    Ok(TripletSet { modality, triplets, sample_shape: shape.to_vec() })
}

/// 32 triplets pairing an anchor node's features with each sampled
/// neighbour's features.
pub fn encode_graph(anchor: &[f64], neighbors: &[Vec<f64>]) -> Result<TripletSet> {
    let d = anchor.len();
    if d == 0 {
        bail!(Dimension, "anchor has no features");
    }
    if d >= NUMERIC_PART_CAPACITY {
        bail!(Contract, "{} node features do not fit the {} padding capacity", d, NUMERIC_PART_CAPACITY);
    }
    if neighbors.len() != GRAPH_NEIGHBORS {
        bail!(Contract, "{} neighbours supplied, expected {}", neighbors.len(), GRAPH_NEIGHBORS);
    }
    if let Some(bad) = neighbors.iter().position(|n| n.len() != d) {
        bail!(Contract, "neighbour {} has {} features, anchor has {}", bad, neighbors[bad].len(), d);
    }
    let triplets = neighbors
        .iter()
        .enumerate()
        .map(|(j, n)| RawTriplet {
            num1: anchor.to_vec(),
            num2: n.clone(),
            local_indices: (0..d).collect(),
            global_index: j,
        })
        .collect();
    Ok(TripletSet { modality: ModalityKind::Graph, triplets, sample_shape: vec![GRAPH_NEIGHBORS + 1, d] })
}

/// 256 triplets of consecutive token-id pairs; ids are stored as
/// one-element numeric parts.
pub fn encode_text(ids: &[u32], vocab: usize) -> Result<TripletSet> {
    if ids.len() != TEXT_LEN {
        bail!(Contract, "text sample of {} ids, expected {}", ids.len(), TEXT_LEN);
    }
    if let Some(bad) = ids.iter().find(|&&id| id as usize >= vocab) {
        bail!(Contract, "token id {} outside vocabulary of {}", bad, vocab);
    }
    let triplets = (0..TEXT_LEN / 2)
        .map(|j| RawTriplet {
            num1: vec![f64::from(ids[2 * j])],
            num2: vec![f64::from(ids[2 * j + 1])],
            local_indices: vec![2 * j, 2 * j + 1],
            global_index: j,
        })
        .collect();
    Ok(TripletSet { modality: ModalityKind::Text, triplets, sample_shape: vec![TEXT_LEN] })
}

/// `g/2` triplets pairing consecutive point groups. `groups` is `g×k×3`
/// row-major.
pub fn encode_pointcloud(groups: &[f64], g: usize, k: usize) -> Result<TripletSet> {
    if g < 2 || !g.is_multiple_of(2) {
        bail!(Contract, "group count {} must be even and at least 2", g);
    }
    if k == 0 || groups.len() != g * k * 3 {
        bail!(Dimension, "{} values for {}×{}×3 groups", groups.len(), g, k);
    }
    let group = |i: usize| groups[i * k * 3..(i + 1) * k * 3].to_vec();
    let triplets = (0..g / 2)
        .map(|j| RawTriplet {
            num1: group(2 * j),
            num2: group(2 * j + 1),
            local_indices: vec![2 * j, 2 * j + 1],
            global_index: j,
        })
        .collect();
    Ok(TripletSet { modality: ModalityKind::PointCloud, triplets, sample_shape: vec![g, k, 3] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeMap;
    use proptest::prelude::*;
    use rand::Rng;

    fn ramp(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64).collect()
    }

    #[test]
    fn table_shapes() {
        let s = encode_table(&[1.0, 2.0, 3.0, 4.0], 9).unwrap();
        assert_eq!(s.len(), 4);
        for t in &s.triplets {
            assert_eq!(t.num1.len(), 2);
            assert_eq!(t.num2.len(), 2);
            assert_eq!(t.local_indices.len(), 4);
        }
        s.validate().unwrap();
    }

    #[test]
    fn table_two_features() {
        let s = encode_table(&[5.0, 7.0], 3).unwrap();
        for t in &s.triplets {
            assert!(t.num1 == [5.0] || t.num1 == [7.0]);
            assert!(t.num2 == [5.0] || t.num2 == [7.0]);
        }
    }

    #[test]
    fn table_is_deterministic_per_seed() {
        let x = [0.3, -1.0, 2.5, 4.0, 0.0, 9.0];
        assert_eq!(encode_table(&x, 42).unwrap(), encode_table(&x, 42).unwrap());
        assert_ne!(encode_table(&x, 42).unwrap(), encode_table(&x, 43).unwrap());
    }

    #[test]
    fn table_errors() {
        assert!(matches!(encode_table(&[], 0), Err(Error::Dimension(_))));
        assert!(matches!(encode_table(&vec![0.0; 384], 0), Err(Error::PaddingCapacity { .. })));
        assert_eq!(encode_table(&vec![0.0; 383], 0).unwrap().len(), 383);
        let odd = encode_table(&[1.0, 2.0, 3.0, 4.0, 5.0], 1).unwrap();
        assert_eq!(odd.triplets[0].num1.len(), 2);
        let single = encode_table(&[8.0], 1).unwrap();
        assert_eq!(single.triplets[0].num1, [8.0]);
    }

    #[test]
    fn timeseries_offsets() {
        let s = encode_timeseries(&ramp(256)).unwrap();
        assert_eq!(s.len(), 8);
        assert_eq!(s.triplets[0].local_indices, (0..32).collect::<Vec<_>>());
        assert_eq!(s.triplets[7].local_indices[0], 224);
        let t3 = &s.triplets[2];
        assert_eq!(t3.num1, (64..80).map(f64::from).collect::<Vec<_>>());
        assert_eq!(t3.num2, (80..96).map(f64::from).collect::<Vec<_>>());
        let flat = encode_timeseries(&[2.0; 256]).unwrap();
        assert!(flat.triplets.iter().all(|t| t.num1.iter().chain(&t.num2).all(|&v| v == 2.0)));
        assert!(matches!(encode_timeseries(&[0.0; 255]), Err(Error::Dimension(_))));
    }

    #[test]
    fn image_and_audio_counts() {
        let img = vec![0.5; 224 * 224 * 3];
        let s = encode_image(&img, IMAGE_SHAPE).unwrap();
        assert_eq!(s.len(), 196);
        assert_eq!(s.triplets[0].local_indices, [0, 1]);
        assert!(s.triplets.iter().all(|t| t.num1.len() == 384 && t.num1.iter().all(|&v| v == 0.5)));
        assert!(encode_image(&img[1..], IMAGE_SHAPE).is_err());
        assert!(matches!(encode_image(&img, [224, 224, 1]), Err(Error::Dimension(_))));

        let spec = vec![0.0; 512 * 128 * 3];
        let a = encode_audio(&spec, AUDIO_SHAPE).unwrap();
        assert_eq!(a.len(), 256);
        assert_eq!(a.triplets[0].local_indices, [0, 1]);
        assert!(a.triplets.iter().all(|t| t.num2.iter().all(|&v| v == 0.0)));
        assert!(encode_audio(&spec, [128, 512, 3]).is_err());
    }

    #[test]
    fn image_patch_contents_match_pixels() {
        // pixel value encodes its (y, x, c) position
        let img: Vec<f64> = (0..224 * 224 * 3).map(|i| i as f64).collect();
        let s = encode_image(&img, IMAGE_SHAPE).unwrap();
        // triplet 15 (0-based) is row 1, pair 1 → patches 30 and 31
        let t = &s.triplets[15];
        assert_eq!(t.local_indices, [30, 31]);
        let (py, px) = (16, 16);
        for (n, &v) in t.num1.iter().enumerate() {
            let (dy, rest) = (n / 24, n % 24);
            let (dx, c) = (rest / 3, rest % 3);
            assert_eq!(v, (((py + dy) * 224 + px + dx) * 3 + c) as f64);
        }
    }

    #[test]
    fn graph_triplets() {
        let anchor = vec![1.0, 2.0, 3.0];
        let neighbors: Vec<Vec<f64>> = (0..32).map(|i| vec![i as f64, 0.0, -1.0]).collect();
        let s = encode_graph(&anchor, &neighbors).unwrap();
        assert_eq!(s.len(), 32);
        // hand-built expectation
        for (j, t) in s.triplets.iter().enumerate() {
            assert_eq!(t.num1, anchor);
            assert_eq!(t.num2, [j as f64, 0.0, -1.0]);
            assert_eq!(t.local_indices, [0, 1, 2]);
            assert_eq!(t.global_index, j);
        }
        let same = encode_graph(&anchor, &vec![anchor.clone(); 32]).unwrap();
        assert!(same.triplets.iter().all(|t| t.num1 == t.num2));
        assert!(matches!(encode_graph(&anchor, &neighbors[..31]), Err(Error::Contract(_))));
        assert!(matches!(encode_graph(&vec![0.0; 384], &vec![vec![0.0; 384]; 32]), Err(Error::Contract(_))));
    }

    #[test]
    fn text_pairs() {
        let ids: Vec<u32> = (0..512).collect();
        let s = encode_text(&ids, 4096).unwrap();
        assert_eq!(s.len(), 256);
        assert_eq!(s.triplets[0].local_indices, [0, 1]);
        assert_eq!((s.triplets[4].num1[0], s.triplets[4].num2[0]), (8.0, 9.0));
        let same = encode_text(&[7; 512], 4096).unwrap();
        assert!(same.triplets.iter().all(|t| t.num1 == [7.0] && t.num2 == [7.0]));
        assert!(matches!(encode_text(&ids, 100), Err(Error::Contract(_))));
        assert!(matches!(encode_text(&ids[..10], 4096), Err(Error::Contract(_))));
    }

    #[test]
    fn pointcloud_pairs() {
        let groups: Vec<f64> = (0..64 * 4 * 3).map(|i| i as f64).collect();
        let s = encode_pointcloud(&groups, 64, 4).unwrap();
        assert_eq!(s.len(), 32);
        let one = encode_pointcloud(&groups[..2 * 4 * 3], 2, 4).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.triplets[0].local_indices, [0, 1]);
        let dup = encode_pointcloud(&[1.0, 2.0, 3.0, 1.0, 2.0, 3.0], 2, 1).unwrap();
        assert_eq!(dup.triplets[0].num1, dup.triplets[0].num2);
        assert!(matches!(encode_pointcloud(&groups[..3 * 4 * 3], 3, 4), Err(Error::Contract(_))));
    }

    #[test]
    fn coverage_of_patch_token_and_group_indices() {
        let check = |s: &TripletSet, n: usize| {
            let mut seen = BTreeMap::new();
            for i in s.triplets.iter().flat_map(|t| &t.local_indices) {
                *seen.entry(*i).or_insert(0) += 1;
            }
            assert_eq!(seen.len(), n);
            assert!(seen.values().all(|&c| c == 1));
            assert_eq!(*seen.keys().last().unwrap(), n - 1);
        };
        check(&encode_image(&vec![0.0; 224 * 224 * 3], IMAGE_SHAPE).unwrap(), 392);
        check(&encode_audio(&vec![0.0; 512 * 128 * 3], AUDIO_SHAPE).unwrap(), 512);
        check(&encode_text(&[0; 512], 10).unwrap(), 512);
        check(&encode_pointcloud(&vec![0.0; 10 * 2 * 3], 10, 2).unwrap(), 10);
    }

    proptest! {
        #[test]
        fn table_values_come_from_named_positions(
            x in proptest::collection::vec(-100.0f64..100.0, 1..40),
            seed in any::<u64>(),
        ) {
            let s = encode_table(&x, seed).unwrap();
            prop_assert_eq!(s.len(), x.len());
            s.validate().unwrap();
            for t in &s.triplets {
                let values: Vec<f64> = t.num1.iter().chain(&t.num2).copied().collect();
                prop_assert_eq!(values.len(), t.local_indices.len());
                for (v, &i) in values.iter().zip(&t.local_indices) {
                    prop_assert_eq!(*v, x[i]);
                }
                let half = t.num1.len();
                let mut a = t.local_indices[..half].to_vec();
                a.dedup();
                prop_assert_eq!(a.len(), half);
            }
        }

        #[test]
        fn timeseries_values_come_from_named_positions(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..256).map(|_| rng.random_range(-5.0..5.0)).collect();
            let s = encode_timeseries(&x).unwrap();
            s.validate().unwrap();
            for t in &s.triplets {
                let values: Vec<f64> = t.num1.iter().chain(&t.num2).copied().collect();
                for (v, &i) in values.iter().zip(&t.local_indices) {
                    prop_assert_eq!(*v, x[i]);
                }
            }
        }
    }
}
