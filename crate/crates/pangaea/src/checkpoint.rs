//! Model checkpoints.
//!
//! Layout, little-endian: magic `PGCK`, `u32` format version, `u64` length
//! of a JSON manifest, the manifest, every parameter as `f32` values in
//! manifest order, and a SHA-256 digest of all preceding bytes. Parameters
//! are listed by name so that saving a loaded model reproduces the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use pangaea_core::pretrain::TrainState;
use pangaea_core::tensor::Tensor;
use pangaea_core::transformer::{HeadInit, HeadSpec, ModelConfig, ModelState};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{IoError, Result};

pub const MAGIC: [u8; 4] = *b"PGCK";
pub const VERSION: u32 = 1;
const HEADER: usize = 16;
const DIGEST: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in bytes from the start of the payload.
    pub offset: u64,
    pub trainable: bool,
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub heads: BTreeMap<String, HeadSpec>,
    pub step: u64,
    pub rng: Option<ChaCha8Rng>,
    pub params: Vec<ParamEntry>,
    /// Free-form run information, such as the task a head was trained for.
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl CheckpointManifest {
    fn payload_len(&self) -> u64 {
        self.params.iter().map(|p| 4 * p.shape.iter().product::<usize>() as u64).sum()
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: ModelState,
}

/// Serializes a model with an optional training position.
pub fn to_bytes(model: &ModelState, train: Option<&TrainState>, meta: &BTreeMap<String, serde_json::Value>) -> Result<Vec<u8>> {
    let mut entries: Vec<(&str, pangaea_core::tensor::ParamId)> = model.store.iter().map(|(id, p)| (p.name.as_str(), id)).collect();
    entries.sort_by(|a, b| a.0.cmp(b.0));
    let mut params = Vec::with_capacity(entries.len());
    let mut payload = Vec::new();
    for (name, id) in entries {
        let p = model.store.get(id);
        params.push(ParamEntry { name: name.to_string(), shape: p.value.shape().to_vec(), offset: payload.len() as u64, trainable: p.trainable, decay: p.decay });
        for &v in p.value.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: VERSION,
        config: model.config.clone(),
        heads: model.head_specs(),
        step: train.map_or(0, |t| t.step),
        rng: train.map(|t| t.rng.clone()),
        params,
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(HEADER + json.len() + payload.len() + DIGEST);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Writes the checkpoint through a temporary file and a rename.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &ModelState,
    train: Option<&TrainState>,
    meta: &BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    crate::write_atomic(path.as_ref(), &to_bytes(model, train, meta)?)
}

fn parse_manifest(bytes: &[u8]) -> Result<(CheckpointManifest, usize)> {
    let found = bytes.len() as u64;
    if bytes.len() < HEADER {
        return Err(IoError::Truncated { expected: (HEADER + DIGEST) as u64, found });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(IoError::BadMagic { found: magic, expected: MAGIC });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(IoError::Version { found: version, expected: VERSION });
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body_start = (HEADER as u64).checked_add(mlen).filter(|&e| e <= found).ok_or(IoError::Truncated {
        expected: (HEADER as u64).saturating_add(mlen).saturating_add(DIGEST as u64),
        found,
    })? as usize;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[HEADER..body_start])?;
    Ok((manifest, body_start))
}

/// Verifies and decodes a checkpoint.
pub fn from_bytes(bytes: &[u8]) -> Result<(CheckpointManifest, Vec<f32>)> {
    let found = bytes.len() as u64;
    let parsed = parse_manifest(bytes);
    if let Ok((m, start)) = &parsed {
        let expected = *start as u64 + m.payload_len() + DIGEST as u64;
        if found < expected {
            return Err(IoError::Truncated { expected, found });
        }
    }
    if bytes.len() < HEADER + DIGEST {
        return Err(IoError::Truncated { expected: (HEADER + DIGEST) as u64, found });
    }
    if let Err(e @ (IoError::BadMagic { .. } | IoError::Version { .. } | IoError::Truncated { .. })) = parsed {
        return Err(e);
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST);
    if Sha256::digest(body).as_slice() != digest {
        return Err(IoError::Checksum);
    }
    let (manifest, start) = parsed?;
    let expected = start as u64 + manifest.payload_len() + DIGEST as u64;
    if found != expected {
        return Err(IoError::format("checkpoint", format!("{} bytes, manifest describes {}", found, expected)));
    }
    let payload = body[start..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((manifest, payload))
}

fn install(model: &mut ModelState, manifest: &CheckpointManifest, payload: &[f32]) -> Result<()> {
    let by_name: BTreeMap<&str, &ParamEntry> = manifest.params.iter().map(|p| (p.name.as_str(), p)).collect();
    let ids: Vec<_> = model.store.ids().collect();
    for &id in &ids {
        let p = model.store.get(id);
        let entry = by_name.get(p.name.as_str()).ok_or_else(|| IoError::MissingParam(p.name.clone()))?;
        if entry.shape != p.value.shape() {
            return Err(IoError::Shape { name: p.name.clone(), expected: p.value.shape().to_vec(), found: entry.shape.clone() });
        }
    }
    if let Some(extra) = manifest.params.iter().find(|e| model.store.find(&e.name).is_none()) {
        return Err(IoError::UnknownParam(extra.name.clone()));
    }
    for id in ids {
        let name = model.store.get(id).name.clone();
        let entry = by_name[name.as_str()];
        let start = (entry.offset / 4) as usize;
        let len: usize = entry.shape.iter().product();
        let values = payload[start..start + len].iter().map(|&v| f64::from(v)).collect();
        let tensor = Tensor::new(entry.shape.clone(), values)?;
        model.store.reset(id, tensor);
        let p = model.store.get_mut(id);
        p.trainable = entry.trainable;
        p.decay = entry.decay;
    }
    Ok(())
}

/// Rebuilds the model stored in a checkpoint file.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(IoError::io(path))?;
    let (manifest, payload) = from_bytes(&bytes)?;
    let mut model = ModelState::new(manifest.config.clone(), 0)?;
    for (name, spec) in &manifest.heads {
        model.attach_head(name, *spec, HeadInit::Random, 0)?;
    }
    install(&mut model, &manifest, &payload)?;
    Ok(Checkpoint { manifest, model })
}

/// Loads parameter values into an existing model whose names and shapes
/// must match the file exactly.
pub fn load_into(path: impl AsRef<Path>, model: &mut ModelState) -> Result<CheckpointManifest> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(IoError::io(path))?;
    let (manifest, payload) = from_bytes(&bytes)?;
    install(model, &manifest, &payload)?;
    Ok(manifest)
}

/// Training position recorded in a checkpoint, if any.
pub fn train_state(manifest: &CheckpointManifest) -> Option<TrainState> {
    manifest.rng.clone().map(|rng| TrainState { step: manifest.step, rng, ..TrainState::new(0) })
}
