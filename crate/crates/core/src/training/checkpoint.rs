//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! offset  size  content
//! 0       8     magic  b"GENCKPT\0"
//! 8       4     u32    format version (currently 1)
//! 12      8     u64    meta length M
//! 20      M     UTF-8 JSON meta: configs, vocabularies, epoch, scores,
//!                optimizer kind/step and the tensor manifest
//! 20+M    P     tensor payloads, f64 little-endian, concatenated in
//!                manifest order
//! 20+M+P  32    SHA-256 of bytes [0, 20+M+P)
//! ```
//!
//! Each manifest entry is `{name, shape, trainable, offset, len, sha256}`,
//! with `offset` and `len` counted in f64 values from the payload start and
//! `sha256` the hex digest of that tensor's payload bytes. Tensor names are
//! prefixed `theta/`, `ema/`, and `adam.m/`, `adam.v/` or `adagrad.acc/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{EmaShadow, OptimizerKind, OptimizerState, TrainConfig, ValidScores};
use crate::data::Vocabs;
use crate::network::ModelConfig;
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"GENCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checksum failure: {0}")]
    Checksum(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// Everything needed to resume training or to generate: raw parameters θ,
/// their moving average θ̄, optimizer slots, vocabularies and configs.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointBundle {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocabs: Vocabs,
    pub params: ParamStore,
    pub ema: EmaShadow,
    pub optimizer: OptimizerState,
    /// Completed training epochs.
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub valid: Option<ValidScores>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    offset: usize,
    len: usize,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model: ModelConfig,
    train: TrainConfig,
    vocabs: Vocabs,
    epoch: usize,
    train_loss: Option<f64>,
    valid: Option<ValidScores>,
    ema_beta: f64,
    optimizer: OptimizerKind,
    optimizer_step: u64,
    tensors: Vec<TensorEntry>,
}

fn payload_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl CheckpointBundle {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.extend(self.params.iter().map(|(k, t)| (format!("theta/{k}"), t)));
        out.extend(self.ema.shadow.iter().map(|(k, t)| (format!("ema/{k}"), t)));
        out.extend(self.optimizer.slots());
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (name, t) in self.named_tensors() {
            let bytes = payload_bytes(t);
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                trainable: t.requires_grad,
                offset,
                len: t.numel(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
            offset += t.numel();
            payload.extend_from_slice(&bytes);
        }
        let meta = Meta {
            model: self.model.clone(),
            train: self.train.clone(),
            vocabs: self.vocabs.clone(),
            epoch: self.epoch,
            train_loss: self.train_loss,
            valid: self.valid.clone(),
            ema_beta: self.ema.beta,
            optimizer: self.optimizer.kind,
            optimizer_step: self.optimizer.step,
            tensors,
        };
        let meta = serde_json::to_vec(&meta).expect("checkpoint meta serializes");

        let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + payload.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < HEADER_LEN + DIGEST_LEN {
            return Err(CheckpointError::Checksum(format!("file truncated at {} bytes", bytes.len())));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Checksum(
                "file digest does not match contents (truncated or corrupted)".into(),
            ));
        }
        let meta_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let meta_end = HEADER_LEN
            .checked_add(meta_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| CheckpointError::Malformed(format!("meta length {meta_len} exceeds file")))?;
        let meta: Meta = serde_json::from_slice(&body[HEADER_LEN..meta_end])
            .map_err(|e| CheckpointError::Malformed(format!("meta: {e}")))?;
        let payload = &body[meta_end..];

        let mut groups: BTreeMap<&str, ParamStore> = BTreeMap::new();
        for e in &meta.tensors {
            let (start, end) = (e.offset * 8, (e.offset + e.len) * 8);
            let raw = payload
                .get(start..end)
                .ok_or_else(|| CheckpointError::Malformed(format!("tensor `{}` lies outside the payload", e.name)))?;
            if hex::encode(Sha256::digest(raw)) != e.sha256 {
                return Err(CheckpointError::Checksum(format!("tensor `{}`", e.name)));
            }
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data)
                .map_err(|err| CheckpointError::Malformed(format!("tensor `{}`: {err}", e.name)))?
                .with_requires_grad(e.trainable);
            let (group, name) = e
                .name
                .split_once('/')
                .ok_or_else(|| CheckpointError::Malformed(format!("tensor name `{}` has no group", e.name)))?;
            groups.entry(group).or_default().insert(name, t);
        }
        let mut take = |g: &str| groups.remove(g).unwrap_or_default();
        let params = take("theta");
        let shadow = take("ema");
        let into_map = |s: ParamStore| s.iter().map(|(k, t)| (k.clone(), t.clone())).collect();
        let (first, second) = match meta.optimizer {
            OptimizerKind::Adam => (into_map(take("adam.m")), into_map(take("adam.v"))),
            OptimizerKind::Adagrad => (BTreeMap::new(), into_map(take("adagrad.acc"))),
        };
        if let Some(group) = groups.keys().next() {
            return Err(CheckpointError::Malformed(format!("unexpected tensor group `{group}`")));
        }
        Ok(Self {
            model: meta.model,
            train: meta.train,
            vocabs: meta.vocabs,
            params,
            ema: EmaShadow {
                beta: meta.ema_beta,
                shadow,
            },
            optimizer: OptimizerState {
                kind: meta.optimizer,
                step: meta.optimizer_step,
                first,
                second,
            },
            epoch: meta.epoch,
            train_loss: meta.train_loss,
            valid: meta.valid,
        })
    }
}

pub fn save_checkpoint(bundle: &CheckpointBundle, path: &Path) -> Result<()> {
    std::fs::write(path, bundle.to_bytes()).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointBundle> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    CheckpointBundle::from_bytes(&bytes)
}
