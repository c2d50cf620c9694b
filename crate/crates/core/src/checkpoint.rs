//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `KGRCKPT1`, a little-endian `u64` header
//! length, the JSON header, then every parameter array in header order as
//! little-endian `f64` values (row-major).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{ParamStore, Tensor};
use crate::kg::RelationId;
use crate::model::{param_layout, RecModel, ModelConfig, ModelError, Variant};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"KGRCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint was trained on a different vocabulary (checkpoint {found}, data {expected})")]
    VocabMismatch { expected: String, found: String },
    #[error("checkpoint arrays do not match the model layout: {0}")]
    Layout(#[from] ModelError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dim: usize,
    pub experts: usize,
    pub gamma: f64,
    pub variant: Variant,
    pub seed: u64,
    pub like_rel: RelationId,
    pub num_entities: usize,
    pub num_relations: usize,
    /// Hash of the entity and relation vocabularies the ids refer to.
    pub vocab_hash: String,
    /// Training epoch the parameters come from; 0 for an untrained model.
    pub epoch: usize,
    pub arrays: Vec<ArraySpec>,
}

impl CheckpointHeader {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { dim: self.dim, experts: self.experts, gamma: self.gamma, variant: self.variant }
    }

    pub fn check_vocab(&self, expected: &str) -> Result<(), CheckpointError> {
        if self.vocab_hash != expected {
            return Err(CheckpointError::VocabMismatch { expected: expected.to_owned(), found: self.vocab_hash.clone() });
        }
        Ok(())
    }
}

pub fn to_bytes<T: Scalar>(model: &RecModel<T>, seed: u64, vocab_hash: &str, epoch: usize) -> Vec<u8> {
    let cfg = model.config();
    let arrays = model
        .params()
        .iter()
        .map(|(_, p)| ArraySpec { name: p.name.clone(), rows: p.value.rows(), cols: p.value.cols() })
        .collect();
    let header = CheckpointHeader {
        dim: cfg.dim,
        experts: cfg.experts,
        gamma: cfg.gamma,
        variant: cfg.variant,
        seed,
        like_rel: model.like_rel(),
        num_entities: model.num_entities(),
        num_relations: model.num_relations(),
        vocab_hash: vocab_hash.to_owned(),
        epoch,
        arrays,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * model.params().num_elements());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in model.params().iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(RecModel<T>, CheckpointHeader), CheckpointError> {
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated("missing header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16usize.saturating_add(len)).ok_or(CheckpointError::Truncated("header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let cfg = header.model_config();
    let expected = param_layout(&cfg, header.num_entities, header.num_relations);
    let listed: Vec<_> = header.arrays.iter().map(|a| (a.name.clone(), a.rows, a.cols)).collect();
    if listed != expected {
        return Err(CheckpointError::Header("array list does not match the declared dimensions".into()));
    }
    let mut data = &bytes[16 + len..];
    let mut params = ParamStore::new();
    for a in &header.arrays {
        let n = a.rows * a.cols;
        if data.len() < 8 * n {
            return Err(CheckpointError::Truncated("array data"));
        }
        let values = data[..8 * n]
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        params.add(a.name.clone(), Tensor::from_vec(a.rows, a.cols, values));
        data = &data[8 * n..];
    }
    if !data.is_empty() {
        return Err(CheckpointError::Header(format!("{} trailing bytes", data.len())));
    }
    let model = RecModel::from_params(cfg, header.like_rel, params)?;
    Ok((model, header))
}

pub fn save<T: Scalar>(
    path: &Path,
    model: &RecModel<T>,
    seed: u64,
    vocab_hash: &str,
    epoch: usize,
) -> Result<String, CheckpointError> {
    let bytes = to_bytes(model, seed, vocab_hash, epoch);
    fs::write(path, &bytes).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(RecModel<T>, CheckpointHeader), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    from_bytes(&bytes)
}
