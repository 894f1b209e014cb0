//! On-disk parameter snapshots.
//!
//! A checkpoint is a directory holding `manifest.json` and `params.bin`. The
//! manifest lists every tensor (name, shape, trainable flag) in blob order;
//! the blob is the concatenation of their f64 values, little-endian. Optional
//! Adam moments follow the parameters, `m` then `v` for each listed name.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adam::{AdamConfig, AdamState, Moments};
use crate::params::ParamStore;
use crate::tensor::{numel, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint blob: {0}")]
    CorruptBlob(String),
    #[error("parameter `{name}` has shape {found:?} in checkpoint, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter `{0}` missing from checkpoint")]
    MissingParam(String),
    #[error("checkpoint has unexpected parameter `{0}`")]
    UnexpectedParam(String),
}

impl CheckpointError {
    /// Stable numeric code per failure class.
    pub fn code(&self) -> i32 {
        match self {
            CheckpointError::Io(_) => 10,
            CheckpointError::Manifest(_) => 11,
            CheckpointError::VersionMismatch { .. } => 12,
            CheckpointError::CorruptBlob(_) => 13,
            CheckpointError::ShapeMismatch { .. } => 14,
            CheckpointError::MissingParam(_) => 15,
            CheckpointError::UnexpectedParam(_) => 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub config: AdamConfig,
    pub step: u64,
    pub groups: Vec<(String, f64)>,
    pub moments: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub blob_bytes: u64,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerEntry>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

pub fn save(
    dir: &Path,
    params: &ParamStore,
    optimizer: Option<&AdamState>,
    metadata: &BTreeMap<String, serde_json::Value>,
) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(params.total_scalars() * 8);
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            trainable: t.requires_grad,
        });
        push_values(&mut blob, t.data());
    }
    let optimizer = optimizer.map(|st| {
        let mut names = Vec::new();
        for (name, m) in st.moments() {
            push_values(&mut blob, &m.m);
            push_values(&mut blob, &m.v);
            names.push(name.clone());
        }
        OptimizerEntry {
            config: st.config,
            step: st.step,
            groups: st.groups().to_vec(),
            moments: names,
        }
    });
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: "f64-le".into(),
        blob_bytes: blob.len() as u64,
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        tensors,
        optimizer,
        metadata: metadata.clone(),
    };
    fs::write(dir.join(BLOB_FILE), &blob)?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CheckpointError> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    // Check the version before the full schema so old/new layouts report cleanly.
    let found = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found,
            expected: FORMAT_VERSION,
        });
    }
    Ok(serde_json::from_value(raw)?)
}

pub fn load(dir: &Path) -> Result<Snapshot, CheckpointError> {
    let manifest = read_manifest(dir)?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(CheckpointError::CorruptBlob(format!(
            "{} bytes on disk, manifest says {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    if hex::encode(Sha256::digest(&blob)) != manifest.blob_sha256 {
        return Err(CheckpointError::CorruptBlob("checksum mismatch".into()));
    }
    let mut cursor = Cursor { blob: &blob, pos: 0 };
    let mut params = ParamStore::new();
    let mut shapes = BTreeMap::new();
    for e in &manifest.tensors {
        let data = cursor.take(numel(&e.shape))?;
        let t = Tensor::new(&e.shape, data)
            .map_err(|err| CheckpointError::CorruptBlob(err.to_string()))?;
        params
            .insert(e.name.clone(), t, e.trainable)
            .map_err(|err| CheckpointError::CorruptBlob(err.to_string()))?;
        shapes.insert(e.name.as_str(), numel(&e.shape));
    }
    let optimizer = match &manifest.optimizer {
        None => None,
        Some(o) => {
            let mut st = AdamState::new(o.config);
            st.step = o.step;
            for (prefix, mult) in &o.groups {
                st = st.with_group(prefix.clone(), *mult);
            }
            for name in &o.moments {
                let n = *shapes
                    .get(name.as_str())
                    .ok_or_else(|| CheckpointError::CorruptBlob(format!("moments for unknown `{name}`")))?;
                let m = cursor.take(n)?;
                let v = cursor.take(n)?;
                st.insert_moments(name.clone(), Moments { m, v });
            }
            Some(st)
        }
    };
    if cursor.pos != blob.len() {
        return Err(CheckpointError::CorruptBlob(format!(
            "{} trailing bytes",
            blob.len() - cursor.pos
        )));
    }
    Ok(Snapshot {
        params,
        optimizer,
        metadata: manifest.metadata,
    })
}

/// Loads a checkpoint and checks it against `template`: same parameter
/// names and shapes. Trainable flags come from the checkpoint.
pub fn load_matching(dir: &Path, template: &ParamStore) -> Result<Snapshot, CheckpointError> {
    let snap = load(dir)?;
    for (name, t) in template.iter() {
        let found = snap
            .params
            .get(name)
            .ok_or_else(|| CheckpointError::MissingParam(name.to_string()))?;
        if found.shape() != t.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: t.shape().to_vec(),
                found: found.shape().to_vec(),
            });
        }
    }
    if let Some(extra) = snap.params.names().find(|n| !template.contains(n)) {
        return Err(CheckpointError::UnexpectedParam(extra.to_string()));
    }
    Ok(snap)
}

fn push_values(blob: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    blob: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let end = self.pos + n * 8;
        if end > self.blob.len() {
            return Err(CheckpointError::CorruptBlob("blob shorter than manifest".into()));
        }
        let out = self.blob[self.pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        self.pos = end;
        Ok(out)
    }
}
