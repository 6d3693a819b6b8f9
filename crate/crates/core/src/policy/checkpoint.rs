//! Checkpoint files: a magic line, one JSON header line, then little-endian
//! `f64` payload (base tensors followed by adapter tensors).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adapter::{Adapters, LoraConfig};
use super::model::{Arch, PolicyModel};
use super::{PolicyError, SequenceModel, Tokenizer};
use crate::scalar::Scalar;
use crate::template::sha256_hex;

pub const CHECKPOINT_MAGIC: &[u8] = b"DXCK1\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Base,
    Sft,
    Dpo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub phase: Phase,
    pub arch: Arch,
    pub tokenizer: Tokenizer,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub adapter: Option<LoraConfig>,
    #[serde(default)]
    pub adapter_tensors: Vec<TensorEntry>,
    /// Content hash of the checkpoint this one was trained from.
    #[serde(default)]
    pub parent: Option<String>,
    /// Content hash of the frozen reference used in preference training.
    #[serde(default)]
    pub reference: Option<String>,
    pub config_hash: String,
    pub seed: u64,
}

/// Provenance written alongside the weights.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CheckpointInfo {
    pub parent: Option<String>,
    pub reference: Option<String>,
    pub config_hash: String,
    pub seed: u64,
}

fn ck_err(path: &Path, message: impl Into<String>) -> PolicyError {
    PolicyError::Checkpoint { path: path.display().to_string(), message: message.into() }
}

impl<S: Scalar> PolicyModel<S> {
    pub fn header(&self, phase: Phase, info: &CheckpointInfo) -> CheckpointHeader {
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (name, shape, data) in self.named_tensors() {
            tensors.push(TensorEntry { name, shape, offset });
            offset += data.len();
        }
        let mut adapter_tensors = Vec::new();
        if let Some(ad) = self.adapters() {
            for (name, shape, data) in ad.named(|l| format!("layers.{l}")) {
                adapter_tensors.push(TensorEntry { name, shape, offset });
                offset += data.len();
            }
        }
        CheckpointHeader {
            phase,
            arch: *self.arch(),
            tokenizer: self.tokenizer().clone(),
            tensors,
            adapter: self.lora_config().cloned(),
            adapter_tensors,
            parent: info.parent.clone(),
            reference: info.reference.clone(),
            config_hash: info.config_hash.clone(),
            seed: info.seed,
        }
    }

    pub fn to_checkpoint_bytes(&self, phase: Phase, info: &CheckpointInfo) -> Vec<u8> {
        let header = self.header(phase, info);
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend(serde_json::to_vec(&header).expect("header serializes"));
        out.push(b'\n');
        let adapter = self.adapters().map(|a| a.params.as_slice()).unwrap_or(&[]);
        for v in self.params().iter().chain(adapter) {
            out.extend_from_slice(&v.f64().to_le_bytes());
        }
        out
    }

    /// Writes the checkpoint and returns its content hash.
    pub fn save(&self, path: &Path, phase: Phase, info: &CheckpointInfo) -> Result<String, PolicyError> {
        let bytes = self.to_checkpoint_bytes(phase, info);
        crate::io::ensure_parent(path).map_err(|e| ck_err(path, e.to_string()))?;
        fs::write(path, &bytes).map_err(|source| PolicyError::Io { path: path.display().to_string(), source })?;
        Ok(sha256_hex(&bytes))
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], path: &Path) -> Result<(Self, CheckpointHeader), PolicyError> {
        let rest = bytes.strip_prefix(CHECKPOINT_MAGIC).ok_or_else(|| ck_err(path, "bad magic"))?;
        let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| ck_err(path, "missing header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&rest[..nl]).map_err(|e| ck_err(path, format!("header: {e}")))?;
        let payload = &rest[nl + 1..];
        if payload.len() % 8 != 0 {
            return Err(ck_err(path, "payload is not a whole number of f64 values"));
        }
        let values: Vec<S> = payload
            .chunks_exact(8)
            .map(|c| S::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        let n_base = header.arch.param_count();
        if values.len() < n_base {
            return Err(ck_err(path, "payload shorter than the architecture"));
        }
        let mut model = PolicyModel::from_parts(header.arch, header.tokenizer.clone(), values[..n_base].to_vec())
            .map_err(|e| ck_err(path, e.to_string()))?;
        match &header.adapter {
            Some(cfg) => {
                let mut ad = Adapters::zeros(cfg.clone(), model.layout())?;
                if values.len() != n_base + ad.params.len() {
                    return Err(ck_err(path, "adapter payload size mismatch"));
                }
                ad.params = values[n_base..].to_vec();
                model.set_adapters(Some(ad));
            }
            None if values.len() != n_base => return Err(ck_err(path, "trailing payload")),
            None => {}
        }
        Ok((model, header))
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader), PolicyError> {
        let bytes = fs::read(path).map_err(|source| PolicyError::Io { path: path.display().to_string(), source })?;
        Self::from_checkpoint_bytes(&bytes, path)
    }

    /// JSON export of every effective weight tensor by name, for
    /// recomputation outside this crate.
    pub fn export_tensors(&self, path: &Path) -> Result<(), PolicyError> {
        let mut merged = self.clone();
        merged.merge_adapters();
        let tensors: serde_json::Map<String, serde_json::Value> = merged
            .named_tensors()
            .into_iter()
            .map(|(name, shape, data)| {
                let data: Vec<f64> = data.iter().map(|v| v.f64()).collect();
                (name, serde_json::json!({ "shape": shape, "data": data }))
            })
            .collect();
        let doc = serde_json::json!({ "arch": merged.arch(), "tensors": tensors });
        crate::io::write_json(path, &doc).map_err(|e| ck_err(path, e.to_string()))
    }
}

/// Content hash of a checkpoint file.
pub fn checkpoint_hash(path: &Path) -> Result<String, PolicyError> {
    let bytes = fs::read(path).map_err(|source| PolicyError::Io { path: path.display().to_string(), source })?;
    Ok(sha256_hex(&bytes))
}
