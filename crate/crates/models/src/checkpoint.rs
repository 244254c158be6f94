//! JSON checkpoint container. Tensors are stored as base64-encoded
//! little-endian `f32` buffers next to their shapes.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::nn::{ParamStore, DEVICE};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: String,
}

impl StoredTensor {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let values = t.flatten_all()?.to_vec1::<f32>()?;
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Ok(StoredTensor { shape: t.dims().to_vec(), data: STANDARD.encode(bytes) })
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let bytes = STANDARD.decode(&self.data).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if bytes.len() != 4 * self.shape.iter().product::<usize>() {
            return Err(ModelError::Checkpoint("tensor byte length does not match shape".into()));
        }
        let values: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Tensor::from_vec(values, self.shape.as_slice(), &DEVICE)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    /// Artifact kind, e.g. `"vqvae"`.
    pub kind: String,
    /// Echo of the configuration that produced the artifact.
    pub config: serde_json::Value,
    pub seed: u64,
    /// Stage names that contributed to the weights, in order.
    pub provenance: Vec<String>,
    pub tensors: BTreeMap<String, StoredTensor>,
    /// Kind-specific metadata (standardisation statistics, size histograms, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn from_store(kind: &str, config: serde_json::Value, seed: u64, provenance: Vec<String>, ps: &ParamStore) -> Result<Self> {
        let tensors =
            ps.named().iter().map(|(name, var)| Ok((name.clone(), StoredTensor::from_tensor(var.as_tensor())?))).collect::<Result<_>>()?;
        Ok(Checkpoint {
            schema_version: SCHEMA_VERSION,
            kind: kind.to_string(),
            config,
            seed,
            provenance,
            tensors,
            extra: serde_json::Value::Null,
        })
    }

    /// Overwrites every parameter of `ps` with the stored value of the same name.
    pub fn restore_into(&self, ps: &ParamStore) -> Result<()> {
        for (name, var) in ps.named() {
            let stored = self.tensors.get(name).ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {name}")))?;
            let t = stored.to_tensor()?;
            if t.dims() != var.dims() {
                return Err(ModelError::Checkpoint(format!("shape mismatch for {name}: {:?} vs {:?}", t.dims(), var.dims())));
            }
            var.set(&t)?;
        }
        if self.tensors.len() != ps.named().len() {
            return Err(ModelError::Checkpoint("checkpoint holds unknown tensors".into()));
        }
        Ok(())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported schema version {}", self.schema_version)));
        }
        if self.kind != kind {
            return Err(ModelError::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
