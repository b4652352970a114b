//! Binary checkpoints: `MAPSCKP1`, a JSON manifest of named parameters, a
//! contiguous little-endian f32 payload and a JSON snapshot of the model config.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusSchema;
use crate::error::{MapsError, Result};
use crate::model::{CategoryVocab, MapsModel, ModelConfig};
use crate::tensor::Mat;

const MAGIC: &[u8; 8] = b"MAPSCKP1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: (usize, usize),
    /// Offset into the payload, in f32 values.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub val_ndcg10: Option<f64>,
}

/// Everything needed to rebuild the model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub model: ModelConfig,
    pub schema: CorpusSchema,
    pub vocab: CategoryVocab,
    pub d_llm: usize,
    pub best: Option<BestRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub snapshot: ModelSnapshot,
    pub params: Vec<(String, Mat)>,
}

fn read_u64(bytes: &[u8], at: &mut usize) -> Result<u64> {
    let end = *at + 8;
    let slice = bytes.get(*at..end).ok_or_else(|| MapsError::Format("checkpoint truncated".into()))?;
    *at = end;
    Ok(u64::from_le_bytes(slice.try_into().expect("8 bytes")))
}

fn read_block<'a>(bytes: &'a [u8], at: &mut usize, len: usize) -> Result<&'a [u8]> {
    let end = at.checked_add(len).ok_or_else(|| MapsError::Format("checkpoint block length overflows".into()))?;
    let slice = bytes.get(*at..end).ok_or_else(|| MapsError::Format("checkpoint truncated".into()))?;
    *at = end;
    Ok(slice)
}

impl Checkpoint {
    pub fn from_model(model: &MapsModel, best: Option<BestRecord>) -> Self {
        Self {
            snapshot: ModelSnapshot {
                model: model.config.clone(),
                schema: model.schema.clone(),
                vocab: model.vocab.clone(),
                d_llm: model.d_llm,
                best,
            },
            params: model.params.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for (name, m) in &self.params {
            manifest.push(ManifestEntry { name: name.clone(), shape: m.shape(), offset });
            offset += m.len();
        }
        let manifest = serde_json::to_vec(&manifest)?;
        let config = serde_json::to_vec(&self.snapshot)?;
        let mut out = Vec::with_capacity(32 + manifest.len() + config.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(offset as u64).to_le_bytes());
        for (_, m) in &self.params {
            for &x in m.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(&config);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(MapsError::Format("missing MAPSCKP1 header".into()));
        }
        let mut at = 8;
        let n = read_u64(bytes, &mut at)? as usize;
        let manifest: Vec<ManifestEntry> = serde_json::from_slice(read_block(bytes, &mut at, n)?)
            .map_err(|e| MapsError::Format(format!("bad checkpoint manifest: {e}")))?;
        let count = read_u64(bytes, &mut at)? as usize;
        let payload = read_block(bytes, &mut at, count.saturating_mul(4))?;
        let n = read_u64(bytes, &mut at)? as usize;
        let snapshot: ModelSnapshot = serde_json::from_slice(read_block(bytes, &mut at, n)?)
            .map_err(|e| MapsError::Format(format!("bad checkpoint config: {e}")))?;
        if at != bytes.len() {
            return Err(MapsError::Format(format!("{} trailing bytes after checkpoint", bytes.len() - at)));
        }
        let mut params = Vec::with_capacity(manifest.len());
        let mut expected = 0;
        for e in manifest {
            let len = e.shape.0 * e.shape.1;
            if e.offset != expected || e.offset + len > count {
                return Err(MapsError::Format(format!("manifest entry {} does not match the payload", e.name)));
            }
            if params.iter().any(|(n, _): &(String, Mat)| *n == e.name) {
                return Err(MapsError::Format(format!("duplicate manifest entry {}", e.name)));
            }
            let data = payload[e.offset * 4..(e.offset + len) * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            params.push((e.name, Mat::from_vec(e.shape.0, e.shape.1, data)));
            expected += len;
        }
        if expected != count {
            return Err(MapsError::Format(format!("payload holds {count} values, manifest covers {expected}")));
        }
        Ok(Self { snapshot, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| MapsError::Load { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn sha256(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    /// Copies every parameter into `model`, which must have the same layout.
    pub fn apply_to(&self, model: &mut MapsModel) -> Result<()> {
        if self.params.len() != model.params.len() {
            return Err(MapsError::Format(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, value) in &self.params {
            let id = model.params.id(name).ok_or_else(|| MapsError::Format(format!("model has no parameter {name}")))?;
            let target = model.params.get_mut(id);
            if target.shape() != value.shape() {
                return Err(MapsError::Shape { name: name.clone(), expected: target.shape(), found: value.shape() });
            }
            *target = value.clone();
        }
        Ok(())
    }

    /// Model rebuilt from the snapshot with the stored parameters.
    pub fn into_model(self) -> Result<MapsModel> {
        let s = &self.snapshot;
        let mut model = MapsModel::new(s.model.clone(), s.schema.clone(), s.vocab.clone(), s.d_llm, 0)?;
        self.apply_to(&mut model)?;
        Ok(model)
    }
}
