//! Binary checkpoint: magic, format version, a JSON manifest, then each
//! parameter's values as raw little-endian `f64` in manifest order.
//!
//! ```text
//! b"ASTECKPT" | u32 version | u64 manifest_len | manifest JSON | payload
//! ```

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::pairing::Ablation;
use crate::tensor::{Array, ParamStore};

const MAGIC: &[u8; 8] = b"ASTECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Extract,
    Match,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Extract => "extract",
            Stage::Match => "match",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// Epoch the selected weights come from; 0 means untrained.
    pub epoch: usize,
    /// Dev metric that selected this checkpoint (span-F1 or triplet-F1).
    pub dev_metric: f64,
    pub seed: u64,
    pub ablation: Ablation,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: EncoderConfig,
    pub vocab: Vocabulary,
    pub meta: TrainingMeta,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in values.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    stage: Stage,
    config: EncoderConfig,
    vocab: Vec<String>,
    meta: TrainingMeta,
    params: Vec<ParamEntry>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let params = self
            .params
            .iter()
            .map(|(_, p)| {
                let e = ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    offset,
                };
                offset += p.value.len();
                e
            })
            .collect();
        let manifest = Manifest {
            stage: self.stage,
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            meta: self.meta.clone(),
            params,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| corrupt(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.params.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(corrupt(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < mlen {
            return Err(corrupt("truncated manifest"));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..mlen]).map_err(|e| corrupt(format!("manifest: {e}")))?;
        let payload = &body[mlen..];
        if !payload.len().is_multiple_of(8) {
            return Err(corrupt("payload is not a whole number of f64 values"));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut params = ParamStore::new();
        let mut expected = 0;
        for e in manifest.params {
            let n: usize = e.shape.iter().product();
            if e.offset != expected || e.offset + n > values.len() {
                return Err(corrupt(format!("parameter {} has a bad offset", e.name)));
            }
            if params.id(&e.name).is_some() {
                return Err(corrupt(format!("duplicate parameter {}", e.name)));
            }
            let arr = Array::new(e.shape, values[e.offset..e.offset + n].to_vec())?;
            params.add(e.name, arr);
            expected += n;
        }
        if expected != values.len() {
            return Err(corrupt("trailing payload bytes"));
        }
        manifest.config.validate()?;
        Ok(Checkpoint {
            stage: manifest.stage,
            config: manifest.config,
            vocab: Vocabulary::from_tokens(manifest.vocab)?,
            meta: manifest.meta,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_stage(self, stage: Stage) -> Result<Self> {
        if self.stage != stage {
            return Err(corrupt(format!(
                "expected a {stage} checkpoint, found {}",
                self.stage
            )));
        }
        Ok(self)
    }
}
