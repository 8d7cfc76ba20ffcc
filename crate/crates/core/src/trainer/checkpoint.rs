//! Binary checkpoint: an 8-byte little-endian header length, a JSON header,
//! then every tensor as little-endian f64 in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::peft::PeMethod;
use crate::retrievers::{ModelSpec, RetrieverModel};
use crate::tensor::{seeded_rng, Tensor};

const FORMAT: &str = "pe-retrieval-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub path: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub spec: ModelSpec,
    pub train: TrainConfig,
    pub pe_method: PeMethod,
    pub step: u64,
    pub vocab_hash: String,
    /// The vocabulary itself, so a checkpoint is self-contained.
    pub vocab: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: RetrieverModel,
    pub vocab: Vocabulary,
}

impl Checkpoint {
    pub fn new(
        spec: ModelSpec,
        train: TrainConfig,
        step: u64,
        model: RetrieverModel,
        vocab: Vocabulary,
    ) -> Self {
        let tensors = model
            .parameters()
            .into_iter()
            .map(|(path, t)| TensorEntry {
                path,
                shape: t.shape().to_vec(),
            })
            .collect();
        let header = CheckpointHeader {
            format: FORMAT.into(),
            version: VERSION,
            pe_method: spec.pe.method,
            spec,
            train,
            step,
            vocab_hash: vocab.fingerprint(),
            vocab: vocab.words().to_vec(),
            tensors,
        };
        Checkpoint {
            header,
            model,
            vocab,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| Error::Checkpoint(format!("cannot encode header: {e}")))?;
        let params = self.model.parameters();
        let mut out = Vec::with_capacity(8 + header.len() + 8 * params.iter().map(|(_, t)| t.len()).sum::<usize>());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for ((path, t), entry) in params.iter().zip(&self.header.tensors) {
            if *path != entry.path || t.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!("header disagrees with model at {path}")));
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        if bytes.len() < 8 {
            return Err(bad("file shorter than its length prefix".into()));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let payload_start = 8usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("header length {hlen} exceeds file size")))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[8..payload_start])
            .map_err(|e| bad(format!("invalid header: {e}")))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(bad(format!(
                "unsupported checkpoint {} v{}",
                header.format, header.version
            )));
        }
        let vocab = Vocabulary::from_words(header.vocab.iter().cloned())?;
        if vocab.fingerprint() != header.vocab_hash {
            return Err(bad("vocabulary does not match its recorded hash".into()));
        }
        let payload = &bytes[payload_start..];
        let expected: usize = header
            .tensors
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum();
        if payload.len() != 8 * expected {
            return Err(bad(format!(
                "payload holds {} bytes, header describes {}",
                payload.len(),
                8 * expected
            )));
        }
        // structure comes from the spec; every value is then overwritten
        let mut model = RetrieverModel::new(&header.spec, &mut seeded_rng(0))?;
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        {
            let mut params = model.parameters_mut();
            if params.len() != header.tensors.len() {
                return Err(bad(format!(
                    "header lists {} tensors, model has {}",
                    header.tensors.len(),
                    params.len()
                )));
            }
            for ((path, t), entry) in params.iter_mut().zip(&header.tensors) {
                if *path != entry.path || t.shape() != entry.shape.as_slice() {
                    return Err(bad(format!(
                        "tensor {} {:?} does not match model {path} {:?}",
                        entry.path,
                        entry.shape,
                        t.shape()
                    )));
                }
                let data: Vec<f64> = values.by_ref().take(t.len()).collect();
                **t = Tensor::new(entry.shape.clone(), data)?;
            }
        }
        model.sync_shared();
        Ok(Checkpoint {
            header,
            model,
            vocab,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
