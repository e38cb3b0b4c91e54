//! Binary checkpoints: model config, vocabulary, parameters, optimizer state
//! and generator state, restored bit for bit.
//!
//! Layout: the magic `PCLFCKPT`, a little-endian `u32` format version, a
//! `u64` header length, the JSON header, then every parameter value as a
//! little-endian `f64` in id order, followed by the optimizer's first and
//! second moments when present.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Classifier, ModelConfig};
use crate::optim::{AdamW, ParamGroup};
use crate::tensor::ParamStore;

const MAGIC: &[u8; 8] = b"PCLFCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub groups: Vec<ParamGroup>,
    pub step: u64,
}

/// ChaCha position: key, stream and word offset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since JSON numbers cannot hold a `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Checkpoint(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Checkpoint(format!("rng word position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    pub params: Vec<ParamEntry>,
    pub optimizer: Option<OptimizerHeader>,
    pub rng: Option<RngState>,
    /// Caller-defined run state (configuration, progress).
    pub run: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<Vec<f64>>,
    pub moments: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
}

impl Checkpoint {
    pub fn capture(
        model: &Classifier,
        store: &ParamStore,
        vocab: &Vocabulary,
        optimizer: Option<&AdamW>,
        rng: Option<&ChaCha8Rng>,
        run: serde_json::Value,
    ) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                model: model.config.clone(),
                vocab: vocab.tokens().to_vec(),
                params: store
                    .iter()
                    .map(|(_, p)| ParamEntry {
                        name: p.name.clone(),
                        shape: p.tensor.shape().to_vec(),
                    })
                    .collect(),
                optimizer: optimizer.map(|o| OptimizerHeader {
                    groups: o.groups().to_vec(),
                    step: o.step_count(),
                }),
                rng: rng.map(RngState::capture),
                run,
            },
            params: store.snapshot(),
            moments: optimizer.map(|o| {
                let (m, v) = o.moments();
                (m.to_vec(), v.to_vec())
            }),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let n_scalars: usize = self.params.iter().map(Vec::len).sum();
        let factor = if self.moments.is_some() { 3 } else { 1 };
        let mut out = Vec::with_capacity(20 + header.len() + 8 * n_scalars * factor);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |vs: &[Vec<f64>]| {
            for v in vs.iter().flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        put(&self.params);
        if let Some((m, v)) = &self.moments {
            put(m);
            put(v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
        let mut floats = body[hlen..].chunks_exact(8);
        if !floats.remainder().is_empty() {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let mut take = || -> Result<Vec<Vec<f64>>> {
            header
                .params
                .iter()
                .map(|p| {
                    let n: usize = p.shape.iter().product();
                    (0..n)
                        .map(|_| {
                            floats
                                .next()
                                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                                .ok_or_else(|| bad("truncated payload"))
                        })
                        .collect()
                })
                .collect()
        };
        let params = take()?;
        let moments = if header.optimizer.is_some() {
            Some((take()?, take()?))
        } else {
            None
        };
        if floats.next().is_some() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Checkpoint {
            header,
            params,
            moments,
        })
    }

    pub fn write(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        fs::write(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuilds the classifier, its parameter store and the vocabulary.
    pub fn restore_model(&self) -> Result<(Classifier, ParamStore, Vocabulary)> {
        use rand::SeedableRng;
        let mut store = ParamStore::new();
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        let model = Classifier::init(self.header.model.clone(), &mut store, &mut scratch)?;
        if store.len() != self.header.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                self.header.params.len(),
                store.len()
            )));
        }
        for ((_, p), e) in store.iter().zip(&self.header.params) {
            if p.name != e.name || p.tensor.shape() != e.shape.as_slice() {
                return Err(Error::Checkpoint(format!("tensor {} does not match the model layout", e.name)));
            }
        }
        store.restore(&self.params)?;
        let vocab = Vocabulary::from_tokens(self.header.vocab.clone())?;
        if vocab.len() != self.header.model.encoder.vocab_size {
            return Err(Error::Checkpoint("vocabulary size differs from the model's".into()));
        }
        Ok((model, store, vocab))
    }

    pub fn restore_optimizer(&self, store: &ParamStore) -> Result<Option<AdamW>> {
        match (&self.header.optimizer, &self.moments) {
            (Some(h), Some((m, v))) => Ok(Some(AdamW::from_state(h.groups.clone(), h.step, m.clone(), v.clone(), store)?)),
            _ => Ok(None),
        }
    }

    pub fn restore_rng(&self) -> Result<Option<ChaCha8Rng>> {
        self.header.rng.as_ref().map(RngState::restore).transpose()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}
