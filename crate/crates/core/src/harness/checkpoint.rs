//! Single-file checkpoints.
//!
//! Layout: 8-byte magic, `u32` LE format version, `u64` LE header length,
//! a JSON header (configs, vocabulary, tensor names and shapes, epoch, dev
//! accuracy), then every tensor's values as little-endian `f64` in header
//! order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::layers::{Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SKDCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub train_config: TrainConfig,
    pub vocab: Vocabulary,
    pub model: Model,
    /// 1-based epoch the weights come from; 0 = initialization.
    pub epoch: usize,
    pub dev_acc: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    train_config: TrainConfig,
    model_config: ModelConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorHeader>,
    epoch: usize,
    dev_acc: f64,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            train_config: self.train_config.clone(),
            model_config: self.model.config().clone(),
            vocab: self.vocab.tokens().to_vec(),
            tensors: self
                .model
                .names()
                .iter()
                .zip(self.model.params())
                .map(|(n, t)| TensorHeader {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            epoch: self.epoch,
            dev_acc: self.dev_acc,
        };
        let json = serde_json::to_vec(&header)?;
        let values: usize = self.model.params().iter().map(Tensor::numel).sum();
        let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + 8 * values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.model.params() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut take = |n: usize| -> Result<&[u8]> {
            if bytes.len() < n {
                return Err(bad("truncated file"));
            }
            let (head, rest) = bytes.split_at(n);
            bytes = rest;
            Ok(head)
        };
        if take(8)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(take(len)?)?;
        let mut params = Vec::with_capacity(header.tensors.len());
        for th in &header.tensors {
            let n: usize = th.shape.iter().product();
            let raw = take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.push(Tensor::new(th.shape.clone(), data)?);
        }
        if !bytes.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let model = Model::from_parts(header.model_config, params)?;
        if model
            .names()
            .iter()
            .zip(&header.tensors)
            .any(|(a, b)| *a != b.name)
        {
            return Err(bad("tensor names do not match the model layout"));
        }
        let vocab = Vocabulary::from_tokens(header.vocab)?;
        if vocab.len() != model.config().vocab_size {
            return Err(bad("vocabulary size differs from the embedding table"));
        }
        Ok(Checkpoint {
            train_config: header.train_config,
            vocab,
            model,
            epoch: header.epoch,
            dev_acc: header.dev_acc,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        f.write_all(&bytes)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
