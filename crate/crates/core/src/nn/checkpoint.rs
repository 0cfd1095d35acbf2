//! Checkpoint archive: `"FSSRCKPT"`, `u32` format version, `u64` header
//! length, a JSON header (model config, training metadata, tensor index),
//! then every tensor as little-endian `f32` in index order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamKind, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FSSRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
    #[serde(default)]
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub kind: ParamKind,
    pub trainable: bool,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: serde_json::Value,
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: serde_json::Value,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: ParamKind,
    trainable: bool,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn capture(store: &ParamStore, model_config: serde_json::Value, meta: CheckpointMeta) -> Self {
        let tensors = store
            .iter()
            .map(|(_, p)| NamedTensor {
                name: p.name.clone(),
                kind: p.kind,
                trainable: p.trainable,
                tensor: (*p.value).clone(),
            })
            .collect();
        Self {
            model_config,
            meta,
            tensors,
        }
    }

    /// Copies every tensor into `store`, matching by name and shape.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::CheckpointIncompatible(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for t in &self.tensors {
            let id = store
                .id_of(&t.name)
                .ok_or_else(|| Error::CheckpointIncompatible(format!("unknown tensor {}", t.name)))?;
            store
                .set(id, t.tensor.clone())
                .map_err(|e| Error::CheckpointIncompatible(e.to_string()))?;
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            model_config: self.model_config.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    kind: t.kind,
                    trainable: t.trainable,
                    shape: t.tensor.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for t in &self.tensors {
            let mut buf = Vec::with_capacity(4 * t.tensor.numel());
            for v in t.tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        input.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let mut raw = vec![0u8; 4 * n];
            input
                .read_exact(&mut raw)
                .map_err(|err| Error::format("checkpoint", format!("tensor {}: {err}", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor {
                name: e.name,
                kind: e.kind,
                trainable: e.trainable,
                tensor: Tensor::from_vec(&e.shape, data)?,
            });
        }
        Ok(Self {
            model_config: header.model_config,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip() {
        let mut store = ParamStore::new();
        store.add("a.weight", ParamKind::Weight, Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap());
        store.add("a.running_var", ParamKind::RunningVar, Tensor::full(&[3], 1.0));
        let ckpt = Checkpoint::capture(
            &store,
            serde_json::json!({"arch": "toy"}),
            CheckpointMeta { step: 12, seed: 3, tag: "t".into() },
        );
        let mut bytes = Vec::new();
        ckpt.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, ckpt);

        let mut other = store.clone();
        other.set(other.id_of("a.weight").unwrap(), Tensor::zeros(&[2, 2])).unwrap();
        back.restore_into(&mut other).unwrap();
        assert_eq!(other.get(other.id_of("a.weight").unwrap()).data(), &[1.0, -2.0, 3.5, 0.25]);
    }
}
