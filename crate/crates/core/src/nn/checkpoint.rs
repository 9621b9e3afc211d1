//! Flat binary parameter files.
//!
//! Layout: the 8 magic bytes `OTPCKPT\0`, a little-endian `u32` header length,
//! a UTF-8 JSON header, then every tensor's values as little-endian `f64` in
//! header order. The header is
//! `{"format_version": 1, "meta": {...}, "tensors": [{"name", "len", "spec"}]}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, MlpSpec};
use super::NnError;

pub const MAGIC: &[u8; 8] = b"OTPCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub spec: Option<MlpSpec>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorHeader>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    len: usize,
    spec: Option<MlpSpec>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push_net(&mut self, name: &str, net: &Mlp) {
        self.tensors.push(Tensor {
            name: name.into(),
            spec: Some(net.spec().clone()),
            data: net.params().to_vec(),
        });
    }

    pub fn push_raw(&mut self, name: &str, data: &[f64]) {
        self.tensors.push(Tensor {
            name: name.into(),
            spec: None,
            data: data.to_vec(),
        });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NnError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| NnError::Checkpoint(format!("missing tensor {name:?}")))
    }

    /// Rebuilds a network stored with [`Checkpoint::push_net`].
    pub fn net(&self, name: &str) -> Result<Mlp, NnError> {
        let t = self.get(name)?;
        let spec = t
            .spec
            .clone()
            .ok_or_else(|| NnError::Checkpoint(format!("tensor {name:?} has no architecture")))?;
        let mut net = Mlp::zeros(spec)?;
        net.set_params(&t.data)?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorHeader {
                    name: t.name.clone(),
                    len: t.data.len(),
                    spec: t.spec.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let n_values: usize = self.tensors.iter().map(|t| t.data.len()).sum();
        let mut out = Vec::with_capacity(12 + json.len() + 8 * n_values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let bad = |m: &str| NnError::Checkpoint(m.into());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let mut pos = 12 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for th in header.tensors {
            let end = pos + 8 * th.len;
            let raw = bytes.get(pos..end).ok_or_else(|| bad("truncated tensor data"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Tensor {
                name: th.name,
                spec: th.spec,
                data,
            });
            pos = end;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| NnError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let bytes = std::fs::read(path)
            .map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
