//! Checkpoint container.
//!
//! ```text
//! [u64 LE header length][UTF-8 JSON header][tensor payloads]
//! ```
//!
//! The header holds `config`, a `tensors` directory (name → dtype, shape,
//! byte offset and byte length, offsets relative to the first payload byte)
//! and an optional `manifest`. Payloads are little-endian `f64` values laid
//! out back to back in directory order.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{block_shapes, zero_block, ModelParams};
use super::HybridModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub tensors: IndexMap<String, TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<serde_json::Value>,
}

pub fn to_bytes(model: &HybridModel, manifest: Option<&serde_json::Value>) -> Result<Vec<u8>> {
    let named = model.params.named();
    let mut tensors = IndexMap::new();
    let mut offset = 0u64;
    for (name, t) in &named {
        let length = (t.numel() * 8) as u64;
        tensors.insert(
            name.clone(),
            TensorEntry {
                dtype: "f64".into(),
                shape: t.shape().to_vec(),
                offset,
                length,
            },
        );
        offset += length;
    }
    let header = Header {
        config: model.config.clone(),
        tensors,
        manifest: manifest.cloned(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &named {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 8 {
        return Err(Error::Format("checkpoint shorter than its length prefix".into()));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let end = 8usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("header length exceeds file size".into()))?;
    let header: Header = serde_json::from_slice(&bytes[8..end])
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    Ok((header, end))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(HybridModel, Header)> {
    let (header, start) = read_header(bytes)?;
    let cfg = header.config.clone();
    cfg.validate()?;
    let payload = &bytes[start..];
    let load = |name: &str, want: &[usize]| -> Result<Tensor> {
        let entry = header
            .tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if entry.dtype != "f64" {
            return Err(Error::Format(format!("{name}: unsupported dtype {}", entry.dtype)));
        }
        if entry.shape != want {
            return Err(Error::Format(format!(
                "{name}: shape {:?}, config implies {want:?}",
                entry.shape
            )));
        }
        let numel: usize = want.iter().product();
        let (off, len) = (entry.offset as usize, entry.length as usize);
        if len != numel * 8 || off.checked_add(len).is_none_or(|e| e > payload.len()) {
            return Err(Error::Format(format!("{name}: payload out of bounds")));
        }
        let data = payload[off..off + len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(want.to_vec(), data)
    };

    let e = cfg.d_model;
    let embedding = load("embedding", &[cfg.vocab, e])?;
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for (i, &kind) in cfg.layer_pattern.iter().enumerate() {
        let mut block = zero_block(kind, &cfg);
        let shapes = block_shapes(kind, &cfg);
        for ((field, slot), (_, shape)) in block.fields_mut().into_iter().zip(shapes) {
            *slot = load(&format!("layers.{i}.{kind}.{field}"), &shape)?;
        }
        blocks.push(block);
    }
    let final_norm = load("final_norm", &[e])?;
    let unembedding = load("unembedding", &[e, cfg.vocab])?;
    let model = HybridModel::from_parts(
        cfg,
        ModelParams {
            embedding,
            blocks,
            final_norm,
            unembedding,
        },
    )?;
    Ok((model, header))
}

pub fn save(path: &Path, model: &HybridModel, manifest: Option<&serde_json::Value>) -> Result<()> {
    let bytes = to_bytes(model, manifest)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(HybridModel, Header)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_every_bit() {
        let cfg = ModelConfig::new("M*-", 8, 16, 4, 4, 2, 4, 2, 32).unwrap();
        let m = HybridModel::init(cfg, 3).unwrap();
        let manifest = serde_json::json!({"command": "test"});
        let bytes = to_bytes(&m, Some(&manifest)).unwrap();
        let (back, header) = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(header.manifest, Some(manifest));
        let names: Vec<_> = header.tensors.keys().cloned().collect();
        assert_eq!(names[0], "embedding");
        assert_eq!(names[1], "layers.0.mamba.norm");
        assert_eq!(names.last().unwrap(), "unembedding");
    }

    #[test]
    fn header_prefix_is_little_endian_length() {
        let cfg = ModelConfig::new("-", 4, 4, 2, 2, 1, 2, 1, 8).unwrap();
        let m = HybridModel::init(cfg, 0).unwrap();
        let bytes = to_bytes(&m, None).unwrap();
        let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + len]).unwrap();
        let emb = &header["tensors"]["embedding"];
        assert_eq!(emb["dtype"], "f64");
        assert_eq!(emb["offset"], 0);
        assert_eq!(emb["length"], 8 * 4 * 8);
        let first = f64::from_le_bytes(bytes[8 + len..16 + len].try_into().unwrap());
        assert_eq!(first, m.params.embedding.data()[0]);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let cfg = ModelConfig::new("-", 4, 4, 2, 2, 1, 2, 1, 8).unwrap();
        let m = HybridModel::init(cfg, 0).unwrap();
        let bytes = to_bytes(&m, None).unwrap();
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 8]),
            Err(Error::Format(_))
        ));
        assert!(matches!(from_bytes(&bytes[..4]), Err(Error::Format(_))));
    }
}
