//! `FEL1` tensor archive.
//!
//! Layout: the magic `FEL1\n`, a little-endian `u64` header length, a JSON
//! header `{"tensors": [{name, shape, dtype}], "meta": {...}}`, then every
//! tensor's values as little-endian `f32` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Params};
use crate::tensor::{DTensor, Real};

pub const MAGIC: &[u8; 5] = b"FEL1\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

pub fn encode<F: Real>(params: &Params<F>, meta: serde_json::Value) -> Vec<u8> {
    let header = Header {
        tensors: params
            .iter()
            .map(|(k, v)| TensorEntry {
                name: k.clone(),
                shape: v.shape().to_vec(),
                dtype: "f32".into(),
            })
            .collect(),
        meta,
    };
    let head = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + head.len() + params.count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    for (_, v) in params.iter() {
        for x in v.data() {
            out.extend_from_slice(&(x.f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode<F: Real>(bytes: &[u8]) -> Result<(Params<F>, serde_json::Value)> {
    let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing FEL1 magic"));
    }
    let mut len = [0u8; 8];
    len.copy_from_slice(&bytes[5..13]);
    let hlen = u64::from_le_bytes(len) as usize;
    let body = 13usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[13..body])?;
    let mut params = Params::default();
    let mut off = body;
    for e in header.tensors {
        if e.dtype != "f32" {
            return Err(bad(&format!("unsupported dtype {} for {}", e.dtype, e.name)));
        }
        let n: usize = e.shape.iter().product();
        let end = off + n * 4;
        if end > bytes.len() {
            return Err(bad(&format!("truncated data for {}", e.name)));
        }
        let data = bytes[off..end]
            .chunks_exact(4)
            .map(|c| F::c(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        params.insert(e.name, DTensor::new(e.shape, data)?);
        off = end;
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok((params, header.meta))
}

/// Writes the model with its config stored under `meta.config`.
pub fn save<F: Real>(model: &Model<F>, path: &Path, extra: serde_json::Value) -> Result<()> {
    let meta = serde_json::json!({ "config": model.cfg, "extra": extra });
    let bytes = encode(&model.params, meta);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<F: Real>(path: &Path) -> Result<Model<F>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (params, meta) = decode::<F>(&bytes)?;
    let cfg: ModelConfig = serde_json::from_value(meta["config"].clone())?;
    cfg.validate()?;
    Ok(Model { cfg, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_f32_values() {
        let cfg = ModelConfig {
            d_model: 32,
            n_layers: 1,
            image_hw: (8, 8),
            ..ModelConfig::default()
        };
        let mut m = Model::<f32>::init(&cfg).unwrap();
        m.attach_lora(3);
        let bytes = encode(&m.params, serde_json::json!({"k": 1}));
        assert_eq!(&bytes[..5], MAGIC);
        let (p, meta) = decode::<f32>(&bytes).unwrap();
        assert_eq!(meta["k"], 1);
        assert_eq!(p.checksum(|_| true), m.params.checksum(|_| true));
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode::<f32>(b"FEL0\n0000000").is_err());
    }
}
