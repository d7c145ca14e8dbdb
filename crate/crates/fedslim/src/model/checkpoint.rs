//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! bytes 0..8   magic "FEDSLIM\x01"
//! bytes 8..12  u32 format version (currently 1)
//! bytes 12..20 u64 header length H
//! bytes 20..20+H  UTF-8 JSON header:
//!     { "config": {..} | null, "layer_ids": [..], "vocab": [..]?,
//!       "extra": {..}, "tensors": [ {"name","dtype","shape","offset"}, .. ] }
//! bytes 20+H.. packed tensor payload, f32 little-endian, at the offsets
//!              (relative to payload start) declared in the header
//! ```
//!
//! Serialization is canonical — fixed field order, sorted `extra` keys,
//! tensors in parameter-name order — so identical models produce identical
//! bytes, which the federation protocol's bit-exactness checks rely on.
//! The same container with a single tensor and no `config` stores a
//! standalone embedding table.

use super::{LayerParams, ModelConfig, Tensor, TransformerModel};
use crate::error::{Error, Result};
use crate::vocab::Vocab;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FEDSLIM\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Free-form metadata stored in the header (pruning plan, producing config).
pub type CheckpointExtra = serde_json::Map<String, serde_json::Value>;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: Option<ModelConfig>,
    layer_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vec<String>>,
    #[serde(default)]
    extra: CheckpointExtra,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

fn assemble(header: &Header, payload: Vec<u8>) -> Result<Vec<u8>> {
    let header_json = serde_json::to_string(header)?;
    let mut bytes = Vec::with_capacity(20 + header_json.len() + payload.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header_json.as_bytes());
    bytes.extend_from_slice(&payload);
    Ok(bytes)
}

fn pack_f32(data: &[f32], payload: &mut Vec<u8>) {
    for &x in data {
        payload.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serialize a model (plus optional vocabulary and metadata) to the
/// container format.
pub fn checkpoint_bytes(
    model: &TransformerModel<f32>,
    vocab: Option<&Vocab>,
    extra: CheckpointExtra,
) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::with_capacity(model.param_count() * 4);
    for name in model.param_names() {
        let t = model.param(&name).expect("own name");
        tensors.push(TensorEntry {
            name,
            dtype: "f32".into(),
            shape: t.shape.clone(),
            offset: payload.len() as u64,
        });
        pack_f32(&t.data, &mut payload);
    }
    let header = Header {
        config: Some(model.config),
        layer_ids: model.layer_ids.clone(),
        vocab: vocab.map(|v| v.tokens().to_vec()),
        extra,
        tensors,
    };
    assemble(&header, payload)
}

fn split_container(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 20 {
        return Err(Error::Data("checkpoint: shorter than fixed preamble".into()));
    }
    if &bytes[0..8] != CHECKPOINT_MAGIC {
        return Err(Error::Data("checkpoint: bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "checkpoint: unsupported format version {version}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let header_end = 20usize
        .checked_add(usize::try_from(header_len).map_err(|_| {
            Error::Data("checkpoint: header length overflows".into())
        })?)
        .ok_or_else(|| Error::Data("checkpoint: header length overflows".into()))?;
    if header_end > bytes.len() {
        return Err(Error::Data(format!(
            "checkpoint: declared header length {header_len} exceeds file size"
        )));
    }
    let header_text = std::str::from_utf8(&bytes[20..header_end])
        .map_err(|_| Error::Data("checkpoint: header is not UTF-8".into()))?;
    let header: Header =
        serde_json::from_str(header_text).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
    Ok((header, &bytes[header_end..]))
}

fn check_offsets(tensors: &[TensorEntry], payload_len: usize) -> Result<()> {
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(tensors.len());
    for e in tensors {
        if e.dtype != "f32" {
            return Err(Error::Data(format!(
                "checkpoint: tensor {} has unsupported dtype {}",
                e.name, e.dtype
            )));
        }
        let count: usize = e.shape.iter().product();
        let bytes = count as u64 * 4;
        let end = e.offset.checked_add(bytes).ok_or_else(|| {
            Error::Data(format!("checkpoint: tensor {} span overflows", e.name))
        })?;
        if end > payload_len as u64 {
            return Err(Error::Data(format!(
                "checkpoint: tensor {} extends past payload end",
                e.name
            )));
        }
        spans.push((e.offset, end, &e.name));
    }
    spans.sort();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::Data(format!(
                "checkpoint: tensors {} and {} overlap",
                pair[0].2, pair[1].2
            )));
        }
    }
    Ok(())
}

fn read_tensor(payload: &[u8], entry: &TensorEntry) -> Tensor<f32> {
    let count: usize = entry.shape.iter().product();
    let start = entry.offset as usize;
    let data = payload[start..start + count * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor {
        shape: entry.shape.clone(),
        data,
    }
}

/// Deserialize a model checkpoint produced by [`checkpoint_bytes`].
pub fn parse_checkpoint(
    bytes: &[u8],
) -> Result<(TransformerModel<f32>, Option<Vocab>, CheckpointExtra)> {
    let (header, payload) = split_container(bytes)?;
    check_offsets(&header.tensors, payload.len())?;
    let config = header
        .config
        .ok_or_else(|| Error::Data("checkpoint: missing model config".into()))?;
    config.validate()?;
    if header.layer_ids.is_empty() {
        return Err(Error::Data("checkpoint: no live layers".into()));
    }
    for pair in header.layer_ids.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::Data("checkpoint: layer_ids not strictly increasing".into()));
        }
    }
    if *header.layer_ids.last().unwrap() >= config.n_layers {
        return Err(Error::Data(format!(
            "checkpoint: layer id {} outside 0..{}",
            header.layer_ids.last().unwrap(),
            config.n_layers
        )));
    }

    let d = config.d_model;
    let zeros_layer = || LayerParams {
        ln1_g: Tensor::zeros(&[d]),
        wq: Tensor::zeros(&[d, d]),
        wk: Tensor::zeros(&[d, d]),
        wv: Tensor::zeros(&[d, d]),
        wo: Tensor::zeros(&[d, d]),
        ln2_g: Tensor::zeros(&[d]),
        w1: Tensor::zeros(&[d, config.d_ff]),
        w2: Tensor::zeros(&[config.d_ff, d]),
    };
    let mut model = TransformerModel {
        config,
        tok_emb: Tensor::zeros(&[config.vocab_size, d]),
        pos_emb: Tensor::zeros(&[config.max_seq_len, d]),
        layers: (0..header.layer_ids.len()).map(|_| zeros_layer()).collect(),
        layer_ids: header.layer_ids.clone(),
        ln_f_g: Tensor::zeros(&[d]),
    };

    let mut by_name = std::collections::BTreeMap::new();
    for e in &header.tensors {
        if by_name.insert(e.name.as_str(), e).is_some() {
            return Err(Error::Data(format!("checkpoint: duplicate tensor {}", e.name)));
        }
    }
    let names = model.param_names();
    if by_name.len() != names.len() {
        return Err(Error::Data(format!(
            "checkpoint: {} tensors in index, model needs {}",
            by_name.len(),
            names.len()
        )));
    }
    for name in &names {
        let entry = *by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Data(format!("checkpoint: missing tensor {name}")))?;
        let slot = model.param_mut(name).expect("own name");
        if entry.shape != slot.shape {
            return Err(Error::Data(format!(
                "checkpoint: tensor {name} has shape {:?}, expected {:?}",
                entry.shape, slot.shape
            )));
        }
        *slot = read_tensor(payload, entry);
    }

    let vocab = match header.vocab {
        Some(tokens) => {
            let v = Vocab::from_tokens(tokens)?;
            if v.len() != config.vocab_size {
                return Err(Error::Data(format!(
                    "checkpoint: vocab has {} tokens, config says {}",
                    v.len(),
                    config.vocab_size
                )));
            }
            Some(v)
        }
        None => None,
    };
    Ok((model, vocab, header.extra))
}

pub fn save_checkpoint(
    path: &Path,
    model: &TransformerModel<f32>,
    vocab: Option<&Vocab>,
    extra: CheckpointExtra,
) -> Result<()> {
    let bytes = checkpoint_bytes(model, vocab, extra)?;
    fs::write(path, bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
) -> Result<(TransformerModel<f32>, Option<Vocab>, CheckpointExtra)> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_checkpoint(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Store a standalone embedding table: same container, single tensor named
/// "embedding", no model config.
pub fn save_embedding(path: &Path, table: &Tensor<f32>, vocab: Option<&Vocab>) -> Result<()> {
    if table.shape.len() != 2 {
        return Err(Error::Data(format!(
            "embedding table must be 2-d, got shape {:?}",
            table.shape
        )));
    }
    let mut payload = Vec::with_capacity(table.len() * 4);
    pack_f32(&table.data, &mut payload);
    let header = Header {
        config: None,
        layer_ids: vec![],
        vocab: vocab.map(|v| v.tokens().to_vec()),
        extra: CheckpointExtra::new(),
        tensors: vec![TensorEntry {
            name: "embedding".into(),
            dtype: "f32".into(),
            shape: table.shape.clone(),
            offset: 0,
        }],
    };
    let bytes = assemble(&header, payload)?;
    fs::write(path, bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn load_embedding(path: &Path) -> Result<(Tensor<f32>, Option<Vocab>)> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let (header, payload) = split_container(&bytes)?;
    check_offsets(&header.tensors, payload.len())?;
    let entry = match header.tensors.as_slice() {
        [single] => single,
        other => {
            return Err(Error::Data(format!(
                "embedding file must hold exactly one tensor, found {}",
                other.len()
            )))
        }
    };
    if entry.shape.len() != 2 {
        return Err(Error::Data(format!(
            "embedding tensor must be 2-d, got shape {:?}",
            entry.shape
        )));
    }
    let vocab = header.vocab.map(Vocab::from_tokens).transpose()?;
    Ok((read_tensor(payload, entry), vocab))
}
