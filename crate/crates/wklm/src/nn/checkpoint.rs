//! Self-describing checkpoint container.
//!
//! Layout: an 8-byte little-endian header length, a JSON header (format tag,
//! model config, vocabulary, tensor manifest with declared shapes), then the
//! tensor data as row-major little-endian 64-bit floats in manifest order.
//! The loader validates the manifest against the config before reading data.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::vocab::Vocab;

use super::params::ParamLayout;
use super::{ModelConfig, ModelParams, NnError};

const FORMAT_TAG: &str = "wklm-checkpoint";
const FORMAT_VERSION: u32 = 1;

/// A loaded model: config, vocabulary and parameters together.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ModelParams,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorMeta>,
}

fn io_err(path: &Path, source: std::io::Error) -> NnError {
    NnError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write a checkpoint file.
pub fn save_checkpoint(
    path: &Path,
    config: &ModelConfig,
    vocab: &Vocab,
    params: &ModelParams,
) -> Result<(), NnError> {
    config.validate()?;
    let layout = ParamLayout::new(config);
    let header = Header {
        format: FORMAT_TAG.to_string(),
        version: FORMAT_VERSION,
        config: config.clone(),
        vocab: vocab.tokens().to_vec(),
        tensors: layout
            .tensors
            .iter()
            .map(|t| TensorMeta {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let flat = params.to_flat();
    debug_assert_eq!(flat.len(), layout.total);

    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    file.write_all(&header_bytes).map_err(|e| io_err(path, e))?;
    let mut data = Vec::with_capacity(flat.len() * 8);
    for v in &flat {
        data.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&data).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Read a checkpoint file, validating shapes against its config.
pub fn load_checkpoint(path: &Path) -> Result<Model, NnError> {
    let mut file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes).map_err(|e| io_err(path, e))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|e| io_err(path, e))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| NnError::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT_TAG {
        return Err(NnError::Checkpoint(format!(
            "unexpected format tag {:?}",
            header.format
        )));
    }
    if header.version != FORMAT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported version {}",
            header.version
        )));
    }
    header.config.validate()?;
    if header.vocab.len() != header.config.vocab {
        return Err(NnError::Checkpoint(format!(
            "vocab list of {} entries does not match config vocab {}",
            header.vocab.len(),
            header.config.vocab
        )));
    }
    let layout = ParamLayout::new(&header.config);
    if header.tensors.len() != layout.tensors.len() {
        return Err(NnError::Checkpoint(format!(
            "expected {} tensors, found {}",
            layout.tensors.len(),
            header.tensors.len()
        )));
    }
    for (meta, spec) in header.tensors.iter().zip(&layout.tensors) {
        if meta.name != spec.name || meta.shape != spec.shape {
            return Err(NnError::Checkpoint(format!(
                "tensor {}:{:?} does not match expected {}:{:?}",
                meta.name, meta.shape, spec.name, spec.shape
            )));
        }
    }

    let mut data = Vec::new();
    file.read_to_end(&mut data).map_err(|e| io_err(path, e))?;
    if data.len() != layout.total * 8 {
        return Err(NnError::Checkpoint(format!(
            "expected {} bytes of tensor data, found {}",
            layout.total * 8,
            data.len()
        )));
    }
    let flat: Vec<f64> = data
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    let mut params = ModelParams::zeros(&header.config);
    params.copy_from_flat(&flat);
    Ok(Model {
        vocab: Vocab::from_tokens(header.vocab),
        config: header.config,
        params,
    })
}
