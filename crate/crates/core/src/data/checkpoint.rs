//! Binary checkpoint container.
//!
//! Layout: the magic line, a little-endian `u64` manifest length, the
//! manifest as JSON, then every parameter as little-endian `f64` in
//! manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Standardization;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8] = b"MULTIRATE-CHECKPOINT\n";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub standardization: Option<Standardization>,
    /// Original column index of each model feature.
    pub feature_order: Option<Vec<usize>>,
    pub train_seed: u64,
    pub epochs: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    payload_values: usize,
    standardization: Option<Standardization>,
    feature_order: Option<Vec<usize>>,
    train_seed: u64,
    epochs: usize,
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, mut out: W) -> Result<()> {
    let named = ckpt.model.params.named_tensors();
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        config: ckpt.model.config.clone(),
        tensors: named
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        payload_values: named.iter().map(|(_, t)| t.len()).sum(),
        standardization: ckpt.standardization.clone(),
        feature_order: ckpt.feature_order.clone(),
        train_seed: ckpt.train_seed,
        epochs: ckpt.epochs,
    };
    let json =
        serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(format!("encoding manifest: {e}")))?;
    let mut buf = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 8 * manifest.payload_values);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in &named {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)
        .map_err(|e| Error::Checkpoint(format!("writing checkpoint: {e}")))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("reading checkpoint: {e}")))?;
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::Checkpoint("not a checkpoint file (bad magic)".into()))?;
    if rest.len() < 8 {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let (len_bytes, rest) = rest.split_at(8);
    let json_len = u64::from_le_bytes(len_bytes.try_into().expect("eight bytes")) as usize;
    if rest.len() < json_len {
        return Err(Error::Checkpoint("truncated manifest".into()));
    }
    let (json, payload) = rest.split_at(json_len);
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("corrupt manifest: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    let declared: usize = manifest
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if declared != manifest.payload_values {
        return Err(Error::Checkpoint(format!(
            "manifest shapes hold {declared} values but the payload is declared as {}",
            manifest.payload_values
        )));
    }
    if payload.len() != 8 * manifest.payload_values {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes, manifest requires {}",
            payload.len(),
            8 * manifest.payload_values
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")));
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in manifest.tensors {
        let len = entry.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(len).collect();
        tensors.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    manifest.config.validate()?;
    let params = ModelParams::from_named(&manifest.config, tensors)?;
    Ok(Checkpoint {
        model: Model::new(manifest.config, params)?,
        standardization: manifest.standardization,
        feature_order: manifest.feature_order,
        train_seed: manifest.train_seed,
        epochs: manifest.epochs,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(ckpt, std::io::BufWriter::new(file))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}
