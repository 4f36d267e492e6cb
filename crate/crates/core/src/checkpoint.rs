//! Self-describing model archive.
//!
//! Layout: the magic bytes `ASLSTMCK`, a little-endian `u64` header length,
//! a JSON header (config, vocabulary, labels, precision, tensor table), then
//! every tensor's values as raw little-endian floats in table order.

use std::fs;
use std::io::Write;
use std::path::Path;

use aslstm_tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::embed::Vocab;
use crate::error::{Error, Result};
use crate::model::Model;

const MAGIC: &[u8; 8] = b"ASLSTMCK";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocab,
    labels: Vec<String>,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

fn width<F: Scalar>() -> usize {
    std::mem::size_of::<F>()
}

pub fn to_bytes<F: Scalar>(model: &Model<F>) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        labels: model.labels.clone(),
        dtype: F::NAME.to_string(),
        tensors: model
            .store
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + model.store.numel() * width::<F>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.store.iter() {
        for &x in p.value.data() {
            match width::<F>() {
                4 => out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes()),
                _ => out.extend_from_slice(&x.as_f64().to_le_bytes()),
            }
        }
    }
    Ok(out)
}

pub fn from_bytes<F: Scalar>(bytes: &[u8]) -> Result<Model<F>> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if header.dtype != F::NAME {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} values, requested {}",
            header.dtype,
            F::NAME
        )));
    }
    // parameter shapes follow from the config; init values are overwritten
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::<F>::new(header.config, header.vocab, header.labels, &mut rng)?;
    if model.store.len() != header.tensors.len() {
        return Err(bad("tensor count does not match the configuration"));
    }
    let mut pos = 16 + len;
    let w = width::<F>();
    let mut values = Vec::with_capacity(header.tensors.len());
    for (entry, p) in header.tensors.iter().zip(model.store.iter()) {
        if entry.name != p.name || entry.shape != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                entry.name,
                entry.shape,
                p.name,
                p.value.shape()
            )));
        }
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(pos..pos + n * w)
            .ok_or_else(|| bad("truncated tensor data"))?;
        pos += n * w;
        let data: Vec<F> = raw
            .chunks_exact(w)
            .map(|c| match w {
                4 => F::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64),
                _ => F::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())),
            })
            .collect();
        values.push(Tensor::new(entry.shape.clone(), data)?);
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    model.store.restore(values);
    let flags: Vec<(usize, bool)> = header
        .tensors
        .iter()
        .map(|t| t.trainable)
        .enumerate()
        .collect();
    for (i, trainable) in flags {
        let id = model
            .store
            .id(&header.tensors[i].name)
            .expect("name checked above");
        model.store.set_trainable(id, trainable);
    }
    Ok(model)
}

pub fn save<F: Scalar>(model: &Model<F>, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load<F: Scalar>(path: &Path) -> Result<Model<F>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Precision recorded in a checkpoint file, without loading the tensors.
pub fn stored_precision(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(header.dtype)
}
