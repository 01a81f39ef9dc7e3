//! Single-file model checkpoints.
//!
//! Layout:
//!
//! ```text
//! b"PETCKPT1"                  8-byte magic
//! header_len: u64 LE           byte length of the JSON header
//! header: JSON                 {"config": ModelConfig, "tensors": [{name, shape, offset, trainable}]}
//! data: f64 LE ...             every tensor's values in row-major order;
//!                              `offset` is the byte position within this section
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::petformer::Petformer;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PETCKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    trainable: bool,
}

pub fn write_checkpoint<W: Write>(model: &Petformer, mut out: W) -> Result<()> {
    let mut offset = 0u64;
    let tensors = model
        .params()
        .entries()
        .iter()
        .map(|e| {
            let rec = TensorRecord {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                offset,
                trainable: e.trainable,
            };
            offset += 8 * e.value.numel() as u64;
            rec
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        config: model.config().clone(),
        tensors,
    })?;
    let io = |e| Error::io("<checkpoint>", e);
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    out.write_all(&header).map_err(io)?;
    for e in model.params().entries() {
        for v in e.value.data() {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Petformer> {
    let corrupt = |what: &str| Error::Data(format!("corrupt checkpoint: {what}"));
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| corrupt("truncated magic"))?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut len = [0u8; 8];
    input
        .read_exact(&mut len)
        .map_err(|_| corrupt("truncated header length"))?;
    let len = u64::from_le_bytes(len);
    if len > (1 << 30) {
        return Err(corrupt("implausible header length"));
    }
    let mut header = vec![0u8; len as usize];
    input.read_exact(&mut header).map_err(|_| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(&header)?;
    let mut data = Vec::new();
    input.read_to_end(&mut data).map_err(|e| Error::io("<checkpoint>", e))?;

    let mut model = Petformer::new(header.config, 0)?;
    let store = model.params_mut();
    if store.len() != header.tensors.len() {
        return Err(corrupt(&format!(
            "{} tensors recorded but the configuration defines {}",
            header.tensors.len(),
            store.len()
        )));
    }
    for (entry, rec) in store.entries_mut().iter_mut().zip(&header.tensors) {
        if entry.name != rec.name || entry.value.shape() != rec.shape.as_slice() {
            return Err(corrupt(&format!(
                "tensor `{}` {:?} where `{}` {:?} was expected",
                rec.name,
                rec.shape,
                entry.name,
                entry.value.shape()
            )));
        }
        let start = rec.offset as usize;
        let end = start + 8 * entry.value.numel();
        let bytes = data
            .get(start..end)
            .ok_or_else(|| corrupt(&format!("data for `{}` out of range", rec.name)))?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        entry.value = Tensor::new(&rec.shape, values)?;
        entry.trainable = rec.trainable;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Petformer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(model, BufWriter::new(file)).map_err(|e| relabel(e, path))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Petformer> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file)).map_err(|e| relabel(e, path))
}

fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    }
}
