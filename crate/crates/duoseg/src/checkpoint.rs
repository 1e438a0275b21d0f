//! Checkpoint files: one JSON header line describing dims, seed, step and a
//! named tensor index, followed by raw little-endian f64 arrays in index
//! order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nets::ModelDims;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dims: ModelDims,
    pub seed: u64,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensors
            .get(name)
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing tensor {name}")))
    }

    pub fn take_tensor(&mut self, name: &str) -> Result<Tensor, CheckpointError> {
        self.tensors
            .remove(name)
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing tensor {name}")))
    }

    pub fn names(&self) -> Vec<&str> {
        self.tensors.keys().map(|s| s.as_str()).collect()
    }
}

/// Writes the header line and every tensor's raw values in index order.
pub fn save(
    path: &Path,
    dims: &ModelDims,
    seed: u64,
    step: u64,
    tensors: &[(String, &Tensor)],
) -> Result<(), CheckpointError> {
    let header = CheckpointHeader {
        dims: dims.clone(),
        seed,
        step,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for (_, tensor) in tensors {
        for v in tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a checkpoint back; every tensor arrives gradient-free, callers
/// reattach grad flags where they want them.
pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut header_line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = reader.read(&mut byte)?;
        if n == 0 {
            return Err(CheckpointError::Corrupt("missing header line".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        header_line.push(byte[0]);
    }
    let header: CheckpointHeader = serde_json::from_slice(&header_line)?;

    let mut tensors = HashMap::new();
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; numel * 8];
        reader.read_exact(&mut buf).map_err(|e| {
            CheckpointError::Corrupt(format!("payload for {} truncated: {e}", entry.name))
        })?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk is 8 bytes")))
            .collect();
        let tensor = Tensor::from_vec(entry.shape.clone(), data)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        tensors.insert(entry.name.clone(), tensor);
    }
    let mut trailing = Vec::new();
    reader.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(CheckpointError::Corrupt(format!(
            "{} unexpected trailing bytes",
            trailing.len()
        )));
    }
    Ok(Checkpoint { header, tensors })
}
