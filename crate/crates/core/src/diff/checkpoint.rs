//! Checkpoint file: one line of JSON header, then the flat parameter array
//! as little-endian `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DiffError, ParamSlice, ParamVector, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub layers: Vec<ParamSlice>,
    pub seed: u64,
    pub step: u64,
    pub n_params: usize,
    /// Free-form description of the model the parameters belong to.
    #[serde(default)]
    pub model: serde_json::Value,
}

pub fn write_checkpoint(
    path: impl AsRef<Path>,
    params: &ParamVector,
    seed: u64,
    step: u64,
    model: serde_json::Value,
) -> Result<()> {
    let header = CheckpointHeader {
        layers: params.slices().to_vec(),
        seed,
        step,
        n_params: params.len(),
        model,
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    for v in params.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointHeader, ParamVector)> {
    let bytes = fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| DiffError::Checkpoint("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
    let body = &bytes[nl + 1..];
    if body.len() != header.n_params * 8 {
        return Err(DiffError::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            header.n_params * 8,
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let params = ParamVector::from_parts(header.layers.clone(), values)?;
    Ok((header, params))
}
