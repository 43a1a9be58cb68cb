use serde::{Deserialize, Serialize};

use super::{DiffError, Result, Tape, Var};
use crate::matrix::Matrix;

/// A named `rows x cols` block of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlice {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamSlice {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter storage with named matrix views. The total length always
/// equals the sum of the slice sizes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    slices: Vec<ParamSlice>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuild from a layout and matching values.
    pub fn from_parts(slices: Vec<ParamSlice>, values: Vec<f64>) -> Result<Self> {
        let mut expected = 0;
        for s in &slices {
            if s.offset != expected {
                return Err(DiffError::Checkpoint(format!(
                    "slice {:?} is not contiguous",
                    s.name
                )));
            }
            expected += s.len();
        }
        if expected != values.len() {
            return Err(DiffError::Length(expected, values.len()));
        }
        Ok(Self { values, slices })
    }

    /// Append a zero-initialized block.
    pub fn add(&mut self, name: &str, rows: usize, cols: usize) -> Result<&ParamSlice> {
        if self.slices.iter().any(|s| s.name == name) {
            return Err(DiffError::DuplicateSlice(name.to_string()));
        }
        let offset = self.values.len();
        self.values.resize(offset + rows * cols, 0.0);
        self.slices.push(ParamSlice {
            name: name.to_string(),
            rows,
            cols,
            offset,
        });
        Ok(self.slices.last().expect("just pushed"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn set_values(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(DiffError::Length(self.values.len(), values.len()));
        }
        self.values = values;
        Ok(())
    }

    pub fn slices(&self) -> &[ParamSlice] {
        &self.slices
    }

    pub fn slice(&self, name: &str) -> Result<&ParamSlice> {
        self.slices
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| DiffError::UnknownSlice(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        let s = self.slice(name)?;
        Ok(&self.values[s.range()])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let r = self.slice(name)?.range();
        Ok(&mut self.values[r])
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let s = self.slice(name)?;
        Ok(Matrix::from_vec(
            s.rows,
            s.cols,
            self.values[s.range()].to_vec(),
        ))
    }

    /// Record the named block as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let s = self.slice(name)?;
        tape.param(self.matrix(name)?, s.offset)
    }

    /// FNV-1a over the bit patterns of all values.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in &self.values {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}
