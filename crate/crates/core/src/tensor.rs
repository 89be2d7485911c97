use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::dtype::DType;
use crate::{Error, Result};

/// Named tensors in lexicographic name order.
pub type TensorMap = BTreeMap<String, Tensor>;

/// A shaped tensor holding its little-endian element bytes in row-major order.
///
/// Keeping the stored bytes (rather than decoded values) makes archive
/// round trips bit-exact for every dtype, NaN payloads included.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_bytes(dtype: DType, shape: Vec<usize>, bytes: Vec<u8>) -> Result<Self> {
        let expected = numel(&shape) * dtype.width();
        if bytes.len() != expected {
            return Err(Error::DataLength {
                expected,
                found: bytes.len(),
            });
        }
        Ok(Tensor {
            dtype,
            shape,
            bytes,
        })
    }

    /// Narrows `values` into `dtype` with round-to-nearest-even.
    pub fn from_f64(dtype: DType, shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        let n = numel(&shape);
        if values.len() != n {
            return Err(Error::DataLength {
                expected: n,
                found: values.len(),
            });
        }
        let w = dtype.width();
        let mut bytes = vec![0u8; n * w];
        for (chunk, &v) in bytes.chunks_exact_mut(w).zip(values) {
            dtype.encode(v, chunk);
        }
        Ok(Tensor {
            dtype,
            shape,
            bytes,
        })
    }

    pub fn zeros(dtype: DType, shape: Vec<usize>) -> Self {
        let len = numel(&shape) * dtype.width();
        Tensor {
            dtype,
            shape,
            bytes: vec![0u8; len],
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Lossless widening of every element.
    pub fn to_f64(&self) -> Vec<f64> {
        self.bytes
            .chunks_exact(self.dtype.width())
            .map(|c| self.dtype.decode(c))
            .collect()
    }

    pub fn get(&self, index: usize) -> f64 {
        let w = self.dtype.width();
        self.dtype.decode(&self.bytes[index * w..(index + 1) * w])
    }
}

/// Checks that both maps hold the same names with the same shapes.
pub fn check_paired(inst: &TensorMap, think: &TensorMap) -> Result<()> {
    for (name, t) in inst {
        let other = think.get(name).ok_or_else(|| Error::MissingTensor {
            name: name.clone(),
            side: "thinking",
        })?;
        if other.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected: t.shape().to_vec(),
                found: other.shape().to_vec(),
            });
        }
    }
    if let Some(name) = think.keys().find(|k| !inst.contains_key(*k)) {
        return Err(Error::MissingTensor {
            name: name.clone(),
            side: "instruct",
        });
    }
    Ok(())
}
