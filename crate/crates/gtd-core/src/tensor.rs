//! Dense row-major tensors of 64-bit floats.
//!
//! Everything in this crate computes in `f64`: the models are small enough
//! that speed is not a concern, and the gradient checks need the headroom.
//! A [`Tensor`] is a flat buffer plus its extents; all indexing helpers are
//! row-major (last dimension contiguous).

use thiserror::Error;

/// Errors raised by tensor construction and the differentiable operators.
#[derive(Debug, Error)]
pub enum NumericsError {
    /// Operands do not have the extents an operator requires.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    /// An operator produced NaN or an infinity. Non-finite values are never
    /// allowed to flow silently through the graph.
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    /// A scalar argument is outside its documented domain.
    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

/// Dense tensor: `dims` extents over a row-major `data` buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// All-zero tensor with the given extents.
    pub fn zeros(dims: &[usize]) -> Tensor {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; len],
        }
    }

    /// Tensor filled with a constant.
    pub fn filled(dims: &[usize], value: f64) -> Tensor {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; len],
        }
    }

    /// Wraps an existing buffer. The buffer length must match the extents.
    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Tensor, NumericsError> {
        let expect: usize = dims.iter().product();
        if data.len() != expect {
            return Err(NumericsError::ShapeMismatch {
                op: "from_vec",
                detail: format!("dims {:?} need {} values, got {}", dims, expect, data.len()),
            });
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Tensor {
        let len: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self) -> Result<f64, NumericsError> {
        if self.data.len() != 1 {
            return Err(NumericsError::ShapeMismatch {
                op: "scalar",
                detail: format!("expected one element, dims are {:?}", self.dims),
            });
        }
        Ok(self.data[0])
    }

    /// Row `r` of a 2-d tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.dims.len(), 2);
        let cols = self.dims[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Element of a 2-d tensor.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.dims.len(), 2);
        self.data[r * self.dims[1] + c]
    }

    /// Mutable element of a 2-d tensor.
    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        debug_assert_eq!(self.dims.len(), 2);
        let cols = self.dims[1];
        self.data[r * cols + c] = v;
    }

    /// Transpose of a 2-d tensor (copies).
    pub fn transposed(&self) -> Tensor {
        assert_eq!(self.dims.len(), 2, "transpose needs a 2-d tensor");
        let (r, c) = (self.dims[0], self.dims[1]);
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    /// Errors unless every value is finite.
    pub fn check_finite(&self, op: &'static str) -> Result<(), NumericsError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(NumericsError::NonFinite { op })
        }
    }

    /// Largest absolute difference to another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff needs equal shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
