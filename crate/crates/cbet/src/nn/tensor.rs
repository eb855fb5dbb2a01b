//! Dense row-major tensors.

use super::scalar::Scalar;
use super::NnError;

/// A dense tensor: row-major values plus an extent per axis. A rank-0 tensor
/// (empty shape) holds exactly one value and stands in for a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor, checking that `data` fills the shape exactly.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, NnError> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(NnError::Shape {
                op: "tensor::new",
                context: format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// The single value of a rank-0 or one-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-type conversion (used to run the same model at a different
    /// precision).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }

    /// Last-axis extent; rank-0 tensors have none.
    pub fn last_dim(&self) -> Option<usize> {
        self.shape.last().copied()
    }
}
