//! Dense tensors: flat row-major f64 storage plus shape metadata.

use crate::error::{MoceError, Result};

/// Dense n-dimensional array of f64 with optional gradient storage.
///
/// `data` is row-major (last axis fastest). Feature maps use `[H, W, C]`
/// throughout the crate, so per-position channel vectors are contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel_of(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel_of(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Build from flat data; errors if `product(shape) != data.len()`.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(MoceError::Contract(format!(
                "tensor shape {:?} does not match data length {}",
                shape,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = numel_of(shape);
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.data.len(), "grad must match tensor shape");
        }
        self.grad = grad;
    }

    /// Flat index for a `[H, W, C]` tensor.
    pub fn idx3(&self, y: usize, x: usize, c: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (y * self.shape[1] + x) * self.shape[2] + c
    }

    pub fn at3(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.idx3(y, x, c)]
    }
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Complex field with separate real/imaginary planes; same row-major layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    pub shape: Vec<usize>,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = numel_of(shape);
        ComplexTensor {
            shape: shape.to_vec(),
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    pub fn from_real(shape: &[usize], re: Vec<f64>) -> Result<Self> {
        if numel_of(shape) != re.len() {
            return Err(MoceError::Contract(format!(
                "complex tensor shape {:?} does not match data length {}",
                shape,
                re.len()
            )));
        }
        let n = re.len();
        Ok(ComplexTensor {
            shape: shape.to_vec(),
            re,
            im: vec![0.0; n],
        })
    }

    pub fn numel(&self) -> usize {
        self.re.len()
    }
}
