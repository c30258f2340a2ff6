//! Reverse-mode autodiff substrate.
//!
//! Tensors are immutable flat buffers of `f64` plus a shape. Numeric mode is
//! carried per tensor: in [`DType::F32`] mode every operation result (and
//! every gradient contribution) is quantized to `f32` precision, so training
//! behaves like a 32-bit implementation while gradient checks can run the
//! identical code path in full 64-bit. Differentiable operations record a
//! node on a [`tape::Tape`]; [`tape::backward`] replays the tape in reverse
//! and accumulates vector-Jacobian products per node.

pub mod gradcheck;
pub mod ops;
pub mod tape;

use std::fmt;
use std::rc::Rc;

use tape::NodeRef;

/// Numeric mode. `F32` quantizes every stored value to `f32` precision
/// (storage stays `f64`); `F64` keeps full double precision.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    #[inline]
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }

    pub fn quantize_slice(self, vs: &mut [f64]) {
        if self == DType::F32 {
            for v in vs.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => write!(f, "f32"),
            DType::F64 => write!(f, "f64"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("operands recorded on different tapes")]
    TapeMismatch,
    #[error("operands have different numeric modes: {0} vs {1}")]
    DTypeMismatch(DType, DType),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("backward requires a scalar tensor recorded on a tape")]
    BackwardRoot,
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Shape(msg.into()))
}

/// Immutable n-dimensional array. Cloning is cheap (shared buffer).
#[derive(Clone)]
pub struct Tensor {
    shape: Rc<Vec<usize>>,
    data: Rc<Vec<f64>>,
    dtype: DType,
    node: Option<NodeRef>,
}

impl Tensor {
    /// Builds a tensor from a flat row-major buffer, quantizing per `dtype`.
    pub fn new(mut data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return shape_err(format!(
                "buffer of {} values does not fill shape {:?}",
                data.len(),
                shape
            ));
        }
        dtype.quantize_slice(&mut data);
        Ok(Tensor {
            shape: Rc::new(shape.to_vec()),
            data: Rc::new(data),
            dtype,
            node: None,
        })
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: Rc::new(shape.to_vec()),
            data: Rc::new(vec![0.0; numel]),
            dtype,
            node: None,
        }
    }

    pub fn full(shape: &[usize], value: f64, dtype: DType) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: Rc::new(shape.to_vec()),
            data: Rc::new(vec![dtype.quantize(value); numel]),
            dtype,
            node: None,
        }
    }

    pub fn scalar(value: f64, dtype: DType) -> Tensor {
        Tensor::full(&[], value, dtype)
    }

    pub fn from_fn(shape: &[usize], dtype: DType, f: impl FnMut(usize) -> f64) -> Tensor {
        let numel: usize = shape.iter().product();
        let mut data: Vec<f64> = (0..numel).map(f).collect();
        dtype.quantize_slice(&mut data);
        Tensor {
            shape: Rc::new(shape.to_vec()),
            data: Rc::new(data),
            dtype,
            node: None,
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// True when this tensor participates in gradient flow.
    #[inline]
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, detached from any tape.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: Rc::clone(&self.shape),
            data: Rc::clone(&self.data),
            dtype: self.dtype,
            node: None,
        }
    }

    /// Re-quantizes the values into another numeric mode (detached).
    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        let mut data = self.data.as_ref().clone();
        dtype.quantize_slice(&mut data);
        Tensor {
            shape: Rc::clone(&self.shape),
            data: Rc::new(data),
            dtype,
            node: None,
        }
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return shape_err(format!("item() on shape {:?}", self.shape()));
        }
        Ok(self.data[0])
    }

    pub(crate) fn node(&self) -> Option<&NodeRef> {
        self.node.as_ref()
    }

    pub(crate) fn with_node(mut self, node: NodeRef) -> Tensor {
        self.node = Some(node);
        self
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.data)
    }

    pub(crate) fn shape_vec(&self) -> Vec<usize> {
        self.shape.as_ref().clone()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, dtype={}, grad={}",
            self.shape(),
            self.dtype,
            self.requires_grad()
        )?;
        if self.numel() <= 8 {
            write!(f, ", data={:?})", self.data())
        } else {
            write!(f, ", data=[{} values])", self.numel())
        }
    }
}
