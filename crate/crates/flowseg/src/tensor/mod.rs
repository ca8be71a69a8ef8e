//! Minimal f32 tensor core with reverse-mode autodiff.
//!
//! Tensors are immutable row-major buffers behind an `Arc`; cloning is
//! cheap and sharing across threads is safe. Differentiable computation
//! goes through a [`Tape`](tape::Tape): ops append nodes, `backward` walks
//! them once in reverse order, and gradients accumulate additively. A tape
//! is single-threaded and one-shot; run independent volumes on independent
//! tapes for parallelism.
//!
//! Shapes follow a channels-first convention for volumetric data:
//! `[C, A, B, G]` with the last axis contiguous.

mod adam;
mod kernels;
mod tape;

pub use adam::{ParamSet, Parameter};
pub use kernels::bilinear_upsample_2d;
pub use tape::{Gradients, Op, Tape, Var, REGISTERED_OPS};

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value in output of node {node}")]
    NonFinite { op: &'static str, node: usize },

    #[error("{op}: non-finite gradient flowing out of node {node}")]
    NonFiniteGrad { op: &'static str, node: usize },

    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("no gradient recorded for {0}")]
    MissingGradient(String),

    #[error("{0}")]
    Invalid(String),
}

pub type TensorResult<T> = std::result::Result<T, TensorError>;

/// Immutable f32 tensor, row-major, shape product == data length.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> TensorResult<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape {
                op: "from_vec",
                detail: format!("shape {:?} wants {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data: Arc::new(data), requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![0.0; numel]), requires_grad: false }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![value; numel]), requires_grad: false }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![value]), requires_grad: false }
    }

    /// Normal samples with the given standard deviation, drawn in index
    /// order.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f32, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| rng.sample::<f32, _>(StandardNormal) * std)
            .collect();
        Tensor { shape, data: Arc::new(data), requires_grad: false }
    }

    /// Uniform samples in `[lo, hi)`, drawn in index order.
    pub fn rand_uniform<R: Rng>(shape: Vec<usize>, lo: f32, hi: f32, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape, data: Arc::new(data), requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality; the check used by determinism tests.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> TensorResult<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        Ok(Tensor { shape, data: Arc::clone(&self.data), requires_grad: self.requires_grad })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data), requires_grad: false }
    }

    /// `self + alpha * other`, untraced. Shapes must match.
    pub fn axpy(&self, alpha: f32, other: &Tensor) -> TensorResult<Tensor> {
        self.zip_with(other, "axpy", |a, b| a + alpha * b)
    }

    /// `|self - other|`, untraced. Shapes must match.
    pub fn abs_diff(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.zip_with(other, "abs_diff", |a, b| (a - b).abs())
    }

    fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f32, f32) -> f32,
    ) -> TensorResult<Tensor> {
        if self.shape != other.shape {
            return Err(TensorError::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data: Arc::new(data), requires_grad: false })
    }

    pub fn l2_norm(&self) -> f32 {
        self.data.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt() as f32
    }

    pub fn mean_value(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        (self.data.iter().map(|v| *v as f64).sum::<f64>() / self.data.len() as f64) as f32
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}
