//! Dense NCHW tensors with a reverse-mode differentiation tape.
//!
//! The engine is deliberately small: it provides exactly the operations the
//! segmentation network needs (2D convolution and its transpose, 2x2 max
//! pooling, elementwise arithmetic with restricted broadcasting, channel
//! concatenation, channel/spatial reductions) plus an adaptive-moment
//! optimizer and a finite-difference gradient checker.
//!
//! Tensors are generic over the element type: `f32` for training, `f64` for
//! gradient verification.

mod gradcheck;
mod kernels;
mod params;
mod tape;

pub use gradcheck::{grad_check, op_gradient_suite};
pub use params::{OptimizerKind, ParamSet};
pub use tape::{Axis, ReduceKind, Tape, TensorId};

use crate::error::{Error, Result};
use std::fmt;

/// Element type of tensors. `f64` is used in verification mode, `f32` in
/// training mode.
pub trait Scalar:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn max(self, other: Self) -> Self {
        if self > other {
            self
        } else {
            other
        }
    }
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// NCHW shape. Lower-rank quantities use trailing/leading singleton axes:
/// a scalar is `(1,1,1,1)`, a per-channel bias is `(1,C,1,1)`, a conv weight
/// reuses the four slots as `(OC,IC,KH,KW)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        let s = Shape { n, c, h, w };
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::EmptyDimension {
                shape: s.to_string(),
            });
        }
        Ok(s)
    }

    pub fn scalar() -> Self {
        Shape {
            n: 1,
            c: 1,
            h: 1,
            w: 1,
        }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat offset of the `(n, c)` plane.
    pub fn plane(&self, n: usize, c: usize) -> usize {
        (n * self.c + c) * self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// A plain tensor value. Gradients are populated by [`Tape::backward`] for
/// tape leaves and copied back into parameter tensors by
/// [`Tape::grads_into`].
#[derive(Debug, Clone)]
pub struct Tensor<T: Scalar> {
    pub shape: Shape,
    pub data: Vec<T>,
    pub grad: Option<Vec<T>>,
    pub requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                dim: "numel",
                expected: shape.numel(),
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::ZERO; shape.numel()],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor::filled(Shape::scalar(), value)
    }

    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Accumulates `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        debug_assert_eq!(g.len(), self.numel());
        let grad = self
            .grad
            .get_or_insert_with(|| vec![T::ZERO; self.shape.numel()]);
        for (a, b) in grad.iter_mut().zip(g) {
            *a += *b;
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Lossless element conversion, used to move between verification (f64)
    /// and training (f32) precision in tests.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }
}
