//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A deliberately small engine: exactly the operations a 2-layer GRU
//! encoder-decoder with attention needs, recorded on a [`Tape`] and replayed
//! backwards. Values are `f32` in training; everything is generic over
//! [`Scalar`] so gradient checks can run the same graphs in `f64`.

pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod tape;

pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use tape::{NodeId, Tape};

use crate::error::{Error, Result};
use crate::rng::RngState;

/// Element type of tensors: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Copy
    + PartialOrd
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;

    /// General matrix multiply `C = alpha*A*B + beta*C` with explicit strides,
    /// forwarded to the BLAS-style kernel for this element type.
    ///
    /// # Safety
    /// Pointers must cover the strided extents implied by `m`, `k`, `n`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn tanh(self) -> Self {
        self.tanh()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn tanh(self) -> Self {
        self.tanh()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense n-dimensional value array with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::ZERO; len],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn scalar(v: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    /// Uniform init in `[lo, hi)`; draws are f64 so the stream is the same
    /// whatever the element type.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut RngState) -> Self {
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| F::from_f64(rng.uniform_range(lo, hi)))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated on first use with the tensor's shape.
    pub fn grad_mut(&mut self) -> &mut [F] {
        if self.grad.is_none() {
            self.grad = Some(vec![F::ZERO; self.data.len()]);
        }
        self.grad.as_deref_mut().unwrap()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_deref_mut() {
            g.iter_mut().for_each(|x| *x = F::ZERO);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Mutable values together with a read view of the gradient, for in-place
    /// updates. Returns `None` for the gradient when it was never populated.
    pub fn data_and_grad(&mut self) -> (&mut [F], Option<&[F]>) {
        (&mut self.data, self.grad.as_deref())
    }

    /// True when every value (and gradient, if present) is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self
                .grad
                .as_deref()
                .map_or(true, |g| g.iter().all(|v| v.is_finite()))
    }
}

/// Named trainable tensor; the unit the optimizer and checkpoints work with.
#[derive(Debug, Clone)]
pub struct Parameter<F: Scalar = f32> {
    pub name: String,
    pub tensor: Tensor<F>,
}

impl<F: Scalar> Parameter<F> {
    pub fn new(name: impl Into<String>, tensor: Tensor<F>) -> Self {
        Self {
            name: name.into(),
            tensor: tensor.with_requires_grad(),
        }
    }
}
