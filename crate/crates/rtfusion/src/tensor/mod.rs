//! Rank-4 tensor values and the differentiable primitives the network is
//! composed from.
//!
//! Every value is a dense `(batch, channels, height, width)` array stored
//! row-major with the width axis fastest. Primitives record a reverse-mode
//! graph; [`Tensor::backward`] replays it to produce a [`Gradients`] table
//! holding one accumulated gradient per tracked tensor. Matrices are
//! represented as `(1, 1, rows, cols)` and token sequences as
//! `(batch, 1, tokens, features)`.
//!
//! Storage and compute are generic over [`Scalar`]: `f32` for training,
//! `f64` for the finite-difference gradient checks.

mod autodiff;
mod conv;
mod interp;
mod matmul;
mod norm;
mod ops;

pub mod gradcheck;

pub use autodiff::Gradients;

use crate::error::{Error, Result};
use std::fmt;
use std::sync::Arc;

pub(crate) use autodiff::{BackwardOp, Node};

/// Element type of tensor storage: `f32` or `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + std::iter::Sum
    + 'static
{
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = alpha * a @ b + beta * c` over row/column strides, dispatching to
    /// the packed kernels in `matrixmultiply`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

/// `(batch, channels, height, width)` dimensions of a [`Tensor`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    /// Matrix layout: `(1, 1, rows, cols)`.
    pub const fn matrix(rows: usize, cols: usize) -> Self {
        Shape::new(1, 1, rows, cols)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// Row-major strides, width fastest.
    pub(crate) fn strides(&self) -> [usize; 4] {
        [self.c * self.h * self.w, self.h * self.w, self.w, 1]
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 value, cheap to clone (shared storage). Immutable once
/// created; gradients are accumulated outside the tensor in [`Gradients`].
#[derive(Clone)]
pub struct Tensor<E: Scalar = f32> {
    data: Arc<Vec<E>>,
    shape: Shape,
    node: Option<Arc<Node<E>>>,
}

impl<E: Scalar> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.is_tracked())
            .finish()
    }
}

impl<E: Scalar> Tensor<E> {
    /// Untracked constant from raw data. Length must equal `shape.numel()`.
    pub fn from_vec(shape: Shape, data: Vec<E>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "from_vec",
                format!("data length {} != shape {} numel {}", data.len(), shape, shape.numel()),
            ));
        }
        Ok(Tensor {
            data: Arc::new(data),
            shape,
            node: None,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            data: Arc::new(vec![E::zero(); shape.numel()]),
            shape,
            node: None,
        }
    }

    pub fn full(shape: Shape, value: E) -> Self {
        Tensor {
            data: Arc::new(vec![value; shape.numel()]),
            shape,
            node: None,
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor::full(Shape::scalar(), value)
    }

    /// Tracked leaf (a trainable parameter or a gradcheck input): backward
    /// will populate a gradient for it.
    pub fn var(shape: Shape, data: Vec<E>) -> Result<Self> {
        let mut t = Tensor::from_vec(shape, data)?;
        t.node = Some(Arc::new(Node::leaf(shape)));
        Ok(t)
    }

    /// Re-tag an existing tensor as a tracked leaf (fresh gradient slot).
    pub fn tracked(&self) -> Self {
        Tensor {
            data: Arc::clone(&self.data),
            shape: self.shape,
            node: Some(Arc::new(Node::leaf(self.shape))),
        }
    }

    /// Drop the graph edge: same data, no gradient flow.
    pub fn detached(&self) -> Self {
        Tensor {
            data: Arc::clone(&self.data),
            shape: self.shape,
            node: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.data.to_vec()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> E {
        self.data[self.shape.index(n, c, h, w)]
    }

    /// Whether this tensor participates in the gradient graph.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "item",
                format!("expected scalar, got shape {}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn node(&self) -> Option<&Arc<Node<E>>> {
        self.node.as_ref()
    }

    /// Stable identifier of the graph node, when tracked.
    pub(crate) fn node_id(&self) -> Option<u64> {
        self.node.as_ref().map(|n| n.id())
    }

    /// Build an op result: the output is tracked iff any parent is tracked.
    /// `op.backward` must return per-parent gradients in the same order as
    /// `parents`.
    pub(crate) fn from_op(
        shape: Shape,
        data: Vec<E>,
        parents: &[&Tensor<E>],
        op: impl BackwardOp<E> + 'static,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.numel(), "op output length mismatch");
        let tracked = parents.iter().any(|p| p.node.is_some());
        let node = tracked.then(|| {
            let parent_nodes = parents.iter().map(|p| p.node.clone()).collect();
            Arc::new(Node::interior(shape, parent_nodes, Box::new(op)))
        });
        Tensor {
            data: Arc::new(data),
            shape,
            node,
        }
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<E>> {
        Arc::clone(&self.data)
    }
}
