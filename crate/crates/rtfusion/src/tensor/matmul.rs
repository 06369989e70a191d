//! Batched matrix product over the last two axes.

use super::{BackwardOp, Scalar, Shape, Tensor};
use crate::error::{Error, Result};
use std::sync::Arc;

fn transpose_data<E: Scalar>(data: &[E], shape: Shape) -> Vec<E> {
    let [n, c, h, w] = shape.dims();
    let mut out = vec![E::zero(); shape.numel()];
    for b in 0..n * c {
        let src = &data[b * h * w..(b + 1) * h * w];
        let dst = &mut out[b * h * w..(b + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[x * h + y] = src[y * w + x];
            }
        }
    }
    out
}

struct TransposeBack {
    out: Shape,
}

impl<E: Scalar> BackwardOp<E> for TransposeBack {
    fn name(&self) -> &'static str {
        "transpose_last2"
    }
    fn backward(&self, grad: &[E], needs: &[bool]) -> Vec<Option<Vec<E>>> {
        vec![needs[0].then(|| transpose_data(grad, self.out))]
    }
}

struct MatmulBack<E: Scalar> {
    a_data: Arc<Vec<E>>,
    b_data: Arc<Vec<E>>,
    a: Shape,
    b: Shape,
    out: Shape,
}

impl<E: Scalar> MatmulBack<E> {
    fn grad_a(&self, grad: &[E]) -> Vec<E> {
        let (m, k, n) = (self.a.h, self.a.w, self.b.w);
        let mut out = vec![E::zero(); self.a.numel()];
        for i in 0..self.out.n {
            for j in 0..self.out.c {
                let g = &grad[(i * self.out.c + j) * m * n..];
                let boff = mat_offset(self.b, i, j, k * n);
                let aoff = mat_offset(self.a, i, j, m * k);
                // dA += g (m,n) @ B^T (n,k); accumulate when A is broadcast
                E::gemm(
                    m,
                    n,
                    k,
                    E::one(),
                    g,
                    n as isize,
                    1,
                    &self.b_data[boff..],
                    1,
                    n as isize,
                    E::one(),
                    &mut out[aoff..aoff + m * k],
                    k as isize,
                    1,
                );
            }
        }
        out
    }

    fn grad_b(&self, grad: &[E]) -> Vec<E> {
        let (m, k, n) = (self.a.h, self.a.w, self.b.w);
        let mut out = vec![E::zero(); self.b.numel()];
        for i in 0..self.out.n {
            for j in 0..self.out.c {
                let g = &grad[(i * self.out.c + j) * m * n..];
                let aoff = mat_offset(self.a, i, j, m * k);
                let boff = mat_offset(self.b, i, j, k * n);
                // dB += A^T (k,m) @ g (m,n)
                E::gemm(
                    k,
                    m,
                    n,
                    E::one(),
                    &self.a_data[aoff..],
                    1,
                    k as isize,
                    g,
                    n as isize,
                    1,
                    E::one(),
                    &mut out[boff..boff + k * n],
                    n as isize,
                    1,
                );
            }
        }
        out
    }
}

impl<E: Scalar> BackwardOp<E> for MatmulBack<E> {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, grad: &[E], needs: &[bool]) -> Vec<Option<Vec<E>>> {
        vec![
            needs[0].then(|| self.grad_a(grad)),
            needs[1].then(|| self.grad_b(grad)),
        ]
    }
}

/// Start offset of the `(i, j)` matrix inside an operand, honoring batch
/// broadcast (a size-1 batch axis always reads matrix 0).
fn mat_offset(shape: Shape, i: usize, j: usize, mat_len: usize) -> usize {
    let bi = if shape.n == 1 { 0 } else { i };
    let bj = if shape.c == 1 { 0 } else { j };
    (bi * shape.c + bj) * mat_len
}

impl<E: Scalar> Tensor<E> {
    /// `(.., m, k) @ (.., k, n) -> (.., m, n)`; the two leading axes must
    /// match or be 1 on one side.
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let a = self.shape();
        let b = other.shape();
        if a.w != b.h {
            return Err(Error::shape(
                "matmul",
                format!("inner dimension {} vs {} (shapes {} and {})", a.w, b.h, a, b),
            ));
        }
        let bn = broadcast_batch("matmul", a.n, b.n, "batch")?;
        let bc = broadcast_batch("matmul", a.c, b.c, "channel")?;
        let (m, k, n) = (a.h, a.w, b.w);
        let out = Shape::new(bn, bc, m, n);
        let mut data = vec![E::zero(); out.numel()];
        let ad = self.data();
        let bd = other.data();
        for i in 0..bn {
            for j in 0..bc {
                let aoff = mat_offset(a, i, j, m * k);
                let boff = mat_offset(b, i, j, k * n);
                let coff = (i * bc + j) * m * n;
                E::gemm(
                    m,
                    k,
                    n,
                    E::one(),
                    &ad[aoff..],
                    k as isize,
                    1,
                    &bd[boff..],
                    n as isize,
                    1,
                    E::zero(),
                    &mut data[coff..coff + m * n],
                    n as isize,
                    1,
                );
            }
        }
        Ok(Tensor::from_op(
            out,
            data,
            &[self, other],
            MatmulBack {
                a_data: self.data_arc(),
                b_data: other.data_arc(),
                a,
                b,
                out,
            },
        ))
    }

    /// Swap the last two axes: `(n, c, h, w) -> (n, c, w, h)`.
    pub fn transpose_last2(&self) -> Tensor<E> {
        let s = self.shape();
        let out = Shape::new(s.n, s.c, s.w, s.h);
        let data = transpose_data(self.data(), s);
        Tensor::from_op(out, data, &[self], TransposeBack { out })
    }
}

fn broadcast_batch(op: &'static str, a: usize, b: usize, axis: &str) -> Result<usize> {
    if a == b {
        Ok(a)
    } else if a == 1 {
        Ok(b)
    } else if b == 1 {
        Ok(a)
    } else {
        Err(Error::shape(op, format!("{} dimension {} vs {}", axis, a, b)))
    }
}
