//! 2-D convolution (grouped, strided, zero-padded) via im2col + gemm.

use super::{BackwardOp, Scalar, Shape, Tensor};
use crate::error::{Error, Result};
use rayon::prelude::*;
use std::sync::Arc;

#[derive(Clone, Copy)]
struct ConvGeom {
    x: Shape,
    w: Shape, // (Cout, Cin/groups, kh, kw)
    stride: usize,
    padding: usize,
    groups: usize,
    out: Shape,
}

impl ConvGeom {
    fn cg_in(&self) -> usize {
        self.w.c
    }
    fn cg_out(&self) -> usize {
        self.w.n / self.groups
    }
    /// im2col rows: one per (in-channel-within-group, ky, kx).
    fn k(&self) -> usize {
        self.w.c * self.w.h * self.w.w
    }
    /// im2col columns: one per output position.
    fn p(&self) -> usize {
        self.out.h * self.out.w
    }
}

fn out_extent(op: &'static str, input: usize, k: usize, stride: usize, padding: usize, axis: &str) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < k {
        return Err(Error::shape(
            op,
            format!("{} {} (+2*{} padding) smaller than kernel {}", axis, input, padding, k),
        ));
    }
    Ok((padded - k) / stride + 1)
}

/// Gather the receptive fields of one (sample, group) into a `k() x p()`
/// column matrix, zero-filling out-of-bounds taps.
fn im2col<E: Scalar>(x: &[E], g: &ConvGeom, n: usize, group: usize, col: &mut [E]) {
    let [_, _, h, w] = g.x.dims();
    let (kh, kw) = (g.w.h, g.w.w);
    let (oh, ow) = (g.out.h, g.out.w);
    let p = g.p();
    for cg in 0..g.cg_in() {
        let chan = (group * g.cg_in() + cg) * h * w + n * g.x.c * h * w;
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((cg * kh + ky) * kw + kx) * p;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let dst = row + oy * ow;
                    if iy < 0 || iy >= h as isize {
                        col[dst..dst + ow].fill(E::zero());
                        continue;
                    }
                    let src_row = chan + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        col[dst + ox] = if ix < 0 || ix >= w as isize {
                            E::zero()
                        } else {
                            x[src_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix back onto the input plane (adjoint of
/// [`im2col`]).
fn col2im_add<E: Scalar>(col: &[E], g: &ConvGeom, group: usize, dx_sample: &mut [E]) {
    let [_, _, h, w] = g.x.dims();
    let (kh, kw) = (g.w.h, g.w.w);
    let (oh, ow) = (g.out.h, g.out.w);
    let p = g.p();
    for cg in 0..g.cg_in() {
        let chan = (group * g.cg_in() + cg) * h * w;
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((cg * kh + ky) * kw + kx) * p;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = chan + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dx_sample[dst_row + ix as usize] += col[row + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dBack<E: Scalar> {
    x_data: Arc<Vec<E>>,
    w_data: Arc<Vec<E>>,
    geom: ConvGeom,
}

impl<E: Scalar> Conv2dBack<E> {
    fn grad_x(&self, grad: &[E]) -> Vec<E> {
        let g = &self.geom;
        let (k, p) = (g.k(), g.p());
        let (cg_out, cout) = (g.cg_out(), g.w.n);
        let sample = g.x.c * g.x.h * g.x.w;
        let mut dx = vec![E::zero(); g.x.numel()];
        dx.par_chunks_mut(sample).enumerate().for_each(|(n, dxs)| {
            let mut dcol = vec![E::zero(); k * p];
            for group in 0..g.groups {
                let go = (n * cout + group * cg_out) * p;
                // dcol = W_g^T (k, cg_out) @ grad_g (cg_out, p)
                E::gemm(
                    k,
                    cg_out,
                    p,
                    E::one(),
                    &self.w_data[group * cg_out * k..],
                    1,
                    k as isize,
                    &grad[go..],
                    p as isize,
                    1,
                    E::zero(),
                    &mut dcol,
                    p as isize,
                    1,
                );
                col2im_add(&dcol, g, group, dxs);
            }
        });
        dx
    }

    fn grad_w(&self, grad: &[E]) -> Vec<E> {
        let g = &self.geom;
        let (k, p) = (g.k(), g.p());
        let (cg_out, cout) = (g.cg_out(), g.w.n);
        let mut dw = vec![E::zero(); g.w.numel()];
        let mut col = vec![E::zero(); k * p];
        for n in 0..g.x.n {
            for group in 0..g.groups {
                im2col(&self.x_data, g, n, group, &mut col);
                let go = (n * cout + group * cg_out) * p;
                // dW_g += grad_g (cg_out, p) @ col^T (p, k)
                E::gemm(
                    cg_out,
                    p,
                    k,
                    E::one(),
                    &grad[go..],
                    p as isize,
                    1,
                    &col,
                    1,
                    p as isize,
                    E::one(),
                    &mut dw[group * cg_out * k..(group + 1) * cg_out * k],
                    k as isize,
                    1,
                );
            }
        }
        dw
    }

    fn grad_b(&self, grad: &[E]) -> Vec<E> {
        let g = &self.geom;
        let p = g.p();
        let cout = g.w.n;
        let mut db = vec![E::zero(); cout];
        for n in 0..g.x.n {
            for co in 0..cout {
                let base = (n * cout + co) * p;
                let mut acc = E::zero();
                for i in 0..p {
                    acc += grad[base + i];
                }
                db[co] += acc;
            }
        }
        db
    }
}

impl<E: Scalar> BackwardOp<E> for Conv2dBack<E> {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, grad: &[E], needs: &[bool]) -> Vec<Option<Vec<E>>> {
        vec![
            needs[0].then(|| self.grad_x(grad)),
            needs[1].then(|| self.grad_w(grad)),
            needs[2].then(|| self.grad_b(grad)),
        ]
    }
}

impl<E: Scalar> Tensor<E> {
    /// Grouped 2-D convolution with zero padding.
    ///
    /// `weight` is `(Cout, Cin/groups, kh, kw)`, `bias` is `(1, Cout, 1, 1)`.
    /// Output spatial extent per axis is
    /// `(in + 2*padding - kernel) / stride + 1`.
    pub fn conv2d(
        &self,
        weight: &Tensor<E>,
        bias: &Tensor<E>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Tensor<E>> {
        let x = self.shape();
        let w = weight.shape();
        if groups == 0 || stride == 0 {
            return Err(Error::InvalidArgument(
                "conv2d: stride and groups must be >= 1".into(),
            ));
        }
        if x.c != w.c * groups {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "channel dimension: input has {} channels but weight {} expects {} (= {} per group x {} groups)",
                    x.c, w, w.c * groups, w.c, groups
                ),
            ));
        }
        if w.n % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("output channel dimension {} not divisible by {} groups", w.n, groups),
            ));
        }
        if bias.numel() != w.n {
            return Err(Error::shape(
                "conv2d",
                format!("bias dimension {} != output channels {}", bias.numel(), w.n),
            ));
        }
        let oh = out_extent("conv2d", x.h, w.h, stride, padding, "height")?;
        let ow = out_extent("conv2d", x.w, w.w, stride, padding, "width")?;
        let out = Shape::new(x.n, w.n, oh, ow);
        let geom = ConvGeom {
            x,
            w,
            stride,
            padding,
            groups,
            out,
        };
        let (k, p) = (geom.k(), geom.p());
        let cg_out = geom.cg_out();

        let xd = self.data();
        let wd = weight.data();
        let bd = bias.data();
        let mut data = vec![E::zero(); out.numel()];
        let sample = out.c * out.h * out.w;
        data.par_chunks_mut(sample).enumerate().for_each(|(n, outs)| {
            let mut col = vec![E::zero(); k * p];
            for group in 0..geom.groups {
                im2col(xd, &geom, n, group, &mut col);
                let dst = group * cg_out * p;
                E::gemm(
                    cg_out,
                    k,
                    p,
                    E::one(),
                    &wd[group * cg_out * k..],
                    k as isize,
                    1,
                    &col,
                    p as isize,
                    1,
                    E::zero(),
                    &mut outs[dst..dst + cg_out * p],
                    p as isize,
                    1,
                );
            }
            for co in 0..out.c {
                let b = bd[co];
                for v in &mut outs[co * p..(co + 1) * p] {
                    *v += b;
                }
            }
        });

        Ok(Tensor::from_op(
            out,
            data,
            &[self, weight, bias],
            Conv2dBack {
                x_data: self.data_arc(),
                w_data: weight.data_arc(),
                geom,
            },
        ))
    }
}
