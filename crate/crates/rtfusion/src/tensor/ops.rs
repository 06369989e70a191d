//! Elementwise, reduction and layout primitives with their backward rules.

use super::{BackwardOp, Scalar, Shape, Tensor};
use crate::error::{Error, Result};
use std::sync::Arc;

/// Output shape of a broadcasting binary op: each axis must match or be 1 on
/// one side.
fn broadcast_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape> {
    let mut out = [0usize; 4];
    let ad = a.dims();
    let bd = b.dims();
    let names = ["batch", "channel", "height", "width"];
    for i in 0..4 {
        out[i] = if ad[i] == bd[i] {
            ad[i]
        } else if ad[i] == 1 {
            bd[i]
        } else if bd[i] == 1 {
            ad[i]
        } else {
            return Err(Error::shape(
                op,
                format!("{} dimension {} vs {} (shapes {} and {})", names[i], ad[i], bd[i], a, b),
            ));
        };
    }
    Ok(Shape::new(out[0], out[1], out[2], out[3]))
}

/// Strides for reading an operand at output coordinates: 0 on broadcast axes.
fn bcast_strides(operand: Shape, out: Shape) -> [usize; 4] {
    let s = operand.strides();
    let od = operand.dims();
    let ud = out.dims();
    let mut r = [0usize; 4];
    for i in 0..4 {
        r[i] = if od[i] == ud[i] { s[i] } else { 0 };
    }
    r
}

fn map2<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>, out: Shape, f: impl Fn(E, E) -> E) -> Vec<E> {
    let ad = a.data();
    let bd = b.data();
    if a.shape() == out && b.shape() == out {
        return ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect();
    }
    let sa = bcast_strides(a.shape(), out);
    let sb = bcast_strides(b.shape(), out);
    let [n, c, h, w] = out.dims();
    let mut data = Vec::with_capacity(out.numel());
    for i in 0..n {
        for j in 0..c {
            for y in 0..h {
                let base_a = i * sa[0] + j * sa[1] + y * sa[2];
                let base_b = i * sb[0] + j * sb[1] + y * sb[2];
                for x in 0..w {
                    data.push(f(ad[base_a + x * sa[3]], bd[base_b + x * sb[3]]));
                }
            }
        }
    }
    data
}

/// Sum `grad` (shaped `from`) down to `to`, collapsing broadcast axes.
pub(crate) fn reduce_to<E: Scalar>(grad: &[E], from: Shape, to: Shape) -> Vec<E> {
    if from == to {
        return grad.to_vec();
    }
    let st = bcast_strides(to, from);
    let [n, c, h, w] = from.dims();
    let mut out = vec![E::zero(); to.numel()];
    let mut idx = 0;
    for i in 0..n {
        for j in 0..c {
            for y in 0..h {
                let base = i * st[0] + j * st[1] + y * st[2];
                for x in 0..w {
                    out[base + x * st[3]] += grad[idx];
                    idx += 1;
                }
            }
        }
    }
    out
}

/// Multiply `grad` elementwise by `other` read at broadcast strides, then
/// reduce to `target` (the product-rule path of broadcast `mul`).
fn mul_reduce<E: Scalar>(
    grad: &[E],
    out: Shape,
    other: &[E],
    other_shape: Shape,
    target: Shape,
) -> Vec<E> {
    let so = bcast_strides(other_shape, out);
    let st = bcast_strides(target, out);
    let [n, c, h, w] = out.dims();
    let mut acc = vec![E::zero(); target.numel()];
    let mut idx = 0;
    for i in 0..n {
        for j in 0..c {
            for y in 0..h {
                let base_o = i * so[0] + j * so[1] + y * so[2];
                let base_t = i * st[0] + j * st[1] + y * st[2];
                for x in 0..w {
                    acc[base_t + x * st[3]] += grad[idx] * other[base_o + x * so[3]];
                    idx += 1;
                }
            }
        }
    }
    acc
}

struct AddBack {
    a: Shape,
    b: Shape,
    out: Shape,
}

impl<E: Scalar> BackwardOp<E> for AddBack {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, grad: &[E], needs: &[bool]) -> Vec<Option<Vec<E>>> {
        vec![
            needs[0].then(|| reduce_to(grad, self.out, self.a)),
            needs[1].then(|| reduce_to(grad, self.out, self.b)),
        ]
    }
}

struct SubBack {
    a: Shape,
    b: Shape,
    out: Shape,
}

impl<E: Scalar> BackwardOp<E> for SubBack {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, grad: &[E], needs: &[bool]) -> Vec<Option<Vec<E>>> {
        vec![
            needs[0].then(|| reduce_to(grad, self.out, self.a)),
            needs[1].then(|| {
                let mut g = reduce_to(grad, self.out, self.b);
                for v in &mut g {
                    *v = -*v;
                }
                g
            }),
        ]
    }
}

struct MulBack<E: Scalar> {
    a_data: Arc<Vec<E>>,
    b_data: Arc<Vec<E>>,
    a: Shape,
    b: Shape,
    out: Shape,
}

impl<E: Scalar> BackwardOp<E> for MulBack<E> {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, grad: &[E], needs: &[bool]) -> Vec<Option<Vec<E>>> {
        vec![
            needs[0].then(|| mul_reduce(grad, self.out, &self.b_data, self.b, self.a)),
            needs[1].then(|| mul_reduce(grad, self.out, &self.a_data, self.a, self.b)),
        ]
    }
}

/// `grad * f'` for unary ops whose derivative is a function of the saved
/// input (or output) values.
struct UnaryBack<E: Scalar> {
    op: &'static str,
    saved: Arc<Vec<E>>,
    dfdx: fn(E) -> E,
}

impl<E: Scalar> BackwardOp<E> for UnaryBack<E> {
    fn name(&self) -> &'static str {
        self.op
    }
    fn backward(&self, grad: &[E], needs: &[bool]) -> Vec<Option<Vec<E>>> {
        vec![needs[0].then(|| {
            grad.iter()
                .zip(self.saved.iter())
                .map(|(&g, &s)| g * (self.dfdx)(s))
                .collect()
        })]
    }
}

struct ScalarMulBack<E: Scalar> {
    factor: E,
}

impl<E: Scalar> BackwardOp<E> for ScalarMulBack<E> {
    fn name(&self) -> &'static str {
        "scalar_mul"
    }
    fn backward(&self, grad: &[E], needs: &[bool]) -> Vec<Option<Vec<E>>> {
        vec![needs[0].then(|| grad.iter().map(|&g| g * self.factor).collect())]
    }
}

struct ScalarAddBack;

impl<E: Scalar> BackwardOp<E> for ScalarAddBack {
    fn name(&self) -> &'static str {
        "scalar_add"
    }
    fn backward(&self, grad: &[E], needs: &[bool]) -> Vec<Option<Vec<E>>> {
        vec![needs[0].then(|| grad.to_vec())]
    }
}

struct SumBack {
    input: Shape,
}

impl<E: Scalar> BackwardOp<E> for SumBack {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, grad: &[E], needs: &[bool]) -> Vec<Option<Vec<E>>> {
        vec![needs[0].then(|| vec![grad[0]; self.input.numel()])]
    }
}

struct ConcatChannelsBack {
    a: Shape,
    b: Shape,
}

impl<E: Scalar> BackwardOp<E> for ConcatChannelsBack {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn backward(&self, grad: &[E], needs: &[bool]) -> Vec<Option<Vec<E>>> {
        let [n, _, h, w] = self.a.dims();
        let plane = h * w;
        let ca = self.a.c;
        let cb = self.b.c;
        let grab = |offset: usize, ch: usize, shape: Shape| {
            let mut out = vec![E::zero(); shape.numel()];
            for i in 0..n {
                let src = (i * (ca + cb) + offset) * plane;
                let dst = i * ch * plane;
                out[dst..dst + ch * plane].copy_from_slice(&grad[src..src + ch * plane]);
            }
            out
        };
        vec![
            needs[0].then(|| grab(0, ca, self.a)),
            needs[1].then(|| grab(ca, cb, self.b)),
        ]
    }
}

struct SliceChannelsBack {
    input: Shape,
    start: usize,
    len: usize,
}

impl<E: Scalar> BackwardOp<E> for SliceChannelsBack {
    fn name(&self) -> &'static str {
        "slice_channels"
    }
    fn backward(&self, grad: &[E], needs: &[bool]) -> Vec<Option<Vec<E>>> {
        vec![needs[0].then(|| {
            let [n, c, h, w] = self.input.dims();
            let plane = h * w;
            let mut out = vec![E::zero(); self.input.numel()];
            for i in 0..n {
                let dst = (i * c + self.start) * plane;
                let src = i * self.len * plane;
                out[dst..dst + self.len * plane].copy_from_slice(&grad[src..src + self.len * plane]);
            }
            out
        })]
    }
}

/// Data-movement op defined by an index permutation; backward scatters by
/// the inverse map.
struct PermuteBack {
    op: &'static str,
    input: Shape,
    // forward: out[i] = in[src_index[i]]
    src_index: Arc<Vec<u32>>,
}

impl<E: Scalar> BackwardOp<E> for PermuteBack {
    fn name(&self) -> &'static str {
        self.op
    }
    fn backward(&self, grad: &[E], needs: &[bool]) -> Vec<Option<Vec<E>>> {
        vec![needs[0].then(|| {
            let mut out = vec![E::zero(); self.input.numel()];
            for (g, &src) in grad.iter().zip(self.src_index.iter()) {
                out[src as usize] += *g;
            }
            out
        })]
    }
}

struct DiffBack {
    input: Shape,
    horizontal: bool,
}

impl<E: Scalar> BackwardOp<E> for DiffBack {
    fn name(&self) -> &'static str {
        if self.horizontal {
            "diff_x"
        } else {
            "diff_y"
        }
    }
    fn backward(&self, grad: &[E], needs: &[bool]) -> Vec<Option<Vec<E>>> {
        vec![needs[0].then(|| {
            let [n, c, h, w] = self.input.dims();
            let mut out = vec![E::zero(); self.input.numel()];
            let mut idx = 0;
            if self.horizontal {
                for i in 0..n {
                    for j in 0..c {
                        for y in 0..h {
                            let row = ((i * c + j) * h + y) * w;
                            for x in 0..w - 1 {
                                let g = grad[idx];
                                out[row + x + 1] += g;
                                out[row + x] -= g;
                                idx += 1;
                            }
                        }
                    }
                }
            } else {
                for i in 0..n {
                    for j in 0..c {
                        for y in 0..h - 1 {
                            let row = ((i * c + j) * h + y) * w;
                            for x in 0..w {
                                let g = grad[idx];
                                out[row + w + x] += g;
                                out[row + x] -= g;
                                idx += 1;
                            }
                        }
                    }
                }
            }
            out
        })]
    }
}

impl<E: Scalar> Tensor<E> {
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let out = broadcast_shape("add", self.shape(), other.shape())?;
        let data = map2(self, other, out, |x, y| x + y);
        Ok(Tensor::from_op(
            out,
            data,
            &[self, other],
            AddBack {
                a: self.shape(),
                b: other.shape(),
                out,
            },
        ))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let out = broadcast_shape("sub", self.shape(), other.shape())?;
        let data = map2(self, other, out, |x, y| x - y);
        Ok(Tensor::from_op(
            out,
            data,
            &[self, other],
            SubBack {
                a: self.shape(),
                b: other.shape(),
                out,
            },
        ))
    }

    /// Elementwise product; axes broadcast where one side has size 1.
    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let out = broadcast_shape("mul", self.shape(), other.shape())?;
        let data = map2(self, other, out, |x, y| x * y);
        Ok(Tensor::from_op(
            out,
            data,
            &[self, other],
            MulBack {
                a_data: self.data_arc(),
                b_data: other.data_arc(),
                a: self.shape(),
                b: other.shape(),
                out,
            },
        ))
    }

    pub fn scalar_mul(&self, factor: E) -> Tensor<E> {
        let data = self.data().iter().map(|&x| x * factor).collect();
        Tensor::from_op(self.shape(), data, &[self], ScalarMulBack { factor })
    }

    pub fn scalar_add(&self, offset: E) -> Tensor<E> {
        let data = self.data().iter().map(|&x| x + offset).collect();
        Tensor::from_op(self.shape(), data, &[self], ScalarAddBack)
    }

    pub fn neg(&self) -> Tensor<E> {
        self.scalar_mul(-E::one())
    }

    pub fn relu(&self) -> Tensor<E> {
        let data = self.data().iter().map(|&x| x.max(E::zero())).collect();
        Tensor::from_op(
            self.shape(),
            data,
            &[self],
            UnaryBack {
                op: "relu",
                saved: self.data_arc(),
                dfdx: |x| if x > E::zero() { E::one() } else { E::zero() },
            },
        )
    }

    /// Tanh-approximate gelu:
    /// `0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))`.
    pub fn gelu(&self) -> Tensor<E> {
        let data = self.data().iter().map(|&x| gelu_forward(x)).collect();
        Tensor::from_op(
            self.shape(),
            data,
            &[self],
            UnaryBack {
                op: "gelu",
                saved: self.data_arc(),
                dfdx: gelu_derivative,
            },
        )
    }

    /// Logistic sigmoid; output strictly inside (0, 1).
    pub fn sigmoid(&self) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&x| sigmoid_forward(x)).collect();
        let saved = Arc::new(data.clone());
        Tensor::from_op(
            self.shape(),
            data,
            &[self],
            UnaryBack {
                op: "sigmoid",
                saved,
                dfdx: |y| y * (E::one() - y),
            },
        )
    }

    /// `ln(1 + e^x)`, computed as `max(x, 0) + ln(1 + e^-|x|)`.
    pub fn softplus(&self) -> Tensor<E> {
        let data = self
            .data()
            .iter()
            .map(|&x| x.max(E::zero()) + (-x.abs()).exp().ln_1p())
            .collect();
        Tensor::from_op(
            self.shape(),
            data,
            &[self],
            UnaryBack {
                op: "softplus",
                saved: self.data_arc(),
                dfdx: sigmoid_forward,
            },
        )
    }

    /// Absolute value; the subgradient at 0 is defined as 0.
    pub fn abs(&self) -> Tensor<E> {
        let data = self.data().iter().map(|&x| x.abs()).collect();
        Tensor::from_op(
            self.shape(),
            data,
            &[self],
            UnaryBack {
                op: "abs",
                saved: self.data_arc(),
                dfdx: |x| {
                    if x > E::zero() {
                        E::one()
                    } else if x < E::zero() {
                        -E::one()
                    } else {
                        E::zero()
                    }
                },
            },
        )
    }

    pub fn exp(&self) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&x| x.exp()).collect();
        let saved = Arc::new(data.clone());
        Tensor::from_op(
            self.shape(),
            data,
            &[self],
            UnaryBack {
                op: "exp",
                saved,
                dfdx: |y| y,
            },
        )
    }

    /// `min(x, cap)`. Gradient passes through at `x <= cap`, is 0 beyond.
    pub fn clamp_max(&self, cap: E) -> Tensor<E> {
        let data = self.data().iter().map(|&x| x.min(cap)).collect();
        struct ClampMaxBack<E: Scalar> {
            saved: Arc<Vec<E>>,
            cap: E,
        }
        impl<E: Scalar> BackwardOp<E> for ClampMaxBack<E> {
            fn name(&self) -> &'static str {
                "clamp_max"
            }
            fn backward(&self, grad: &[E], needs: &[bool]) -> Vec<Option<Vec<E>>> {
                vec![needs[0].then(|| {
                    grad.iter()
                        .zip(self.saved.iter())
                        .map(|(&g, &x)| if x <= self.cap { g } else { E::zero() })
                        .collect()
                })]
            }
        }
        Tensor::from_op(
            self.shape(),
            data,
            &[self],
            ClampMaxBack {
                saved: self.data_arc(),
                cap,
            },
        )
    }

    /// Full reduction to a scalar tensor.
    pub fn sum(&self) -> Tensor<E> {
        let total: E = self.data().iter().copied().sum();
        Tensor::from_op(
            Shape::scalar(),
            vec![total],
            &[self],
            SumBack { input: self.shape() },
        )
    }

    /// Arithmetic mean of all elements, as a scalar tensor.
    pub fn mean(&self) -> Tensor<E> {
        let n = E::from_f64(self.numel() as f64);
        self.sum().scalar_mul(E::one() / n)
    }

    /// Concatenate along the channel axis; `self`'s channels first.
    pub fn concat_channels(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let a = self.shape();
        let b = other.shape();
        if a.n != b.n || a.h != b.h || a.w != b.w {
            return Err(Error::shape(
                "concat_channels",
                format!("non-channel dimensions must match, got {} and {}", a, b),
            ));
        }
        let out = Shape::new(a.n, a.c + b.c, a.h, a.w);
        let plane = a.h * a.w;
        let mut data = Vec::with_capacity(out.numel());
        let ad = self.data();
        let bd = other.data();
        for i in 0..a.n {
            data.extend_from_slice(&ad[i * a.c * plane..(i + 1) * a.c * plane]);
            data.extend_from_slice(&bd[i * b.c * plane..(i + 1) * b.c * plane]);
        }
        Ok(Tensor::from_op(
            out,
            data,
            &[self, other],
            ConcatChannelsBack { a, b },
        ))
    }

    /// Channels `[start, start + len)` of the input.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor<E>> {
        let s = self.shape();
        if start + len > s.c {
            return Err(Error::shape(
                "slice_channels",
                format!("channel range {}..{} out of {} channels", start, start + len, s.c),
            ));
        }
        let plane = s.h * s.w;
        let out = Shape::new(s.n, len, s.h, s.w);
        let mut data = Vec::with_capacity(out.numel());
        let d = self.data();
        for i in 0..s.n {
            let from = (i * s.c + start) * plane;
            data.extend_from_slice(&d[from..from + len * plane]);
        }
        Ok(Tensor::from_op(
            out,
            data,
            &[self],
            SliceChannelsBack {
                input: s,
                start,
                len,
            },
        ))
    }

    /// `(N, C, H, W)` -> `(N, 1, H*W, C)`: spatial positions become rows
    /// (row-major over `(h, w)`), channels become the feature axis.
    pub fn flatten_spatial(&self) -> Tensor<E> {
        let s = self.shape();
        let out = Shape::new(s.n, 1, s.h * s.w, s.c);
        let mut src_index = Vec::with_capacity(out.numel());
        let mut data = Vec::with_capacity(out.numel());
        let d = self.data();
        for n in 0..s.n {
            for p in 0..s.h * s.w {
                let (h, w) = (p / s.w, p % s.w);
                for c in 0..s.c {
                    let src = s.index(n, c, h, w);
                    src_index.push(src as u32);
                    data.push(d[src]);
                }
            }
        }
        Tensor::from_op(
            out,
            data,
            &[self],
            PermuteBack {
                op: "flatten_spatial",
                input: s,
                src_index: Arc::new(src_index),
            },
        )
    }

    /// Inverse of [`flatten_spatial`]: `(N, 1, H*W, C)` -> `(N, C, H, W)`.
    pub fn unflatten_spatial(&self, h: usize, w: usize) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.c != 1 || s.h != h * w {
            return Err(Error::shape(
                "unflatten_spatial",
                format!("expected (N, 1, {}, C), got {}", h * w, s),
            ));
        }
        let channels = s.w;
        let out = Shape::new(s.n, channels, h, w);
        let mut src_index = vec![0u32; out.numel()];
        let mut data = vec![E::zero(); out.numel()];
        let d = self.data();
        for n in 0..s.n {
            for p in 0..h * w {
                for c in 0..channels {
                    let src = s.index(n, 0, p, c);
                    let dst = out.index(n, c, p / w, p % w);
                    src_index[dst] = src as u32;
                    data[dst] = d[src];
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            data,
            &[self],
            PermuteBack {
                op: "unflatten_spatial",
                input: s,
                src_index: Arc::new(src_index),
            },
        ))
    }

    /// Forward difference along width: `out[.., x] = in[.., x+1] - in[.., x]`.
    pub fn diff_x(&self) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.w < 2 {
            return Err(Error::shape("diff_x", format!("width must be >= 2, got {}", s.w)));
        }
        let out = Shape::new(s.n, s.c, s.h, s.w - 1);
        let d = self.data();
        let mut data = Vec::with_capacity(out.numel());
        for i in 0..s.n * s.c * s.h {
            let row = &d[i * s.w..(i + 1) * s.w];
            for x in 0..s.w - 1 {
                data.push(row[x + 1] - row[x]);
            }
        }
        Ok(Tensor::from_op(
            out,
            data,
            &[self],
            DiffBack {
                input: s,
                horizontal: true,
            },
        ))
    }

    /// Forward difference along height: `out[.., y, .] = in[.., y+1, .] - in[.., y, .]`.
    pub fn diff_y(&self) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.h < 2 {
            return Err(Error::shape("diff_y", format!("height must be >= 2, got {}", s.h)));
        }
        let out = Shape::new(s.n, s.c, s.h - 1, s.w);
        let d = self.data();
        let mut data = Vec::with_capacity(out.numel());
        for i in 0..s.n * s.c {
            let chan = &d[i * s.h * s.w..(i + 1) * s.h * s.w];
            for y in 0..s.h - 1 {
                for x in 0..s.w {
                    data.push(chan[(y + 1) * s.w + x] - chan[y * s.w + x]);
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            data,
            &[self],
            DiffBack {
                input: s,
                horizontal: false,
            },
        ))
    }
}

fn gelu_forward<E: Scalar>(x: E) -> E {
    let half = E::from_f64(0.5);
    let c = E::from_f64(std::f64::consts::FRAC_2_PI.sqrt());
    let k = E::from_f64(0.044715);
    let u = c * (x + k * x * x * x);
    half * x * (E::one() + u.tanh())
}

fn gelu_derivative<E: Scalar>(x: E) -> E {
    let half = E::from_f64(0.5);
    let c = E::from_f64(std::f64::consts::FRAC_2_PI.sqrt());
    let k = E::from_f64(0.044715);
    let three = E::from_f64(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    let du = c * (E::one() + three * k * x * x);
    half * (E::one() + t) + half * x * (E::one() - t * t) * du
}

fn sigmoid_forward<E: Scalar>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}
