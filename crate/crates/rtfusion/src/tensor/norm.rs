//! Row softmax and channel layer normalization.

use super::{BackwardOp, Scalar, Shape, Tensor};
use crate::error::{Error, Result};
use std::sync::Arc;

struct SoftmaxBack<E: Scalar> {
    y: Arc<Vec<E>>,
    cols: usize,
}

impl<E: Scalar> BackwardOp<E> for SoftmaxBack<E> {
    fn name(&self) -> &'static str {
        "softmax_lastdim"
    }
    fn backward(&self, grad: &[E], needs: &[bool]) -> Vec<Option<Vec<E>>> {
        vec![needs[0].then(|| {
            let mut dx = vec![E::zero(); grad.len()];
            for r in 0..grad.len() / self.cols {
                let g = &grad[r * self.cols..(r + 1) * self.cols];
                let y = &self.y[r * self.cols..(r + 1) * self.cols];
                let dot: E = g.iter().zip(y).map(|(&gi, &yi)| gi * yi).sum();
                for ((d, &gi), &yi) in dx[r * self.cols..(r + 1) * self.cols]
                    .iter_mut()
                    .zip(g)
                    .zip(y)
                {
                    *d = yi * (gi - dot);
                }
            }
            dx
        })]
    }
}

struct LayerNormBack<E: Scalar> {
    xhat: Arc<Vec<E>>,
    inv_std: Arc<Vec<E>>, // one per (n, h, w) position
    gamma: Arc<Vec<E>>,
    shape: Shape,
}

impl<E: Scalar> BackwardOp<E> for LayerNormBack<E> {
    fn name(&self) -> &'static str {
        "layer_norm"
    }
    fn backward(&self, grad: &[E], needs: &[bool]) -> Vec<Option<Vec<E>>> {
        let [n, c, h, w] = self.shape.dims();
        let plane = h * w;
        let inv_c = E::one() / E::from_f64(c as f64);

        let dx = needs[0].then(|| {
            let mut dx = vec![E::zero(); self.shape.numel()];
            for i in 0..n {
                for pos in 0..plane {
                    let base = i * c * plane + pos;
                    // dxhat_j = gamma_j * g_j over the channel fiber
                    let mut m1 = E::zero();
                    let mut m2 = E::zero();
                    for j in 0..c {
                        let idx = base + j * plane;
                        let dxh = self.gamma[j] * grad[idx];
                        m1 += dxh;
                        m2 += dxh * self.xhat[idx];
                    }
                    m1 *= inv_c;
                    m2 *= inv_c;
                    let inv = self.inv_std[i * plane + pos];
                    for j in 0..c {
                        let idx = base + j * plane;
                        let dxh = self.gamma[j] * grad[idx];
                        dx[idx] = inv * (dxh - m1 - self.xhat[idx] * m2);
                    }
                }
            }
            dx
        });

        let dgamma = needs[1].then(|| {
            let mut dg = vec![E::zero(); c];
            for i in 0..n {
                for j in 0..c {
                    let base = (i * c + j) * plane;
                    let mut acc = E::zero();
                    for pos in 0..plane {
                        acc += grad[base + pos] * self.xhat[base + pos];
                    }
                    dg[j] += acc;
                }
            }
            dg
        });

        let dbeta = needs[2].then(|| {
            let mut db = vec![E::zero(); c];
            for i in 0..n {
                for j in 0..c {
                    let base = (i * c + j) * plane;
                    let mut acc = E::zero();
                    for pos in 0..plane {
                        acc += grad[base + pos];
                    }
                    db[j] += acc;
                }
            }
            db
        });

        vec![dx, dgamma, dbeta]
    }
}

impl<E: Scalar> Tensor<E> {
    /// Row-wise softmax over the last axis, computed with max subtraction.
    /// Every output row is nonnegative and sums to 1.
    pub fn softmax_lastdim(&self) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.w == 0 {
            return Err(Error::shape("softmax_lastdim", "zero-width rows".to_string()));
        }
        let cols = s.w;
        let d = self.data();
        let mut data = vec![E::zero(); self.numel()];
        for r in 0..self.numel() / cols {
            let row = &d[r * cols..(r + 1) * cols];
            let out = &mut data[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(row[0], E::max);
            let mut total = E::zero();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            let inv = E::one() / total;
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let saved = Arc::new(data.clone());
        Ok(Tensor::from_op(
            s,
            data,
            &[self],
            SoftmaxBack { y: saved, cols },
        ))
    }

    /// Layer normalization over the channel axis at every spatial position,
    /// with per-channel affine parameters `gamma`, `beta` of shape
    /// `(1, C, 1, 1)`. Variance is the biased estimate.
    pub fn layer_norm(&self, gamma: &Tensor<E>, beta: &Tensor<E>, eps: E) -> Result<Tensor<E>> {
        let s = self.shape();
        if gamma.numel() != s.c || beta.numel() != s.c {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "channel dimension: affine parameters ({}, {}) must match {} channels",
                    gamma.numel(),
                    beta.numel(),
                    s.c
                ),
            ));
        }
        let [n, c, h, w] = s.dims();
        let plane = h * w;
        let inv_c = E::one() / E::from_f64(c as f64);
        let d = self.data();
        let gd = gamma.data();
        let bd = beta.data();

        let mut xhat = vec![E::zero(); self.numel()];
        let mut inv_std = vec![E::zero(); n * plane];
        let mut data = vec![E::zero(); self.numel()];
        for i in 0..n {
            for pos in 0..plane {
                let base = i * c * plane + pos;
                let mut mean = E::zero();
                for j in 0..c {
                    mean += d[base + j * plane];
                }
                mean *= inv_c;
                let mut var = E::zero();
                for j in 0..c {
                    let dv = d[base + j * plane] - mean;
                    var += dv * dv;
                }
                var *= inv_c;
                let inv = E::one() / (var + eps).sqrt();
                inv_std[i * plane + pos] = inv;
                for j in 0..c {
                    let idx = base + j * plane;
                    let xh = (d[idx] - mean) * inv;
                    xhat[idx] = xh;
                    data[idx] = gd[j] * xh + bd[j];
                }
            }
        }

        Ok(Tensor::from_op(
            s,
            data,
            &[self, gamma, beta],
            LayerNormBack {
                xhat: Arc::new(xhat),
                inv_std: Arc::new(inv_std),
                gamma: gamma.data_arc(),
                shape: s,
            },
        ))
    }
}
