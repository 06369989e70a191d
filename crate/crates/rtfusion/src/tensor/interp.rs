//! Bilinear resampling with the half-pixel-center convention.

use super::{BackwardOp, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Per-output-coordinate sampling plan for one axis:
/// `src = (dst + 0.5) * (s_in / s_out) - 0.5`, clamped to `[0, s_in - 1]`,
/// blended between `floor(src)` and its neighbor.
struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn axis_taps(s_in: usize, s_out: usize) -> AxisTaps {
    let scale = s_in as f64 / s_out as f64;
    let mut lo = Vec::with_capacity(s_out);
    let mut hi = Vec::with_capacity(s_out);
    let mut frac = Vec::with_capacity(s_out);
    for d in 0..s_out {
        let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (s_in - 1) as f64);
        let l = src.floor() as usize;
        let h = (l + 1).min(s_in - 1);
        lo.push(l);
        hi.push(h);
        frac.push(src - l as f64);
    }
    AxisTaps { lo, hi, frac }
}

struct BilinearBack {
    input: Shape,
    out: Shape,
}

impl<E: Scalar> BackwardOp<E> for BilinearBack {
    fn name(&self) -> &'static str {
        "bilinear_interp"
    }
    fn backward(&self, grad: &[E], needs: &[bool]) -> Vec<Option<Vec<E>>> {
        vec![needs[0].then(|| {
            let ty = axis_taps(self.input.h, self.out.h);
            let tx = axis_taps(self.input.w, self.out.w);
            let (ih, iw) = (self.input.h, self.input.w);
            let (oh, ow) = (self.out.h, self.out.w);
            let mut dx = vec![E::zero(); self.input.numel()];
            for plane in 0..self.input.n * self.input.c {
                let dst = &mut dx[plane * ih * iw..(plane + 1) * ih * iw];
                let src = &grad[plane * oh * ow..(plane + 1) * oh * ow];
                for oy in 0..oh {
                    let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
                    for ox in 0..ow {
                        let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                        let g = src[oy * ow + ox];
                        dst[y0 * iw + x0] += g * E::from_f64((1.0 - fy) * (1.0 - fx));
                        dst[y0 * iw + x1] += g * E::from_f64((1.0 - fy) * fx);
                        dst[y1 * iw + x0] += g * E::from_f64(fy * (1.0 - fx));
                        dst[y1 * iw + x1] += g * E::from_f64(fy * fx);
                    }
                }
            }
            dx
        })]
    }
}

impl<E: Scalar> Tensor<E> {
    /// Resize the spatial axes to `(out_h, out_w)` by bilinear blending.
    /// Exact identity when the output size equals the input size.
    pub fn bilinear_interp(&self, out_h: usize, out_w: usize) -> Result<Tensor<E>> {
        let s = self.shape();
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument(
                "bilinear_interp: output size must be >= 1".into(),
            ));
        }
        if out_h == s.h && out_w == s.w {
            // identity resize: still record a pass-through op
            let data = self.to_vec();
            struct IdentityBack;
            impl<E: Scalar> BackwardOp<E> for IdentityBack {
                fn name(&self) -> &'static str {
                    "bilinear_interp"
                }
                fn backward(&self, grad: &[E], needs: &[bool]) -> Vec<Option<Vec<E>>> {
                    vec![needs[0].then(|| grad.to_vec())]
                }
            }
            return Ok(Tensor::from_op(s, data, &[self], IdentityBack));
        }
        let out = Shape::new(s.n, s.c, out_h, out_w);
        let ty = axis_taps(s.h, out_h);
        let tx = axis_taps(s.w, out_w);
        let d = self.data();
        let mut data = Vec::with_capacity(out.numel());
        for plane in 0..s.n * s.c {
            let src = &d[plane * s.h * s.w..(plane + 1) * s.h * s.w];
            for oy in 0..out_h {
                let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
                for ox in 0..out_w {
                    let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                    let v00 = src[y0 * s.w + x0].to_f64();
                    let v01 = src[y0 * s.w + x1].to_f64();
                    let v10 = src[y1 * s.w + x0].to_f64();
                    let v11 = src[y1 * s.w + x1].to_f64();
                    let top = v00 * (1.0 - fx) + v01 * fx;
                    let bot = v10 * (1.0 - fx) + v11 * fx;
                    data.push(E::from_f64(top * (1.0 - fy) + bot * fy));
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            data,
            &[self],
            BilinearBack { input: s, out },
        ))
    }
}
