//! Bilinear resampling with half-pixel centers (`align_corners = false`).

use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

/// Two source taps and the weight of the second one.
#[derive(Debug, Clone, Copy)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn taps<T: Scalar>(input: usize, output: usize) -> Vec<Tap<T>> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: T::lit(src - lo as f64),
            }
        })
        .collect()
}

/// Resizes every plane to `out_h x out_w`. Source coordinate for output
/// index `d` is `(d + 0.5) * in / out - 0.5`, clamped to `[0, in - 1]`.
pub fn bilinear_upsample<T: Scalar>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims();
    if out_h == 0 || out_w == 0 {
        return Err(shape_err!(
            "bilinear target {out_h}x{out_w} must be positive"
        ));
    }
    input.require_nonempty("bilinear_upsample")?;
    let ty = taps::<T>(h, out_h);
    let tx = taps::<T>(w, out_w);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in input.data().chunks(h * w) {
        for y in &ty {
            let (r0, r1) = (
                &plane[y.lo * w..(y.lo + 1) * w],
                &plane[y.hi * w..(y.hi + 1) * w],
            );
            for x in &tx {
                let top = r0[x.lo] + (r0[x.hi] - r0[x.lo]) * x.frac;
                let bot = r1[x.lo] + (r1[x.hi] - r1[x.lo]) * x.frac;
                out.push(top + (bot - top) * y.frac);
            }
        }
    }
    Tensor::from_vec([n, c, out_h, out_w], out)
}

/// Doubles both spatial dims.
pub fn bilinear_upsample2x<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    bilinear_upsample(input, input.height() * 2, input.width() * 2)
}

/// Adjoint of [`bilinear_upsample`]: scatters `grad` back to `input_dims`.
pub fn bilinear_upsample_backward<T: Scalar>(
    grad: &Tensor<T>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<T>> {
    let [n, c, out_h, out_w] = grad.dims();
    let ty = taps::<T>(in_h, out_h);
    let tx = taps::<T>(in_w, out_w);
    let mut out = vec![T::zero(); n * c * in_h * in_w];
    for (g, dst) in grad
        .data()
        .chunks(out_h * out_w)
        .zip(out.chunks_mut(in_h * in_w))
    {
        for (yi, y) in ty.iter().enumerate() {
            for (xi, x) in tx.iter().enumerate() {
                let v = g[yi * out_w + xi];
                let (wy1, wx1) = (y.frac, x.frac);
                let (wy0, wx0) = (T::one() - wy1, T::one() - wx1);
                dst[y.lo * in_w + x.lo] += v * wy0 * wx0;
                dst[y.lo * in_w + x.hi] += v * wy0 * wx1;
                dst[y.hi * in_w + x.lo] += v * wy1 * wx0;
                dst[y.hi * in_w + x.hi] += v * wy1 * wx1;
            }
        }
    }
    Tensor::from_vec([n, c, in_h, in_w], out)
}
