use rand::Rng;

use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

/// Spatial mean per channel: `[N, C, H, W]` to `[N, C, 1, 1]`.
pub fn avg_pool_global<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims();
    if h == 0 || w == 0 {
        return Err(shape_err!(
            "avg_pool_global on empty spatial dims {:?}",
            input.dims()
        ));
    }
    let plane = h * w;
    let denom = T::from_usize(plane).unwrap();
    let out = input
        .data()
        .chunks(plane)
        .map(|p| p.iter().copied().sum::<T>() / denom)
        .collect();
    Tensor::from_vec([n, c, 1, 1], out)
}

/// Spatial window `[top, top + h) x [left, left + w)` of every plane.
pub fn crop<T: Scalar>(
    input: &Tensor<T>,
    top: usize,
    left: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let [n, c, ih, iw] = input.dims();
    if top + h > ih || left + w > iw {
        return Err(shape_err!(
            "crop {h}x{w} at ({top},{left}) exceeds {ih}x{iw}"
        ));
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    for p in 0..n * c {
        for y in 0..h {
            let start = (p * ih + top + y) * iw + left;
            out.extend_from_slice(&input.data()[start..start + w]);
        }
    }
    Tensor::from_vec([n, c, h, w], out)
}

/// Crop anchored at `(floor((H - ch) / 2), floor((W - cw) / 2))`.
pub fn center_crop<T: Scalar>(input: &Tensor<T>, ch: usize, cw: usize) -> Result<Tensor<T>> {
    let [_, _, h, w] = input.dims();
    if ch > h || cw > w {
        return Err(shape_err!("center crop {ch}x{cw} larger than {h}x{w}"));
    }
    crop(input, (h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// Crop at a uniformly drawn anchor; returns the anchor as `(top, left)`.
pub fn random_crop<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    ch: usize,
    cw: usize,
    rng: &mut R,
) -> Result<(Tensor<T>, (usize, usize))> {
    let [_, _, h, w] = input.dims();
    if ch > h || cw > w {
        return Err(shape_err!("random crop {ch}x{cw} larger than {h}x{w}"));
    }
    let anchor = draw_anchor(h, w, ch, cw, rng);
    Ok((crop(input, anchor.0, anchor.1, ch, cw)?, anchor))
}

/// Uniform anchor over `[0, H - ch] x [0, W - cw]`, row drawn first.
pub(crate) fn draw_anchor<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    ch: usize,
    cw: usize,
    rng: &mut R,
) -> (usize, usize) {
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    (top, left)
}
