//! Cross-correlation (no filter flip) via chunked im2col + GEMM.

use super::{Dims, Scalar, Tensor};
use crate::error::{shape_err, Result};

/// Upper bound on the number of scalars in one im2col chunk.
const COLS_BUDGET: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PaddingMode {
    #[default]
    None,
    Zero {
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    },
    /// Zero padding whose outputs are re-weighted by
    /// `(kernel taps) / (in-bounds taps)` before the bias is added.
    PartialZero {
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    },
}

impl PaddingMode {
    pub fn zero(p: usize) -> Self {
        PaddingMode::Zero {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    pub fn partial(p: usize) -> Self {
        PaddingMode::PartialZero {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// (top, bottom, left, right)
    pub fn amounts(self) -> (usize, usize, usize, usize) {
        match self {
            PaddingMode::None => (0, 0, 0, 0),
            PaddingMode::Zero {
                top,
                bottom,
                left,
                right,
            }
            | PaddingMode::PartialZero {
                top,
                bottom,
                left,
                right,
            } => (top, bottom, left, right),
        }
    }

    pub fn is_partial(self) -> bool {
        matches!(self, PaddingMode::PartialZero { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: PaddingMode,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: 1,
            padding: PaddingMode::None,
        }
    }
}

impl ConvSpec {
    pub fn new(stride: usize, padding: PaddingMode) -> Self {
        ConvSpec { stride, padding }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pt: usize,
    pl: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(input: Dims, filter: Dims, spec: &ConvSpec) -> Result<Self> {
        let [n, cin, h, w] = input;
        let [cout, fcin, kh, kw] = filter;
        if input.contains(&0) || filter.contains(&0) {
            return Err(shape_err!(
                "conv2d on empty tensor: input {input:?}, filter {filter:?}"
            ));
        }
        if fcin != cin {
            return Err(shape_err!(
                "conv2d filter expects {fcin} input channels, input has {cin}"
            ));
        }
        if spec.stride == 0 {
            return Err(shape_err!("conv2d stride must be positive"));
        }
        let (pt, pb, pl, pr) = spec.padding.amounts();
        let (hp, wp) = (h + pt + pb, w + pl + pr);
        if kh > hp || kw > wp {
            return Err(shape_err!(
                "kernel {kh}x{kw} does not fit padded input {hp}x{wp}"
            ));
        }
        Ok(Geometry {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride: spec.stride,
            pt,
            pl,
            ho: (hp - kh) / spec.stride + 1,
            wo: (wp - kw) / spec.stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn chunk(&self) -> usize {
        (COLS_BUDGET / self.k()).clamp(1, self.positions())
    }

    fn out_dims(&self) -> Dims {
        [self.n, self.cout, self.ho, self.wo]
    }

    /// Input coordinate touched by output `o` and tap `d` along one axis.
    #[inline]
    fn src(o: usize, d: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        let y = (o * stride + d).checked_sub(pad)?;
        (y < len).then_some(y)
    }

    /// Output columns `[lo, hi)` whose tap `dx` lands inside the input row.
    #[inline]
    fn valid_cols(&self, dx: usize) -> (usize, usize) {
        let lo = if self.pl > dx {
            (self.pl - dx).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if self.w + self.pl > dx {
            (self.w + self.pl - dx - 1) / self.stride + 1
        } else {
            0
        };
        (lo.min(self.wo), hi.min(self.wo))
    }

    /// Calls `f(oy, ox0, ox1, offset)` for each output-row segment of the
    /// position range `[p0, p1)`; `offset` is the segment start relative to `p0`.
    #[inline]
    fn segments(&self, p0: usize, p1: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let mut p = p0;
        while p < p1 {
            let oy = p / self.wo;
            let ox0 = p % self.wo;
            let ox1 = (p1 - oy * self.wo).min(self.wo);
            f(oy, ox0, ox1, p - p0);
            p = oy * self.wo + ox1;
        }
    }

    /// Fills `cols[K, p1 - p0]` for output positions `[p0, p1)` of one item.
    fn im2col<T: Scalar>(&self, x: &[T], p0: usize, p1: usize, cols: &mut [T]) {
        let len = p1 - p0;
        let s = self.stride;
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let row = ((ci * self.kh + dy) * self.kw + dx) * len;
                    let dst = &mut cols[row..row + len];
                    let (vlo, vhi) = self.valid_cols(dx);
                    self.segments(p0, p1, |oy, ox0, ox1, off| {
                        let seg = &mut dst[off..off + ox1 - ox0];
                        let Some(y) = Self::src(oy, dy, s, self.pt, self.h) else {
                            seg.fill(T::zero());
                            return;
                        };
                        let (a, b) = (
                            vlo.clamp(ox0, ox1),
                            vhi.clamp(ox0, ox1).max(vlo.clamp(ox0, ox1)),
                        );
                        seg[..a - ox0].fill(T::zero());
                        seg[b - ox0..].fill(T::zero());
                        if a < b {
                            let src = &plane[y * self.w..(y + 1) * self.w];
                            let x0 = a * s + dx - self.pl;
                            let out = &mut seg[a - ox0..b - ox0];
                            if s == 1 {
                                out.copy_from_slice(&src[x0..x0 + (b - a)]);
                            } else {
                                for (k, o) in out.iter_mut().enumerate() {
                                    *o = src[x0 + k * s];
                                }
                            }
                        }
                    });
                }
            }
        }
    }

    /// Scatter-adds `cols[K, p1 - p0]` back onto one item's input grid.
    fn col2im<T: Scalar>(&self, cols: &[T], p0: usize, p1: usize, x: &mut [T]) {
        let len = p1 - p0;
        let s = self.stride;
        for ci in 0..self.cin {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let row = ((ci * self.kh + dy) * self.kw + dx) * len;
                    let src = &cols[row..row + len];
                    let (vlo, vhi) = self.valid_cols(dx);
                    self.segments(p0, p1, |oy, ox0, ox1, off| {
                        let Some(y) = Self::src(oy, dy, s, self.pt, self.h) else {
                            return;
                        };
                        let (a, b) = (vlo.clamp(ox0, ox1), vhi.clamp(ox0, ox1));
                        if a >= b {
                            return;
                        }
                        let dst = &mut plane[y * self.w..(y + 1) * self.w];
                        let x0 = a * s + dx - self.pl;
                        let seg = &src[off + a - ox0..off + b - ox0];
                        for (k, &v) in seg.iter().enumerate() {
                            dst[x0 + k * s] += v;
                        }
                    });
                }
            }
        }
    }

    fn ratio<T: Scalar>(&self) -> Vec<T> {
        let count = |o: usize, k: usize, pad: usize, len: usize| {
            (0..k)
                .filter(|&d| Self::src(o, d, self.stride, pad, len).is_some())
                .count()
        };
        let rows: Vec<usize> = (0..self.ho)
            .map(|o| count(o, self.kh, self.pt, self.h))
            .collect();
        let cols: Vec<usize> = (0..self.wo)
            .map(|o| count(o, self.kw, self.pl, self.w))
            .collect();
        let taps = T::from_usize(self.kh * self.kw).unwrap();
        let mut out = Vec::with_capacity(self.positions());
        for &r in &rows {
            for &c in &cols {
                out.push(if r * c == 0 {
                    T::zero()
                } else {
                    taps / T::from_usize(r * c).unwrap()
                });
            }
        }
        out
    }
}

/// Per-output-position partial-padding weights, `Ho * Wo` values.
/// All ones unless `spec.padding` is [`PaddingMode::PartialZero`].
pub fn partial_ratio<T: Scalar>(input: Dims, filter: Dims, spec: &ConvSpec) -> Result<Vec<T>> {
    let g = Geometry::new(input, filter, spec)?;
    Ok(if spec.padding.is_partial() {
        g.ratio()
    } else {
        vec![T::one(); g.positions()]
    })
}

fn bias_values<T: Scalar>(bias: Option<&Tensor<T>>, cout: usize) -> Result<Option<&[T]>> {
    match bias {
        Some(b) if b.numel() != cout => Err(shape_err!(
            "bias has {} values, filter has {cout} output channels",
            b.numel()
        )),
        Some(b) => Ok(Some(b.data())),
        None => Ok(None),
    }
}

/// 2-D cross-correlation: `input [N, Cin, H, W]`, `filter [Cout, Cin, Kh, Kw]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    filter: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input.dims(), filter.dims(), spec)?;
    let bias = bias_values(bias, g.cout)?;
    let (k, pos, chunk) = (g.k(), g.positions(), g.chunk());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * pos;
    let mut out = vec![T::zero(); g.n * out_len];
    let mut cols = vec![T::zero(); k * chunk];
    for i in 0..g.n {
        let x = &input.data()[i * in_len..(i + 1) * in_len];
        let y = &mut out[i * out_len..(i + 1) * out_len];
        let mut p0 = 0;
        while p0 < pos {
            let p1 = (p0 + chunk).min(pos);
            let len = p1 - p0;
            g.im2col(x, p0, p1, &mut cols[..k * len]);
            T::gemm(
                g.cout,
                k,
                len,
                T::one(),
                filter.data(),
                (k as isize, 1),
                &cols[..k * len],
                (len as isize, 1),
                T::zero(),
                &mut y[p0..],
                (pos as isize, 1),
            );
            p0 = p1;
        }
        if spec.padding.is_partial() {
            let ratio: Vec<T> = g.ratio();
            for row in y.chunks_mut(pos) {
                for (v, &r) in row.iter_mut().zip(&ratio) {
                    *v *= r;
                }
            }
        }
        if let Some(b) = bias {
            for (row, &bv) in y.chunks_mut(pos).zip(b) {
                for v in row {
                    *v += bv;
                }
            }
        }
    }
    Tensor::from_vec(g.out_dims(), out)
}

fn scaled_grad<T: Scalar>(
    g: &Geometry,
    grad_out: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    if grad_out.dims() != g.out_dims() {
        return Err(shape_err!(
            "output gradient {:?} does not match conv output {:?}",
            grad_out.dims(),
            g.out_dims()
        ));
    }
    if !spec.padding.is_partial() {
        return Ok(grad_out.clone());
    }
    let ratio: Vec<T> = g.ratio();
    let mut scaled = grad_out.clone();
    for row in scaled.data_mut().chunks_mut(g.positions()) {
        for (v, &r) in row.iter_mut().zip(&ratio) {
            *v *= r;
        }
    }
    Ok(scaled)
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_input_grad<T: Scalar>(
    grad_out: &Tensor<T>,
    filter: &Tensor<T>,
    input_dims: Dims,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input_dims, filter.dims(), spec)?;
    let gy = scaled_grad(&g, grad_out, spec)?;
    let (k, pos, chunk) = (g.k(), g.positions(), g.chunk());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * pos;
    let mut grad_in = vec![T::zero(); g.n * in_len];
    let mut cols = vec![T::zero(); k * chunk];
    for i in 0..g.n {
        let gyi = &gy.data()[i * out_len..(i + 1) * out_len];
        let gx = &mut grad_in[i * in_len..(i + 1) * in_len];
        let mut p0 = 0;
        while p0 < pos {
            let p1 = (p0 + chunk).min(pos);
            let len = p1 - p0;
            T::gemm(
                k,
                g.cout,
                len,
                T::one(),
                filter.data(),
                (1, k as isize),
                &gyi[p0..],
                (pos as isize, 1),
                T::zero(),
                &mut cols[..k * len],
                (len as isize, 1),
            );
            g.col2im(&cols[..k * len], p0, p1, gx);
            p0 = p1;
        }
    }
    Tensor::from_vec(input_dims, grad_in)
}

/// Gradient of [`conv2d`] with respect to its filter.
pub fn conv2d_filter_grad<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    filter_dims: Dims,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input.dims(), filter_dims, spec)?;
    let gy = scaled_grad(&g, grad_out, spec)?;
    let (k, pos, chunk) = (g.k(), g.positions(), g.chunk());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * pos;
    let mut grad_w = vec![T::zero(); g.cout * k];
    let mut cols = vec![T::zero(); k * chunk];
    for i in 0..g.n {
        let x = &input.data()[i * in_len..(i + 1) * in_len];
        let gyi = &gy.data()[i * out_len..(i + 1) * out_len];
        let mut p0 = 0;
        while p0 < pos {
            let p1 = (p0 + chunk).min(pos);
            let len = p1 - p0;
            g.im2col(x, p0, p1, &mut cols[..k * len]);
            T::gemm(
                g.cout,
                len,
                k,
                T::one(),
                &gyi[p0..],
                (pos as isize, 1),
                &cols[..k * len],
                (1, len as isize),
                T::one(),
                &mut grad_w,
                (k as isize, 1),
            );
            p0 = p1;
        }
    }
    Tensor::from_vec(filter_dims, grad_w)
}

/// Stride-1 transposed convolution without padding:
/// `input [N, Cin, Hi, Wi]`, `filter [Cin, Cout, Kh, Kw]` gives
/// `[N, Cout, Hi + Kh - 1, Wi + Kw - 1]`, where every input value pastes a
/// scaled copy of its filter slice onto the output grid.
pub fn transposed_conv2d<T: Scalar>(
    input: &Tensor<T>,
    filter: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let [_, cin, _, _] = input.dims();
    let [fcin, _, kh, kw] = filter.dims();
    input.require_nonempty("transposed_conv2d input")?;
    filter.require_nonempty("transposed_conv2d filter")?;
    if fcin != cin {
        return Err(shape_err!(
            "transposed_conv2d filter expects {fcin} input channels, input has {cin}"
        ));
    }
    // Gather form: correlate the fully padded input with the flipped,
    // channel-swapped filter.
    let gather = filter.swap_nc().flip_spatial();
    let spec = ConvSpec::new(
        1,
        PaddingMode::Zero {
            top: kh - 1,
            bottom: kh - 1,
            left: kw - 1,
            right: kw - 1,
        },
    );
    conv2d(input, &gather, bias, &spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(dims: Dims) -> Tensor<f64> {
        let mut k = 0.0;
        Tensor::from_fn(dims, |_, _, _, _| {
            k += 1.0;
            (k * 0.37f64).sin()
        })
    }

    #[test]
    fn constant_sum_case() {
        let x = Tensor::<f32>::ones([1, 1, 3, 3]);
        let w = Tensor::<f32>::ones([1, 1, 2, 2]);
        let y = conv2d(&x, &w, None, &ConvSpec::default()).unwrap();
        assert_eq!(y.dims(), [1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn identity_filter() {
        let x = seq([2, 1, 5, 4]);
        let w = Tensor::<f64>::ones([1, 1, 1, 1]);
        let y = conv2d(&x, &w, None, &ConvSpec::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn rejects_channel_mismatch_and_empty() {
        let x = Tensor::<f32>::ones([1, 2, 3, 3]);
        let w = Tensor::<f32>::ones([1, 3, 2, 2]);
        assert!(conv2d(&x, &w, None, &ConvSpec::default()).is_err());
        let e = Tensor::<f32>::zeros([0, 3, 3, 3]);
        assert!(conv2d(&e, &w, None, &ConvSpec::default()).is_err());
        let big = Tensor::<f32>::ones([1, 2, 4, 4]);
        assert!(conv2d(
            &x,
            &big.reshape([1, 2, 4, 4]).unwrap(),
            None,
            &ConvSpec::default()
        )
        .is_err());
    }

    #[test]
    fn partial_padding_keeps_constants_constant() {
        let x = Tensor::<f64>::full([1, 2, 6, 5], 0.7);
        let w = Tensor::<f64>::ones([3, 2, 3, 3]);
        let y = conv2d(&x, &w, None, &ConvSpec::new(1, PaddingMode::partial(1))).unwrap();
        for &v in y.data() {
            assert!((v - 0.7 * 18.0).abs() < 1e-12, "{v}");
        }
        let z = conv2d(&x, &w, None, &ConvSpec::new(1, PaddingMode::zero(1))).unwrap();
        // corners only see 4 of 9 taps under zero padding
        assert!((z.at(0, 0, 0, 0) - 0.7 * 8.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_input_scales_filter() {
        let x = Tensor::<f32>::full([1, 1, 1, 1], 2.0);
        let w = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = transposed_conv2d(&x, &w, None).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn delta_pastes_filter_at_corner() {
        let x = Tensor::<f32>::from_fn(
            [1, 1, 3, 3],
            |_, _, y, x| if y == 0 && x == 0 { 1.0 } else { 0.0 },
        );
        let w = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = transposed_conv2d(&x, &w, None).unwrap();
        assert_eq!(y.dims(), [1, 1, 4, 4]);
        let expected = [
            1.0, 2.0, 0.0, 0.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(y.data(), &expected);
    }

    #[test]
    fn transposed_output_doubles_feature_size() {
        let s = Tensor::<f32>::ones([1, 1, 5, 5]);
        let f = Tensor::<f32>::ones([1, 7, 4, 4]);
        assert_eq!(
            transposed_conv2d(&s, &f, None).unwrap().dims(),
            [1, 7, 8, 8]
        );
    }

    #[test]
    fn chunking_matches_single_pass() {
        // K = 130 * 9 splits the 40x40 output plane across two chunks.
        let x = seq([1, 130, 40, 40]);
        let w = seq([2, 130, 3, 3]);
        let spec = ConvSpec::new(1, PaddingMode::partial(1));
        let y = conv2d(&x, &w, None, &spec).unwrap();
        for (oy, ox) in [(0, 0), (17, 39), (39, 39), (20, 1)] {
            let mut acc = 0.0;
            let mut taps = 0;
            for c in 0..130 {
                for dy in 0..3 {
                    for dx in 0..3 {
                        let (yy, xx) = (oy as isize + dy - 1, ox as isize + dx - 1);
                        if (0..40).contains(&yy) && (0..40).contains(&xx) {
                            acc += x.at(0, c, yy as usize, xx as usize)
                                * w.at(1, c, dy as usize, dx as usize);
                            if c == 0 {
                                taps += 1;
                            }
                        }
                    }
                }
            }
            let want = acc * 9.0 / taps as f64;
            assert!((y.at(0, 1, oy, ox) - want).abs() < 1e-12);
        }
    }
}
