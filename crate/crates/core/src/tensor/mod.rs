//! Dense rank-4 tensors in NCHW order and the forward kernels built on them.
//!
//! A [`Tensor`] is an immutable value: the buffer sits behind an `Arc`, so
//! clones are cheap and kernels always allocate fresh outputs. The element
//! type is `f32` on production paths and `f64` for gradient checks.

mod conv;
mod gemm;
pub(crate) mod norm;
mod ops;
mod resample;

use std::fmt;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

pub use conv::{
    conv2d, conv2d_filter_grad, conv2d_input_grad, partial_ratio, transposed_conv2d, ConvSpec,
    PaddingMode,
};
pub use norm::{batch_norm, BatchMoments, BatchNormMode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use ops::{avg_pool_global, center_crop, crop, random_crop};
pub use resample::{bilinear_upsample, bilinear_upsample2x, bilinear_upsample_backward};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

/// Element type of a [`Tensor`].
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a * b + beta * c` on strided row/column-major views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        (rsa, csa): (isize, isize),
        b: &[f32],
        (rsb, csb): (isize, isize),
        beta: f32,
        c: &mut [f32],
        (rsc, csc): (isize, isize),
    ) {
        gemm::check_extent(m, k, a.len(), rsa, csa);
        gemm::check_extent(k, n, b.len(), rsb, csb);
        gemm::check_extent(m, n, c.len(), rsc, csc);
        // SAFETY: extents checked above; slices outlive the call.
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

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        (rsa, csa): (isize, isize),
        b: &[f64],
        (rsb, csb): (isize, isize),
        beta: f64,
        c: &mut [f64],
        (rsc, csc): (isize, isize),
    ) {
        gemm::check_extent(m, k, a.len(), rsa, csa);
        gemm::check_extent(k, n, b.len(), rsb, csb);
        gemm::check_extent(m, n, c.len(), rsc, csc);
        // SAFETY: extents checked above; slices outlive the call.
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

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Dimensions in (batch, channels, height, width) order.
pub type Dims = [usize; 4];

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Dims,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("dtype", &T::DTYPE)
            .field("head", &preview)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if data.len() != numel {
            return Err(shape_err!(
                "buffer of {} elements does not fit dims {:?} ({} elements)",
                data.len(),
                dims,
                numel
            ));
        }
        Ok(Tensor {
            dims,
            data: Arc::new(data),
        })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: Dims) -> Self {
        Self::full(dims, T::one())
    }

    pub fn full(dims: Dims, v: T) -> Self {
        Tensor {
            dims,
            data: Arc::new(vec![v; dims.iter().product()]),
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::full([1, 1, 1, 1], v)
    }

    /// Builds a tensor by evaluating `f(n, c, h, w)` at every index.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let [n, c, h, w] = dims;
        let mut data = Vec::with_capacity(n * c * h * w);
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(i, j, y, x));
                    }
                }
            }
        }
        Tensor {
            dims,
            data: Arc::new(data),
        }
    }

    /// Channel vector of length `c`, stored as `[1, c, 1, 1]`.
    pub fn channel_vector(values: Vec<T>) -> Self {
        let c = values.len();
        Tensor {
            dims: [1, c, 1, 1],
            data: Arc::new(values),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; copies the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cc, hh, ww] = self.dims;
        ((n * cc + c) * hh + h) * ww + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    /// Same buffer, new dims with the same element count.
    pub fn reshape(&self, dims: Dims) -> Result<Self> {
        if dims.iter().product::<usize>() != self.numel() {
            return Err(shape_err!("cannot reshape {:?} to {:?}", self.dims, dims));
        }
        Ok(Tensor {
            dims,
            data: Arc::clone(&self.data),
        })
    }

    /// Rejects tensors with any zero dimension.
    pub fn require_nonempty(&self, what: &str) -> Result<()> {
        if self.is_empty() {
            Err(shape_err!("{what}: empty tensor {:?}", self.dims))
        } else {
            Ok(())
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims,
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dims != other.dims {
            return Err(shape_err!(
                "elementwise op on {:?} and {:?}",
                self.dims,
                other.dims
            ));
        }
        Ok(Tensor {
            dims: self.dims,
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn leaky_relu(&self, slope: T) -> Self {
        self.map(|v| if v > T::zero() { v } else { v * slope })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.numel().max(1)).unwrap()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.dims != other.dims {
            return Err(shape_err!("dot of {:?} and {:?}", self.dims, other.dims));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: Arc::new(
                self.data
                    .iter()
                    .map(|&v| U::from_f64(v.as_f64()).unwrap_or(U::nan()))
                    .collect(),
            ),
        }
    }

    /// Batch item `n` as a `[1, C, H, W]` tensor.
    pub fn item(&self, n: usize) -> Result<Self> {
        let [nn, c, h, w] = self.dims;
        if n >= nn {
            return Err(shape_err!("item {n} out of range for batch {nn}"));
        }
        let len = c * h * w;
        Tensor::from_vec([1, c, h, w], self.data[n * len..(n + 1) * len].to_vec())
    }

    /// Stacks `[1, C, H, W]` (or larger) tensors along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| shape_err!("stack of zero tensors"))?;
        let [_, c, h, w] = first.dims;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            if t.dims[1..] != [c, h, w] {
                return Err(shape_err!("stack of {:?} with {:?}", first.dims, t.dims));
            }
            n += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec([n, c, h, w], data)
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        let [n, ca, h, w] = a.dims;
        let [nb, cb, hb, wb] = b.dims;
        if (n, h, w) != (nb, hb, wb) {
            return Err(shape_err!(
                "channel concat of {:?} and {:?}",
                a.dims,
                b.dims
            ));
        }
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            data.extend_from_slice(&a.data[i * ca * h * w..(i + 1) * ca * h * w]);
            data.extend_from_slice(&b.data[i * cb * h * w..(i + 1) * cb * h * w]);
        }
        Tensor::from_vec([n, ca + cb, h, w], data)
    }

    /// Sums channels into a single channel.
    pub fn sum_channels(&self) -> Self {
        let [n, c, h, w] = self.dims;
        let plane = h * w;
        let mut out = vec![T::zero(); n * plane];
        for i in 0..n {
            for ch in 0..c {
                let src = &self.data[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                for (o, &s) in out[i * plane..(i + 1) * plane].iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
        Tensor {
            dims: [n, 1, h, w],
            data: Arc::new(out),
        }
    }

    /// Adds a per-channel bias; `bias` holds either `C` values shared by the
    /// batch or `N * C` values, one row per item.
    pub fn add_channel_bias(&self, bias: &Self) -> Result<Self> {
        let [n, c, h, w] = self.dims;
        let per_item = if bias.numel() == c {
            false
        } else if bias.numel() == n * c {
            true
        } else {
            return Err(shape_err!(
                "bias with {} values for {:?}",
                bias.numel(),
                self.dims
            ));
        };
        let plane = h * w;
        let mut out = self.data.as_ref().clone();
        for i in 0..n {
            for ch in 0..c {
                let b = bias.data[if per_item { i * c + ch } else { ch }];
                for v in &mut out[(i * c + ch) * plane..(i * c + ch + 1) * plane] {
                    *v += b;
                }
            }
        }
        Tensor::from_vec(self.dims, out)
    }

    /// Zero-pads the spatial dims.
    pub fn pad(&self, top: usize, bottom: usize, left: usize, right: usize) -> Self {
        let [n, c, h, w] = self.dims;
        let (oh, ow) = (h + top + bottom, w + left + right);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..h {
                let src = &self.data[(p * h + y) * w..(p * h + y + 1) * w];
                let dst = (p * oh + y + top) * ow + left;
                out[dst..dst + w].copy_from_slice(src);
            }
        }
        Tensor {
            dims: [n, c, oh, ow],
            data: Arc::new(out),
        }
    }

    /// Reverses both spatial axes of every plane.
    pub fn flip_spatial(&self) -> Self {
        let [n, c, h, w] = self.dims;
        Tensor::from_fn([n, c, h, w], |i, j, y, x| {
            self.at(i, j, h - 1 - y, w - 1 - x)
        })
    }

    /// Swaps the first two axes.
    pub fn swap_nc(&self) -> Self {
        let [n, c, h, w] = self.dims;
        Tensor::from_fn([c, n, h, w], |i, j, y, x| self.at(j, i, y, x))
    }
}
