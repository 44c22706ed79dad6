//! Feature expansion by transposed convolution with the feature map itself as
//! the filter, and the block that wraps it.
//!
//! Pasting a copy of `F` at every offset `(a, b)` of a map `s`, weighted by
//! `s(a, b)`, and summing the copies is exactly a stride-1 transposed
//! convolution whose input is `s` and whose filter is `F`. The output has
//! `hi + H - 1` rows for an `hi`-row map, so a `(H + 1) x (W + 1)` similarity
//! map doubles the feature size.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{same3x3, Eager, Ops};
use crate::error::{shape_err, Result};
use crate::params::{Bound, Conv};
use crate::selfsim::{sim_transform_ops, SimTransformParams};
use crate::tensor::{bilinear_upsample, conv2d, transposed_conv2d, ConvSpec, Scalar, Tensor};

/// `[N, C, hi + H - 1, wi + W - 1]` output of an expansion.
pub type ExpandedFeatureMap<T = f32> = Tensor<T>;

fn check_pair<T: Scalar>(f: &Tensor<T>, s: &Tensor<T>) -> Result<()> {
    f.require_nonempty("expansion features")?;
    s.require_nonempty("expansion map")?;
    if s.channels() != 1 || s.batch() != f.batch() {
        return Err(shape_err!(
            "expansion map {:?} does not fit features {:?}",
            s.dims(),
            f.dims()
        ));
    }
    Ok(())
}

fn check_sim_dims<T: Scalar>(f: &Tensor<T>, s: &Tensor<T>) -> Result<()> {
    let [_, _, h, w] = f.dims();
    if h % 2 != 0 || w % 2 != 0 || s.height() != h + 1 || s.width() != w + 1 {
        return Err(shape_err!(
            "similarity map {:?} for features {:?}; need even H, W and an (H+1)x(W+1) map",
            s.dims(),
            f.dims()
        ));
    }
    Ok(())
}

/// Explicit paste-and-accumulate loop, `G(c, i + a, j + b) += s(a, b) F(c, i, j)`.
/// With an `(H + 1) x (W + 1)` similarity map, `a = p + H/2` for shift `p`.
pub fn paste_accumulate_reference<T: Scalar>(
    f: &Tensor<T>,
    s: &Tensor<T>,
) -> Result<ExpandedFeatureMap<T>> {
    check_pair(f, s)?;
    check_sim_dims(f, s)?;
    Ok(paste_accumulate(f, s))
}

/// The paste loop for any map size.
pub fn paste_accumulate<T: Scalar>(f: &Tensor<T>, s: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = f.dims();
    let [_, _, hi, wi] = s.dims();
    let (oh, ow) = (hi + h - 1, wi + w - 1);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let buf = out.data_mut();
    for item in 0..n {
        for a in 0..hi {
            for b in 0..wi {
                let weight = s.at(item, 0, a, b);
                if weight == T::zero() {
                    continue;
                }
                for ch in 0..c {
                    for i in 0..h {
                        let dst = ((item * c + ch) * oh + i + a) * ow + b;
                        let src = f.index(item, ch, i, 0);
                        for (d, &v) in buf[dst..dst + w].iter_mut().zip(&f.data()[src..src + w]) {
                            *d += weight * v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Per-item transposed convolution of `s` with `F` as a `[1, C, H, W]` filter.
pub(crate) fn expand_kernel<T: Scalar>(f: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair(f, s)?;
    let items = (0..f.batch())
        .map(|i| transposed_conv2d(&s.item(i)?, &f.item(i)?, None))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}

/// Gradients of [`expand_kernel`] with respect to the features and the map.
pub(crate) fn expand_backward<T: Scalar>(
    f: &Tensor<T>,
    s: &Tensor<T>,
    g: &Tensor<T>,
    need_f: bool,
    need_s: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let [n, c, h, w] = f.dims();
    let valid = ConvSpec::default();
    let mut gf = Vec::with_capacity(n);
    let mut gs = Vec::with_capacity(n);
    for i in 0..n {
        let gi = g.item(i)?;
        if need_f {
            let [_, _, oh, ow] = gi.dims();
            let per_channel = gi.reshape([c, 1, oh, ow])?;
            gf.push(conv2d(&per_channel, &s.item(i)?, None, &valid)?.reshape([1, c, h, w])?);
        }
        if need_s {
            gs.push(conv2d(&gi, &f.item(i)?, None, &valid)?);
        }
    }
    Ok((
        need_f.then(|| Tensor::stack(&gf)).transpose()?,
        need_s.then(|| Tensor::stack(&gs)).transpose()?,
    ))
}

/// Expansion of `F` by a similarity map (or, for any `hi x wi` map, by a
/// noise map) through a transposed convolution.
pub fn expand_via_transposed_conv<T: Scalar>(
    f: &Tensor<T>,
    s: &Tensor<T>,
) -> Result<ExpandedFeatureMap<T>> {
    expand_kernel(f, s)
}

/// Learnable parts of one expansion block.
#[derive(Debug, Clone, PartialEq)]
pub struct TransConvBlockParams<W> {
    pub filter_conv1: Conv<W>,
    pub filter_conv2: Conv<W>,
    /// `C -> C` linear map on the pooled features, stored as a 1x1 conv.
    pub bias_fc: Conv<W>,
    pub sim_transform: SimTransformParams<W>,
    pub output_conv: Conv<W>,
}

impl<N: Clone> TransConvBlockParams<N> {
    pub fn from_bound(bound: &Bound<N>, prefix: &str) -> Result<Self> {
        Ok(TransConvBlockParams {
            filter_conv1: bound.conv(&format!("{prefix}.filter_conv1"), true)?,
            filter_conv2: bound.conv(&format!("{prefix}.filter_conv2"), true)?,
            bias_fc: bound.conv(&format!("{prefix}.bias_fc"), true)?,
            sim_transform: SimTransformParams::from_bound(bound, prefix)?,
            output_conv: bound.conv(&format!("{prefix}.output_conv"), true)?,
        })
    }
}

pub fn transconv_block_ops<T: Scalar, O: Ops<T>>(
    ops: &O,
    encoded: &O::Node,
    map: &O::Node,
    p: &TransConvBlockParams<O::Node>,
) -> Result<O::Node> {
    let spec = same3x3();
    let filter = ops.conv2d(
        encoded,
        &p.filter_conv1.weight,
        p.filter_conv1.bias.as_ref(),
        &spec,
    )?;
    let filter = ops.relu(&filter)?;
    let filter = ops.conv2d(
        &filter,
        &p.filter_conv2.weight,
        p.filter_conv2.bias.as_ref(),
        &spec,
    )?;
    let input_map = sim_transform_ops(ops, map, &p.sim_transform)?;
    let pooled = ops.avg_pool_global(encoded)?;
    let bias = ops.conv2d(
        &pooled,
        &p.bias_fc.weight,
        p.bias_fc.bias.as_ref(),
        &ConvSpec::default(),
    )?;
    let expanded = ops.expand(&filter, &input_map)?;
    let expanded = ops.add_channel_bias(&expanded, &bias)?;
    let out = ops.conv2d(
        &expanded,
        &p.output_conv.weight,
        p.output_conv.bias.as_ref(),
        &spec,
    )?;
    ops.relu(&out)
}

/// Full block: filter branch, transformed map, pooled bias, expansion,
/// output conv and ReLU.
pub fn transconv_block_forward<T: Scalar>(
    encoded: &Tensor<T>,
    sim_or_noise: &Tensor<T>,
    params: &TransConvBlockParams<Tensor<T>>,
) -> Result<ExpandedFeatureMap<T>> {
    transconv_block_ops(&Eager, encoded, sim_or_noise, params)
}

/// Input maps for the three expansion blocks in noise mode.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseMaps<T: Scalar = f32> {
    /// `n5h x n5w`, at the 1/16 scale.
    pub scale16: Tensor<T>,
    /// `(2 n5h - 1) x (2 n5w - 1)`.
    pub scale8: Tensor<T>,
    /// `(4 n5h - 3) x (4 n5w - 3)`.
    pub scale4: Tensor<T>,
}

impl<T: Scalar> NoiseMaps<T> {
    /// Maps whose sizes match the self-similarity maps of an `h x w` input.
    pub fn base_for_input(h: usize, w: usize) -> (usize, usize) {
        (h / 16 + 1, w / 16 + 1)
    }

    /// Repeats the (batch 1) maps for `n` items.
    pub fn repeat(&self, n: usize) -> Result<Self> {
        let rep = |t: &Tensor<T>| Tensor::stack(&vec![t.clone(); n]);
        Ok(NoiseMaps {
            scale16: rep(&self.scale16)?,
            scale8: rep(&self.scale8)?,
            scale4: rep(&self.scale4)?,
        })
    }
}

/// Standard-normal map at the smallest scale, bilinearly resized for the
/// other two. Samples are drawn in row-major order.
pub fn make_noise_maps<T: Scalar>(
    base: (usize, usize),
    rng: &mut impl Rng,
) -> Result<NoiseMaps<T>> {
    let (h, w) = base;
    if h == 0 || w == 0 {
        return Err(shape_err!(
            "noise base size must be at least 1x1, got {h}x{w}"
        ));
    }
    let scale16 = Tensor::from_fn([1, 1, h, w], |_, _, _, _| {
        T::lit(rng.sample::<f64, _>(StandardNormal))
    });
    let scale8 = bilinear_upsample(&scale16, 2 * h - 1, 2 * w - 1)?;
    let scale4 = bilinear_upsample(&scale16, 4 * h - 3, 4 * w - 3)?;
    Ok(NoiseMaps {
        scale16,
        scale8,
        scale4,
    })
}
