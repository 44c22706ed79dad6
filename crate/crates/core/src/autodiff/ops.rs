//! The differentiable operation set.
//!
//! Network code is written once against [`Ops`] and runs either eagerly
//! ([`Eager`], values are plain tensors and intermediates are dropped as soon
//! as they go out of scope) or recorded on a [`Tape`] for differentiation.

use super::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::expansion;
use crate::selfsim;
use crate::tensor::{
    self, bilinear_upsample, bilinear_upsample_backward, conv2d, conv2d_filter_grad,
    conv2d_input_grad, transposed_conv2d, BatchMoments, ConvSpec, Dims, PaddingMode, RunningStats,
    Scalar, Tensor,
};

/// Source item and top-left corner of one crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropAnchor {
    pub item: usize,
    pub top: usize,
    pub left: usize,
}

pub trait Ops<T: Scalar> {
    type Node: Clone;

    /// Trainable input: receives a gradient on a tape.
    fn param(&self, t: Tensor<T>) -> Result<Self::Node>;
    fn constant(&self, t: Tensor<T>) -> Result<Self::Node>;
    fn value(&self, n: &Self::Node) -> Tensor<T>;
    fn dims(&self, n: &Self::Node) -> Dims {
        self.value(n).dims()
    }

    fn conv2d(
        &self,
        x: &Self::Node,
        w: &Self::Node,
        b: Option<&Self::Node>,
        spec: &ConvSpec,
    ) -> Result<Self::Node>;
    fn transposed_conv2d(
        &self,
        x: &Self::Node,
        w: &Self::Node,
        b: Option<&Self::Node>,
    ) -> Result<Self::Node>;
    /// Per-item transposed convolution with the features as filter.
    fn expand(&self, features: &Self::Node, input_map: &Self::Node) -> Result<Self::Node>;
    fn selfsim(&self, features: &Self::Node) -> Result<Self::Node>;
    fn bilinear(&self, x: &Self::Node, out_h: usize, out_w: usize) -> Result<Self::Node>;
    fn avg_pool_global(&self, x: &Self::Node) -> Result<Self::Node>;
    fn relu(&self, x: &Self::Node) -> Result<Self::Node>;
    fn leaky_relu(&self, x: &Self::Node, slope: T) -> Result<Self::Node>;
    fn add(&self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn sub(&self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn mul(&self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn scale(&self, x: &Self::Node, k: T) -> Result<Self::Node>;
    fn add_scalar(&self, x: &Self::Node, k: T) -> Result<Self::Node>;
    fn abs(&self, x: &Self::Node) -> Result<Self::Node>;
    /// Sum of all entries as a `[1, 1, 1, 1]` scalar.
    fn sum(&self, x: &Self::Node) -> Result<Self::Node>;
    fn mean(&self, x: &Self::Node) -> Result<Self::Node>;
    /// Adds `C` (shared) or `N * C` (per item) bias values per channel.
    fn add_channel_bias(&self, x: &Self::Node, bias: &Self::Node) -> Result<Self::Node>;
    /// Gathers `h x w` crops into a new batch, one item per anchor.
    fn crops(
        &self,
        x: &Self::Node,
        anchors: &[CropAnchor],
        h: usize,
        w: usize,
    ) -> Result<Self::Node>;
    fn concat_channels(&self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    /// Per-item `C x C` Gram matrix of the `C x HW` feature matrix, `[N, 1, C, C]`.
    fn gram(&self, x: &Self::Node) -> Result<Self::Node>;
    fn batch_norm_train(
        &self,
        x: &Self::Node,
        gamma: &Self::Node,
        beta: &Self::Node,
        eps: T,
    ) -> Result<(Self::Node, BatchMoments<T>)>;
    fn batch_norm_eval(
        &self,
        x: &Self::Node,
        gamma: &Self::Node,
        beta: &Self::Node,
        stats: &RunningStats<T>,
        eps: T,
    ) -> Result<Self::Node>;
}

/// Immediate evaluation without gradient bookkeeping.
#[derive(Debug, Clone, Copy, Default)]
pub struct Eager;

fn channel_sums<T: Scalar>(g: &Tensor<T>, per_item: bool) -> Tensor<T> {
    let [n, c, h, w] = g.dims();
    let plane = h * w;
    let mut out = vec![T::zero(); if per_item { n * c } else { c }];
    for (idx, p) in g.data().chunks(plane).enumerate() {
        let slot = if per_item { idx } else { idx % c };
        out[slot] += p.iter().copied().sum();
    }
    if per_item {
        Tensor::from_vec([n, c, 1, 1], out).expect("sized")
    } else {
        Tensor::channel_vector(out)
    }
}

fn gather_crops<T: Scalar>(
    x: &Tensor<T>,
    anchors: &[CropAnchor],
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let [n, c, ih, iw] = x.dims();
    if anchors.is_empty() {
        return Err(shape_err!("crops with no anchors"));
    }
    let mut out = Vec::with_capacity(anchors.len() * c * h * w);
    for a in anchors {
        if a.item >= n || a.top + h > ih || a.left + w > iw {
            return Err(shape_err!("crop {h}x{w} at {a:?} outside {:?}", x.dims()));
        }
        for ch in 0..c {
            for y in 0..h {
                let start = x.index(a.item, ch, a.top + y, a.left);
                out.extend_from_slice(&x.data()[start..start + w]);
            }
        }
    }
    Tensor::from_vec([anchors.len(), c, h, w], out)
}

fn scatter_crops<T: Scalar>(g: &Tensor<T>, anchors: &[CropAnchor], dims: Dims) -> Tensor<T> {
    let [_, c, h, w] = g.dims();
    let mut out = Tensor::zeros(dims);
    let buf = out.data_mut();
    let [_, _, ih, iw] = dims;
    for (k, a) in anchors.iter().enumerate() {
        for ch in 0..c {
            for y in 0..h {
                let dst = ((a.item * c + ch) * ih + a.top + y) * iw + a.left;
                let src = ((k * c + ch) * h + y) * w;
                for (d, &s) in buf[dst..dst + w].iter_mut().zip(&g.data()[src..src + w]) {
                    *d += s;
                }
            }
        }
    }
    out
}

fn gram_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let mut out = vec![T::zero(); n * c * c];
    for i in 0..n {
        let xi = &x.data()[i * c * hw..(i + 1) * c * hw];
        T::gemm(
            c,
            hw,
            c,
            T::one(),
            xi,
            (hw as isize, 1),
            xi,
            (1, hw as isize),
            T::zero(),
            &mut out[i * c * c..(i + 1) * c * c],
            (c as isize, 1),
        );
    }
    Tensor::from_vec([n, 1, c, c], out)
}

fn gram_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let mut out = vec![T::zero(); x.numel()];
    for i in 0..n {
        let gi = &g.data()[i * c * c..(i + 1) * c * c];
        let sym: Vec<T> = (0..c * c)
            .map(|k| gi[k] + gi[(k % c) * c + k / c])
            .collect();
        T::gemm(
            c,
            c,
            hw,
            T::one(),
            &sym,
            (c as isize, 1),
            &x.data()[i * c * hw..(i + 1) * c * hw],
            (hw as isize, 1),
            T::zero(),
            &mut out[i * c * hw..(i + 1) * c * hw],
            (hw as isize, 1),
        );
    }
    Tensor::from_vec(x.dims(), out)
}

fn scalar_of<T: Scalar>(v: T) -> Tensor<T> {
    Tensor::scalar(v)
}

impl<T: Scalar> Ops<T> for Eager {
    type Node = Tensor<T>;

    fn param(&self, t: Tensor<T>) -> Result<Tensor<T>> {
        Ok(t)
    }

    fn constant(&self, t: Tensor<T>) -> Result<Tensor<T>> {
        Ok(t)
    }

    fn value(&self, n: &Tensor<T>) -> Tensor<T> {
        n.clone()
    }

    fn dims(&self, n: &Tensor<T>) -> Dims {
        n.dims()
    }

    fn conv2d(
        &self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: Option<&Tensor<T>>,
        spec: &ConvSpec,
    ) -> Result<Tensor<T>> {
        conv2d(x, w, b, spec)
    }

    fn transposed_conv2d(
        &self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        transposed_conv2d(x, w, b)
    }

    fn expand(&self, features: &Tensor<T>, input_map: &Tensor<T>) -> Result<Tensor<T>> {
        expansion::expand_kernel(features, input_map)
    }

    fn selfsim(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        selfsim::fast_scores(features)
    }

    fn bilinear(&self, x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        bilinear_upsample(x, out_h, out_w)
    }

    fn avg_pool_global(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::avg_pool_global(x)
    }

    fn relu(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.relu())
    }

    fn leaky_relu(&self, x: &Tensor<T>, slope: T) -> Result<Tensor<T>> {
        Ok(x.leaky_relu(slope))
    }

    fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.add(b)
    }

    fn sub(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.sub(b)
    }

    fn mul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.mul(b)
    }

    fn scale(&self, x: &Tensor<T>, k: T) -> Result<Tensor<T>> {
        Ok(x.scale(k))
    }

    fn add_scalar(&self, x: &Tensor<T>, k: T) -> Result<Tensor<T>> {
        Ok(x.map(|v| v + k))
    }

    fn abs(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.map(|v| v.abs()))
    }

    fn sum(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(scalar_of(x.sum()))
    }

    fn mean(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.require_nonempty("mean")?;
        Ok(scalar_of(x.mean()))
    }

    fn add_channel_bias(&self, x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        x.add_channel_bias(bias)
    }

    fn crops(
        &self,
        x: &Tensor<T>,
        anchors: &[CropAnchor],
        h: usize,
        w: usize,
    ) -> Result<Tensor<T>> {
        gather_crops(x, anchors, h, w)
    }

    fn concat_channels(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        Tensor::concat_channels(a, b)
    }

    fn gram(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        gram_forward(x)
    }

    fn batch_norm_train(
        &self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: T,
    ) -> Result<(Tensor<T>, BatchMoments<T>)> {
        let fwd = tensor::norm::train_forward(x, gamma, beta, eps)?;
        Ok((fwd.output, fwd.moments))
    }

    fn batch_norm_eval(
        &self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        stats: &RunningStats<T>,
        eps: T,
    ) -> Result<Tensor<T>> {
        tensor::norm::eval_forward(x, gamma, beta, stats, eps)
    }
}

impl<T: Scalar> Ops<T> for Tape<T> {
    type Node = Var;

    fn param(&self, t: Tensor<T>) -> Result<Var> {
        self.leaf(t)
    }

    fn constant(&self, t: Tensor<T>) -> Result<Var> {
        Tape::constant(self, t)
    }

    fn value(&self, n: &Var) -> Tensor<T> {
        Tape::value(self, *n)
    }

    fn conv2d(&self, x: &Var, w: &Var, b: Option<&Var>, spec: &ConvSpec) -> Result<Var> {
        let (xv, wv) = (self.value(*x), self.value(*w));
        let bv = b.map(|b| self.value(*b));
        let out = conv2d(&xv, &wv, bv.as_ref(), spec)?;
        let spec = *spec;
        let bias_dims = bv.as_ref().map(|b| b.dims());
        let mut parents = vec![*x, *w];
        parents.extend(b.copied());
        self.record(out, &parents, move |g, need| {
            let gx = if need[0] {
                Some(conv2d_input_grad(g, &wv, xv.dims(), &spec)?)
            } else {
                None
            };
            let gw = if need[1] {
                Some(conv2d_filter_grad(&xv, g, wv.dims(), &spec)?)
            } else {
                None
            };
            let mut grads = vec![gx, gw];
            if let Some(bd) = bias_dims {
                grads.push(if need[2] {
                    Some(channel_sums(g, false).reshape(bd)?)
                } else {
                    None
                });
            }
            Ok(grads)
        })
    }

    fn transposed_conv2d(&self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let (xv, wv) = (self.value(*x), self.value(*w));
        let bv = b.map(|b| self.value(*b));
        let out = transposed_conv2d(&xv, &wv, bv.as_ref())?;
        let bias_dims = bv.as_ref().map(|b| b.dims());
        let mut parents = vec![*x, *w];
        parents.extend(b.copied());
        self.record(out, &parents, move |g, need| {
            let valid = ConvSpec::default();
            let gx = if need[0] {
                Some(conv2d(g, &wv, None, &valid)?)
            } else {
                None
            };
            let gw = if need[1] {
                Some(conv2d_filter_grad(g, &xv, wv.dims(), &valid)?)
            } else {
                None
            };
            let mut grads = vec![gx, gw];
            if let Some(bd) = bias_dims {
                grads.push(if need[2] {
                    Some(channel_sums(g, false).reshape(bd)?)
                } else {
                    None
                });
            }
            Ok(grads)
        })
    }

    fn expand(&self, features: &Var, input_map: &Var) -> Result<Var> {
        let (fv, sv) = (self.value(*features), self.value(*input_map));
        let out = expansion::expand_kernel(&fv, &sv)?;
        self.record(out, &[*features, *input_map], move |g, need| {
            let (gf, gs) = expansion::expand_backward(&fv, &sv, g, need[0], need[1])?;
            Ok(vec![gf, gs])
        })
    }

    fn selfsim(&self, features: &Var) -> Result<Var> {
        let fv = self.value(*features);
        let out = selfsim::fast_scores(&fv)?;
        self.note_branches(&out, |v| u8::from(v < T::zero()));
        self.record(out, &[*features], move |g, _| {
            Ok(vec![Some(selfsim::fast_scores_backward(&fv, g)?)])
        })
    }

    fn bilinear(&self, x: &Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xv = self.value(*x);
        let [_, _, h, w] = xv.dims();
        let out = bilinear_upsample(&xv, out_h, out_w)?;
        self.record(out, &[*x], move |g, _| {
            Ok(vec![Some(bilinear_upsample_backward(g, h, w)?)])
        })
    }

    fn avg_pool_global(&self, x: &Var) -> Result<Var> {
        let xv = self.value(*x);
        let dims = xv.dims();
        let out = tensor::avg_pool_global(&xv)?;
        self.record(out, &[*x], move |g, _| {
            let [n, c, h, w] = dims;
            let inv = T::one() / T::from_usize(h * w).unwrap();
            let gx = Tensor::from_fn([n, c, h, w], |i, j, _, _| g.at(i, j, 0, 0) * inv);
            Ok(vec![Some(gx)])
        })
    }

    fn relu(&self, x: &Var) -> Result<Var> {
        let xv = self.value(*x);
        self.note_branches(&xv, |v| u8::from(v > T::zero()));
        let out = xv.relu();
        self.record(out, &[*x], move |g, _| {
            Ok(vec![Some(g.zip_map(&xv, |gv, v| {
                if v > T::zero() {
                    gv
                } else {
                    T::zero()
                }
            })?)])
        })
    }

    fn leaky_relu(&self, x: &Var, slope: T) -> Result<Var> {
        let xv = self.value(*x);
        self.note_branches(&xv, |v| u8::from(v > T::zero()));
        let out = xv.leaky_relu(slope);
        self.record(out, &[*x], move |g, _| {
            Ok(vec![Some(g.zip_map(&xv, |gv, v| {
                if v > T::zero() {
                    gv
                } else {
                    gv * slope
                }
            })?)])
        })
    }

    fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = self.value(*a).add(&self.value(*b))?;
        self.record(out, &[*a, *b], |g, _| {
            Ok(vec![Some(g.clone()), Some(g.clone())])
        })
    }

    fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = self.value(*a).sub(&self.value(*b))?;
        self.record(out, &[*a, *b], |g, _| {
            Ok(vec![Some(g.clone()), Some(g.scale(-T::one()))])
        })
    }

    fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        let (av, bv) = (self.value(*a), self.value(*b));
        let out = av.mul(&bv)?;
        self.record(out, &[*a, *b], move |g, need| {
            Ok(vec![
                if need[0] { Some(g.mul(&bv)?) } else { None },
                if need[1] { Some(g.mul(&av)?) } else { None },
            ])
        })
    }

    fn scale(&self, x: &Var, k: T) -> Result<Var> {
        let out = self.value(*x).scale(k);
        self.record(out, &[*x], move |g, _| Ok(vec![Some(g.scale(k))]))
    }

    fn add_scalar(&self, x: &Var, k: T) -> Result<Var> {
        let out = self.value(*x).map(|v| v + k);
        self.record(out, &[*x], |g, _| Ok(vec![Some(g.clone())]))
    }

    fn abs(&self, x: &Var) -> Result<Var> {
        let xv = self.value(*x);
        self.note_branches(&xv, |v| {
            u8::from(v > T::zero()) + 2 * u8::from(v < T::zero())
        });
        let out = xv.map(|v| v.abs());
        self.record(out, &[*x], move |g, _| {
            Ok(vec![Some(g.zip_map(&xv, |gv, v| {
                if v > T::zero() {
                    gv
                } else if v < T::zero() {
                    -gv
                } else {
                    T::zero()
                }
            })?)])
        })
    }

    fn sum(&self, x: &Var) -> Result<Var> {
        let xv = self.value(*x);
        let dims = xv.dims();
        self.record(scalar_of(xv.sum()), &[*x], move |g, _| {
            Ok(vec![Some(Tensor::full(dims, g.data()[0]))])
        })
    }

    fn mean(&self, x: &Var) -> Result<Var> {
        let xv = self.value(*x);
        xv.require_nonempty("mean")?;
        let dims = xv.dims();
        let inv = T::one() / T::from_usize(xv.numel()).unwrap();
        self.record(scalar_of(xv.mean()), &[*x], move |g, _| {
            Ok(vec![Some(Tensor::full(dims, g.data()[0] * inv))])
        })
    }

    fn add_channel_bias(&self, x: &Var, bias: &Var) -> Result<Var> {
        let bv = self.value(*bias);
        let out = self.value(*x).add_channel_bias(&bv)?;
        let bdims = bv.dims();
        let per_item = bv.numel() != out.channels();
        self.record(out, &[*x, *bias], move |g, need| {
            let gb = if need[1] {
                Some(channel_sums(g, per_item).reshape(bdims)?)
            } else {
                None
            };
            Ok(vec![Some(g.clone()), gb])
        })
    }

    fn crops(&self, x: &Var, anchors: &[CropAnchor], h: usize, w: usize) -> Result<Var> {
        let xv = self.value(*x);
        let out = gather_crops(&xv, anchors, h, w)?;
        let anchors = anchors.to_vec();
        let dims = xv.dims();
        self.record(out, &[*x], move |g, _| {
            Ok(vec![Some(scatter_crops(g, &anchors, dims))])
        })
    }

    fn concat_channels(&self, a: &Var, b: &Var) -> Result<Var> {
        let (av, bv) = (self.value(*a), self.value(*b));
        let out = Tensor::concat_channels(&av, &bv)?;
        let (ca, cb) = (av.channels(), bv.channels());
        self.record(out, &[*a, *b], move |g, _| {
            let [n, _, h, w] = g.dims();
            let ga = Tensor::from_fn([n, ca, h, w], |i, c, y, x| g.at(i, c, y, x));
            let gb = Tensor::from_fn([n, cb, h, w], |i, c, y, x| g.at(i, ca + c, y, x));
            Ok(vec![Some(ga), Some(gb)])
        })
    }

    fn gram(&self, x: &Var) -> Result<Var> {
        let xv = self.value(*x);
        let out = gram_forward(&xv)?;
        self.record(out, &[*x], move |g, _| {
            Ok(vec![Some(gram_backward(&xv, g)?)])
        })
    }

    fn batch_norm_train(
        &self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        eps: T,
    ) -> Result<(Var, BatchMoments<T>)> {
        let gv = self.value(*gamma);
        let fwd = tensor::norm::train_forward(&self.value(*x), &gv, &self.value(*beta), eps)?;
        let moments = fwd.moments.clone();
        let (xhat, inv_std) = (fwd.xhat, fwd.inv_std);
        let (gdims, bdims) = (gv.dims(), self.value(*beta).dims());
        let var = self.record(fwd.output, &[*x, *gamma, *beta], move |g, need| {
            let [n, c, h, w] = g.dims();
            let plane = h * w;
            let m = T::from_usize(n * plane).unwrap();
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for i in 0..n {
                for ch in 0..c {
                    let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                    for (&gv, &xh) in g.data()[r.clone()].iter().zip(&xhat.data()[r]) {
                        sum_g[ch] += gv;
                        sum_gx[ch] += gv * xh;
                    }
                }
            }
            let gx = if need[0] {
                let mut out = vec![T::zero(); g.numel()];
                for i in 0..n {
                    for ch in 0..c {
                        let k = gv.data()[ch] * inv_std[ch] / m;
                        let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                        for ((o, &gg), &xh) in out[r.clone()]
                            .iter_mut()
                            .zip(&g.data()[r.clone()])
                            .zip(&xhat.data()[r])
                        {
                            *o = k * (m * gg - sum_g[ch] - xh * sum_gx[ch]);
                        }
                    }
                }
                Some(Tensor::from_vec(g.dims(), out)?)
            } else {
                None
            };
            Ok(vec![
                gx,
                Some(Tensor::from_vec(gdims, sum_gx.clone())?),
                Some(Tensor::from_vec(bdims, sum_g.clone())?),
            ])
        })?;
        Ok((var, moments))
    }

    fn batch_norm_eval(
        &self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        stats: &RunningStats<T>,
        eps: T,
    ) -> Result<Var> {
        let (xv, gv, bv) = (self.value(*x), self.value(*gamma), self.value(*beta));
        let out = tensor::norm::eval_forward(&xv, &gv, &bv, stats, eps)?;
        let inv_std: Vec<T> = stats
            .var
            .data()
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let mean = stats.mean.data().to_vec();
        let (gdims, bdims) = (gv.dims(), bv.dims());
        self.record(out, &[*x, *gamma, *beta], move |g, _| {
            let [n, c, h, w] = g.dims();
            let plane = h * w;
            let mut gx = g.clone();
            let mut ggamma = vec![T::zero(); c];
            let mut gbeta = vec![T::zero(); c];
            let buf = gx.data_mut();
            for i in 0..n {
                for ch in 0..c {
                    let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                    for (o, &xval) in buf[r.clone()].iter_mut().zip(&xv.data()[r]) {
                        gbeta[ch] += *o;
                        ggamma[ch] += *o * (xval - mean[ch]) * inv_std[ch];
                        *o *= gv.data()[ch] * inv_std[ch];
                    }
                }
            }
            Ok(vec![
                Some(gx),
                Some(Tensor::from_vec(gdims, ggamma)?),
                Some(Tensor::from_vec(bdims, gbeta)?),
            ])
        })
    }
}

/// Same-size 3x3 convolution with partial-convolution padding.
pub(crate) fn same3x3() -> ConvSpec {
    ConvSpec::new(1, PaddingMode::partial(1))
}
