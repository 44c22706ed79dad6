//! Self-similarity maps.
//!
//! For a feature map `F` of size `H x W` and a shift `(p, q)` with
//! `|p| <= H/2`, `|q| <= W/2`, the score is
//!
//! ```text
//! s(p, q) = -sum (F(m, n) - F(m - p, n - q))^2 / (sum F(m, n)^2 + eps)
//! ```
//!
//! with both sums over channels and the overlap `m in [max(0, p), min(H, H + p))`
//! (likewise for `n`). Entry `(a, b)` of the map holds `s(a - H/2, b - W/2)`.
//!
//! The fast form expands the numerator as `A - 2B + D` where `A` is the
//! denominator sum, `B` the cross-correlation and `D` the shifted energy, and
//! computes all three as convolutions.

use crate::autodiff::Ops;
use crate::error::{shape_err, Result};
use crate::params::{Bound, Conv};
use crate::tensor::{conv2d, conv2d_filter_grad, conv2d_input_grad, ConvSpec, Scalar, Tensor};

pub const DENOM_EPS: f64 = 1e-8;

/// A self-similarity map and the feature size it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfSimMap<T: Scalar = f32> {
    /// `[N, 1, H + 1, W + 1]`.
    pub scores: Tensor<T>,
    pub source_dims: (usize, usize),
}

impl<T: Scalar> SelfSimMap<T> {
    /// Score at shift `(p, q)` of batch item `n`.
    pub fn at(&self, n: usize, p: isize, q: isize) -> T {
        let (h, w) = self.source_dims;
        let a = (p + (h / 2) as isize) as usize;
        let b = (q + (w / 2) as isize) as usize;
        self.scores.at(n, 0, a, b)
    }
}

fn check_even<T: Scalar>(f: &Tensor<T>) -> Result<()> {
    f.require_nonempty("selfsim")?;
    let [_, _, h, w] = f.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("selfsim needs even spatial dims, got {h}x{w}"));
    }
    Ok(())
}

/// Direct double loop over shifts and overlap regions.
pub fn selfsim_naive<T: Scalar>(f: &Tensor<T>) -> Result<SelfSimMap<T>> {
    check_even(f)?;
    let [n, c, h, w] = f.dims();
    let (hh, hw) = ((h / 2) as isize, (w / 2) as isize);
    let eps = T::lit(DENOM_EPS);
    let (hi, wi) = (h as isize, w as isize);
    let scores = Tensor::from_fn([n, 1, h + 1, w + 1], |item, _, a, b| {
        let (p, q) = (a as isize - hh, b as isize - hw);
        let mut num = T::zero();
        let mut den = T::zero();
        for ch in 0..c {
            for m in p.max(0)..(hi + p).min(hi) {
                for k in q.max(0)..(wi + q).min(wi) {
                    let v = f.at(item, ch, m as usize, k as usize);
                    let s = f.at(item, ch, (m - p) as usize, (k - q) as usize);
                    num += (v - s) * (v - s);
                    den += v * v;
                }
            }
        }
        if den == T::zero() {
            T::zero()
        } else {
            -num / (den + eps)
        }
    });
    Ok(SelfSimMap {
        scores,
        source_dims: (h, w),
    })
}

/// Channel-summed squares, `[N, 1, H, W]`.
fn energy<T: Scalar>(f: &Tensor<T>) -> Tensor<T> {
    f.mul(f).expect("same dims").sum_channels()
}

fn center_indicator<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn([1, 1, 2 * h, 2 * w], |_, _, y, x| {
        let inside = (h / 2..h / 2 + h).contains(&y) && (w / 2..w / 2 + w).contains(&x);
        if inside {
            T::one()
        } else {
            T::zero()
        }
    })
}

struct Terms<T: Scalar> {
    a: Tensor<T>,
    b: Tensor<T>,
    d: Tensor<T>,
}

fn terms<T: Scalar>(f: &Tensor<T>) -> Result<Terms<T>> {
    let [n, _, h, w] = f.dims();
    let (hh, hw) = (h / 2, w / 2);
    let valid = ConvSpec::default();
    let q = energy(f);
    let ones = Tensor::ones([1, 1, h, w]);
    let a = conv2d(&q.pad(hh, hh, hw, hw), &ones, None, &valid)?;
    let ind = center_indicator(h, w);
    let mut b_items = Vec::with_capacity(n);
    let mut d_items = Vec::with_capacity(n);
    for i in 0..n {
        let fi = f.item(i)?;
        b_items.push(conv2d(&fi.pad(hh, hh, hw, hw), &fi, None, &valid)?);
        d_items.push(conv2d(&ind, &q.item(i)?, None, &valid)?);
    }
    Ok(Terms {
        a,
        b: Tensor::stack(&b_items)?,
        d: Tensor::stack(&d_items)?,
    })
}

/// Raw `[N, 1, H + 1, W + 1]` scores via the convolution form.
pub(crate) fn fast_scores<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    check_even(f)?;
    let [_, _, h, w] = f.dims();
    // A - 2B + D cancels badly in single precision, so the terms are always
    // accumulated in f64.
    let Terms { a, b, d } = terms(&f.cast::<f64>())?;
    let mut out = a.clone();
    let buf = out.data_mut();
    for (k, o) in buf.iter_mut().enumerate() {
        let av = a.data()[k];
        *o = if av == 0.0 {
            0.0
        } else {
            let num = (av - 2.0 * b.data()[k] + d.data()[k]).max(0.0);
            -num / (av + DENOM_EPS)
        };
    }
    let plane = (h + 1) * (w + 1);
    let center = (h / 2) * (w + 1) + w / 2;
    for item in buf.chunks_mut(plane) {
        item[center] = 0.0;
    }
    Ok(out.cast())
}

/// Gradient of [`fast_scores`] with respect to `F` given the score gradient.
pub(crate) fn fast_scores_backward<T: Scalar>(f: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = f.dims();
    if g.dims() != [n, 1, h + 1, w + 1] {
        return Err(shape_err!(
            "selfsim gradient {:?} for features {:?}",
            g.dims(),
            f.dims()
        ));
    }
    let (hh, hw) = (h / 2, w / 2);
    let Terms { a, b, d } = terms(f)?;
    let eps = T::lit(DENOM_EPS);
    let two = T::lit(2.0);
    let plane = (h + 1) * (w + 1);
    let center = hh * (w + 1) + hw;
    let mut ga = Tensor::zeros(a.dims());
    let mut gb = Tensor::zeros(a.dims());
    let mut gd = Tensor::zeros(a.dims());
    {
        let (ga, gb, gd) = (ga.data_mut(), gb.data_mut(), gd.data_mut());
        for k in 0..a.numel() {
            let av = a.data()[k];
            let raw = av - two * b.data()[k] + d.data()[k];
            if av == T::zero() || k % plane == center {
                continue;
            }
            let den = av + eps;
            let gv = g.data()[k];
            let (gnum, num) = if raw > T::zero() {
                (-gv / den, raw)
            } else {
                (T::zero(), T::zero())
            };
            let gden = gv * num / (den * den);
            ga[k] = gnum + gden;
            gb[k] = -two * gnum;
            gd[k] = gnum;
        }
    }
    let valid = ConvSpec::default();
    let ones = Tensor::ones([1, 1, h, w]);
    let gq_pad = conv2d_input_grad(&ga, &ones, [n, 1, 2 * h, 2 * w], &valid)?;
    let ind = center_indicator(h, w);
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let fi = f.item(i)?;
        let gdi = gd.item(i)?;
        let gq_d = conv2d_filter_grad(&ind, &gdi, [1, 1, h, w], &valid)?;
        let gq = crate::tensor::crop(&gq_pad.item(i)?, hh, hw, h, w)?.add(&gq_d)?;
        let from_energy = Tensor::from_fn([1, c, h, w], |_, ch, y, x| {
            two * fi.at(0, ch, y, x) * gq.at(0, 0, y, x)
        });
        let gbi = gb.item(i)?;
        let fpad = fi.pad(hh, hh, hw, hw);
        let g_input = conv2d_input_grad(&gbi, &fi, fpad.dims(), &valid)?;
        let g_filter = conv2d_filter_grad(&fpad, &gbi, fi.dims(), &valid)?;
        let from_cross = crate::tensor::crop(&g_input, hh, hw, h, w)?.add(&g_filter)?;
        items.push(from_energy.add(&from_cross)?);
    }
    Tensor::stack(&items)
}

/// Convolution-decomposed self-similarity.
pub fn selfsim_fast<T: Scalar>(f: &Tensor<T>) -> Result<SelfSimMap<T>> {
    let [_, _, h, w] = f.dims();
    Ok(SelfSimMap {
        scores: fast_scores(f)?,
        source_dims: (h, w),
    })
}

/// One map per feature scale.
pub fn selfsim_multiscale<T: Scalar>(features: &[Tensor<T>]) -> Result<Vec<SelfSimMap<T>>> {
    features.iter().map(selfsim_fast).collect()
}

/// Learned transform applied to a similarity (or noise) map: a 1 -> 8
/// conv, ReLU, and an 8 -> 1 conv, all size-preserving.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTransformParams<W> {
    pub conv1: Conv<W>,
    pub conv2: Conv<W>,
}

pub const SIM_HIDDEN: usize = 8;

impl<N: Clone> SimTransformParams<N> {
    pub fn from_bound(bound: &Bound<N>, prefix: &str) -> Result<Self> {
        Ok(SimTransformParams {
            conv1: bound.conv(&format!("{prefix}.sim_conv1"), true)?,
            conv2: bound.conv(&format!("{prefix}.sim_conv2"), true)?,
        })
    }
}

pub fn sim_transform_ops<T: Scalar, O: Ops<T>>(
    ops: &O,
    map: &O::Node,
    p: &SimTransformParams<O::Node>,
) -> Result<O::Node> {
    let spec = crate::autodiff::same3x3();
    let h = ops.conv2d(map, &p.conv1.weight, p.conv1.bias.as_ref(), &spec)?;
    let h = ops.relu(&h)?;
    ops.conv2d(&h, &p.conv2.weight, p.conv2.bias.as_ref(), &spec)
}

/// Applies the transform to `map` (`[N, 1, h, w]`), preserving its size.
pub fn selfsim_transform<T: Scalar>(
    map: &Tensor<T>,
    params: &SimTransformParams<Tensor<T>>,
) -> Result<Tensor<T>> {
    if map.channels() != 1 {
        return Err(shape_err!(
            "similarity map must have 1 channel, got {:?}",
            map.dims()
        ));
    }
    sim_transform_ops(&crate::autodiff::Eager, map, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn two_by_two_hand_values() {
        let f = Tensor::from_vec([1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        for map in [selfsim_naive(&f).unwrap(), selfsim_fast(&f).unwrap()] {
            assert!((map.at(0, 0, 1) + 0.1).abs() < 1e-9);
            assert!((map.at(0, 0, -1) + 0.2).abs() < 1e-9);
            assert_eq!(map.at(0, 0, 0), 0.0);
        }
    }

    #[test]
    fn odd_dims_rejected() {
        let f = Tensor::<f32>::ones([1, 1, 3, 4]);
        assert!(selfsim_naive(&f).is_err());
        assert!(selfsim_fast(&f).is_err());
    }

    #[test]
    fn blank_features_score_zero() {
        let f = Tensor::<f64>::zeros([1, 2, 4, 4]);
        assert!(selfsim_fast(&f)
            .unwrap()
            .scores
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn fast_backward_matches_differences() {
        let f = random([2, 2, 4, 4], 3);
        let weights = random([2, 1, 5, 5], 4);
        let report = grad_check(
            |t, v| {
                let s = t.selfsim(&v[0])?;
                let w = t.constant(weights.clone())?;
                let prod = t.mul(&s, &w)?;
                t.sum(&prod)
            },
            &[f],
            1e-4,
            1e-4,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn transform_zero_params_is_zero() {
        let p = SimTransformParams {
            conv1: Conv {
                weight: Tensor::<f32>::zeros([8, 1, 3, 3]),
                bias: Some(Tensor::zeros([1, 8, 1, 1])),
            },
            conv2: Conv {
                weight: Tensor::zeros([1, 8, 3, 3]),
                bias: Some(Tensor::zeros([1, 1, 1, 1])),
            },
        };
        let m = Tensor::from_fn([1, 1, 5, 5], |_, _, y, x| -((y + x) as f32));
        let out = selfsim_transform(&m, &p).unwrap();
        assert_eq!(out.dims(), [1, 1, 5, 5]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }
}
