//! Single-process batch normalization over (N, H, W) per channel.

use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Per-channel running mean and (unbiased) variance, `[1, C, 1, 1]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T: Scalar> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros([1, channels, 1, 1]),
            var: Tensor::ones([1, channels, 1, 1]),
        }
    }

    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update(&mut self, batch: &BatchMoments<T>, momentum: T) {
        let keep = T::one() - momentum;
        for (r, &b) in self.mean.data_mut().iter_mut().zip(&batch.mean) {
            *r = keep * *r + momentum * b;
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(&batch.unbiased_var) {
            *r = keep * *r + momentum * b;
        }
    }
}

/// Statistics of one training-mode batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    /// Biased variance, used for normalization.
    pub var: Vec<T>,
    /// Unbiased variance, fed into the running estimate.
    pub unbiased_var: Vec<T>,
}

pub(crate) struct TrainForward<T: Scalar> {
    pub output: Tensor<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub moments: BatchMoments<T>,
}

fn check_params<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    x.require_nonempty("batch_norm")?;
    let c = x.channels();
    if gamma.numel() != c || beta.numel() != c {
        return Err(shape_err!(
            "batch_norm over {c} channels with gamma {} / beta {}",
            gamma.numel(),
            beta.numel()
        ));
    }
    Ok(())
}

pub(crate) fn train_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<TrainForward<T>> {
    check_params(x, gamma, beta)?;
    let [n, c, h, w] = x.dims();
    let plane = h * w;
    let m = n * plane;
    if m < 2 {
        return Err(Error::DegenerateBatch(format!(
            "training-mode batch norm needs N*H*W >= 2, got {m}"
        )));
    }
    let mf = T::from_usize(m).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for i in 0..n {
            acc += x.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane]
                .iter()
                .copied()
                .sum();
        }
        let mu = acc / mf;
        let mut sq = T::zero();
        for i in 0..n {
            for &v in &x.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane] {
                sq += (v - mu) * (v - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = sq / mf;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = x.data().to_vec();
    let mut out = vec![T::zero(); xhat.len()];
    for i in 0..n {
        for ch in 0..c {
            let range = (i * c + ch) * plane..(i * c + ch + 1) * plane;
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            for (xh, o) in xhat[range.clone()].iter_mut().zip(&mut out[range]) {
                *xh = (*xh - mean[ch]) * inv_std[ch];
                *o = g * *xh + b;
            }
        }
    }
    let corr = mf / T::from_usize(m - 1).unwrap();
    let unbiased_var = var.iter().map(|&v| v * corr).collect();
    Ok(TrainForward {
        output: Tensor::from_vec(x.dims(), out)?,
        xhat: Tensor::from_vec(x.dims(), xhat)?,
        inv_std,
        moments: BatchMoments {
            mean,
            var,
            unbiased_var,
        },
    })
}

/// Per-channel `(scale, shift)` such that eval-mode output is `scale * x + shift`.
pub(crate) fn eval_affine<T: Scalar>(
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &RunningStats<T>,
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let mut scale = Vec::with_capacity(gamma.numel());
    let mut shift = Vec::with_capacity(gamma.numel());
    for ch in 0..gamma.numel() {
        let s = gamma.data()[ch] / (stats.var.data()[ch] + eps).sqrt();
        scale.push(s);
        shift.push(beta.data()[ch] - s * stats.mean.data()[ch]);
    }
    (scale, shift)
}

pub(crate) fn eval_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &RunningStats<T>,
    eps: T,
) -> Result<Tensor<T>> {
    check_params(x, gamma, beta)?;
    if stats.mean.numel() != x.channels() || stats.var.numel() != x.channels() {
        return Err(shape_err!(
            "running stats do not match {} channels",
            x.channels()
        ));
    }
    let (scale, shift) = eval_affine(gamma, beta, stats, eps);
    let [n, c, h, w] = x.dims();
    let plane = h * w;
    let mut out = x.data().to_vec();
    for i in 0..n {
        for ch in 0..c {
            for v in &mut out[(i * c + ch) * plane..(i * c + ch + 1) * plane] {
                *v = scale[ch] * *v + shift[ch];
            }
        }
    }
    Tensor::from_vec(x.dims(), out)
}

/// Batch normalization. Train mode normalizes by batch statistics and folds
/// them into `stats`; eval mode normalizes by `stats`.
pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut RunningStats<T>,
    mode: BatchNormMode,
    momentum: T,
    eps: T,
) -> Result<Tensor<T>> {
    match mode {
        BatchNormMode::Train => {
            let fwd = train_forward(input, gamma, beta, eps)?;
            stats.update(&fwd.moments, momentum);
            Ok(fwd.output)
        }
        BatchNormMode::Eval => eval_forward(input, gamma, beta, stats, eps),
    }
}
