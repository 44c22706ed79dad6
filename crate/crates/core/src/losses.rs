//! Perceptual, style and adversarial losses.
//!
//! Feature-space losses run over a fixed [`FeatureExtractor`]: a stack of
//! stride-2 3x3 convolutions, each followed by ReLU. The default is a seeded
//! random pyramid; any conv stack of the same form can be loaded instead.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CropAnchor, Eager, Ops};
use crate::error::{shape_err, Error, Result};
use crate::params::{normal_scaled, NamedTensors};
use crate::tensor::{ConvSpec, PaddingMode, Scalar, Tensor};

pub const EXTRACTOR_CHANNELS: [usize; 5] = [8, 16, 32, 64, 64];
pub const GAN_CROPS: usize = 10;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Fixed feature pyramid. Weights never receive updates.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor<T: Scalar = f32> {
    /// `[C_p, C_{p-1}, 3, 3]` per level.
    pub levels: Vec<Tensor<T>>,
}

/// Activations of every extractor level.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T: Scalar = f32> {
    pub activations: Vec<Tensor<T>>,
}

fn level_spec() -> ConvSpec {
    ConvSpec::new(2, PaddingMode::zero(1))
}

impl<T: Scalar> FeatureExtractor<T> {
    /// Weights drawn from `N(0, 1 / fan_in)` with the given seed.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let levels = EXTRACTOR_CHANNELS
            .iter()
            .map(|&c| {
                let fan_in = cin * 9;
                let w = normal_scaled([c, cin, 3, 3], 1.0 / (fan_in as f64).sqrt(), &mut rng);
                cin = c;
                w
            })
            .collect();
        FeatureExtractor { levels }
    }

    /// Levels named `level{p}.weight`, `p = 0, 1, ...`.
    pub fn from_tensors(tensors: &NamedTensors<T>) -> Result<Self> {
        let mut levels = Vec::new();
        let mut cin = 3;
        while let Ok(w) = tensors.get(&format!("level{}.weight", levels.len())) {
            let [_, c, kh, kw] = w.dims();
            if c != cin || kh != 3 || kw != 3 {
                return Err(Error::Archive(format!(
                    "extractor `level{}.weight` has dims {:?}",
                    levels.len(),
                    w.dims()
                )));
            }
            cin = w.dims()[0];
            levels.push(w.clone());
        }
        if levels.is_empty() || levels.len() != tensors.len() {
            return Err(Error::Archive(
                "extractor archive needs level0.weight, level1.weight, ...".into(),
            ));
        }
        Ok(FeatureExtractor { levels })
    }

    pub fn to_tensors(&self) -> NamedTensors<T> {
        let mut out = NamedTensors::new();
        for (p, w) in self.levels.iter().enumerate() {
            out.insert(format!("level{p}.weight"), w.clone());
        }
        out
    }

    /// `(C_p, H_p, W_p)` per level for an `h x w` input.
    pub fn level_dims(&self, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = (h, w);
        self.levels
            .iter()
            .map(|l| {
                h = h.div_ceil(2);
                w = w.div_ceil(2);
                (l.dims()[0], h, w)
            })
            .collect()
    }

    pub fn pyramid(&self, x: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        Ok(FeaturePyramid {
            activations: self.pyramid_ops(&Eager, x)?,
        })
    }

    pub fn pyramid_ops<O: Ops<T>>(&self, ops: &O, x: &O::Node) -> Result<Vec<O::Node>> {
        let mut out = Vec::with_capacity(self.levels.len());
        let mut h = x.clone();
        for w in &self.levels {
            let w = ops.constant(w.clone())?;
            h = ops.relu(&ops.conv2d(&h, &w, None, &level_spec())?)?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub perceptual: f64,
    pub style: f64,
    pub gan: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            perceptual: 0.05,
            style: 120.0,
            gan: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("perceptual", self.perceptual),
            ("style", self.style),
            ("gan", self.gan),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "loss weight `{k}` must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub perceptual: f64,
    pub style: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    /// Generator objective.
    pub total: f64,
}

/// Weighted generator objective.
pub fn total_loss(perceptual: f64, style: f64, gan_g: f64, w: &LossWeights) -> f64 {
    w.perceptual * perceptual + w.style * style + w.gan * gan_g
}

fn check_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!(
            "loss operands {:?} and {:?} differ",
            a.dims(),
            b.dims()
        ));
    }
    a.require_nonempty("loss")
}

/// Sum over levels of the mean absolute feature difference.
pub fn perceptual_ops<T: Scalar, O: Ops<T>>(
    ops: &O,
    out: &[O::Node],
    target: &[O::Node],
) -> Result<O::Node> {
    let mut acc: Option<O::Node> = None;
    for (a, b) in out.iter().zip(target) {
        let term = ops.mean(&ops.abs(&ops.sub(a, b)?)?)?;
        acc = Some(match acc {
            Some(s) => ops.add(&s, &term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| shape_err!("empty feature pyramid"))
}

/// Per level `(1 / C^2) * sum |K (Gram(out) - Gram(target))|`, `K = 1 / (C H W)`,
/// summed over levels and averaged over the batch.
pub fn style_ops<T: Scalar, O: Ops<T>>(
    ops: &O,
    out: &[O::Node],
    target: &[O::Node],
) -> Result<O::Node> {
    let mut acc: Option<O::Node> = None;
    for (a, b) in out.iter().zip(target) {
        let [n, c, h, w] = ops.dims(a);
        let k = T::one() / T::from_usize(c * h * w).unwrap();
        let diff = ops.sub(&ops.gram(a)?, &ops.gram(b)?)?;
        let outer = k / T::from_usize(c * c * n).unwrap();
        let term = ops.scale(&ops.sum(&ops.abs(&diff)?)?, outer)?;
        acc = Some(match acc {
            Some(s) => ops.add(&s, &term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| shape_err!("empty feature pyramid"))
}

pub fn perceptual_loss<T: Scalar>(
    out: &Tensor<T>,
    target: &Tensor<T>,
    ext: &FeatureExtractor<T>,
) -> Result<T> {
    check_same(out, target)?;
    let (a, b) = (ext.pyramid(out)?, ext.pyramid(target)?);
    Ok(perceptual_ops(&Eager, &a.activations, &b.activations)?.data()[0])
}

/// Per-item `C x C` Gram matrix of the `(H W) x C` feature matrix, `[N, 1, C, C]`.
pub fn gram_matrix<T: Scalar>(psi: &Tensor<T>) -> Result<Tensor<T>> {
    Eager.gram(psi)
}

pub fn style_loss<T: Scalar>(
    out: &Tensor<T>,
    target: &Tensor<T>,
    ext: &FeatureExtractor<T>,
) -> Result<T> {
    check_same(out, target)?;
    let (a, b) = (ext.pyramid(out)?, ext.pyramid(target)?);
    Ok(style_ops(&Eager, &a.activations, &b.activations)?.data()[0])
}

/// Patch discriminator widths; four stride-2 4x4 convs then a stride-1 4x4
/// conv to one channel, all with bias and zero padding 2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub widths: [usize; 4],
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            in_channels: 6,
            widths: [64, 128, 256, 512],
        }
    }
}

impl DiscriminatorConfig {
    pub fn desk() -> Self {
        DiscriminatorConfig {
            in_channels: 6,
            widths: [16, 32, 64, 128],
        }
    }

    pub fn layout(&self) -> Vec<(String, crate::tensor::Dims)> {
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for (k, &c) in self.widths.iter().chain(std::iter::once(&1)).enumerate() {
            out.push((format!("conv{}.weight", k + 1), [c, cin, 4, 4]));
            out.push((format!("conv{}.bias", k + 1), [1, c, 1, 1]));
            cin = c;
        }
        out
    }

    /// Patch map size per axis for an input of `n` pixels.
    pub fn output_size(&self, n: usize) -> usize {
        let mut n = n;
        for _ in 0..4 {
            n = n / 2 + 1;
        }
        n + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorWeights<T: Scalar = f32> {
    pub config: DiscriminatorConfig,
    pub tensors: NamedTensors<T>,
}

impl<T: Scalar> DiscriminatorWeights<T> {
    /// `N(0, 0.02)` weights, zero biases.
    pub fn init(config: DiscriminatorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = NamedTensors::new();
        for (name, dims) in config.layout() {
            let t = if name.ends_with(".weight") {
                normal_scaled(dims, 0.02, &mut rng)
            } else {
                Tensor::zeros(dims)
            };
            tensors.insert(name, t);
        }
        DiscriminatorWeights { config, tensors }
    }

    pub fn from_tensors(config: DiscriminatorConfig, tensors: NamedTensors<T>) -> Result<Self> {
        tensors.check_layout(&config.layout())?;
        Ok(DiscriminatorWeights { config, tensors })
    }
}

pub fn discriminator_ops<T: Scalar, O: Ops<T>>(
    ops: &O,
    params: &crate::params::Bound<O::Node>,
    pair: &O::Node,
) -> Result<O::Node> {
    let mut h = pair.clone();
    for k in 1..=5 {
        let conv = params.conv(&format!("conv{k}"), true)?;
        let stride = if k < 5 { 2 } else { 1 };
        h = ops.conv2d(
            &h,
            &conv.weight,
            conv.bias.as_ref(),
            &ConvSpec::new(stride, PaddingMode::zero(2)),
        )?;
        if k < 5 {
            h = ops.leaky_relu(&h, T::lit(LEAKY_SLOPE))?;
        }
    }
    Ok(h)
}

/// Patch logits for a `[N, 6, H, W]` pair.
pub fn discriminator_forward<T: Scalar>(
    pair: &Tensor<T>,
    d: &DiscriminatorWeights<T>,
) -> Result<Tensor<T>> {
    if pair.channels() != d.config.in_channels {
        return Err(shape_err!(
            "discriminator expects {} channels, got {:?}",
            d.config.in_channels,
            pair.dims()
        ));
    }
    let bound = d.tensors.bind(&Eager, false)?;
    discriminator_ops(&Eager, &bound, pair)
}

/// Crop anchors for the adversarial loss: `GAN_CROPS` crops of every item
/// from the output, then as many from the target. Each anchor draws its row
/// then its column.
pub fn draw_gan_anchors(
    batch: usize,
    big: (usize, usize),
    crop: (usize, usize),
    rng: &mut impl Rng,
) -> Result<(Vec<CropAnchor>, Vec<CropAnchor>)> {
    if crop.0 > big.0 || crop.1 > big.1 || crop.0 == 0 || crop.1 == 0 {
        return Err(shape_err!("crop {crop:?} does not fit {big:?}"));
    }
    let draw = |rng: &mut dyn rand::RngCore| {
        let mut v = Vec::with_capacity(GAN_CROPS * batch);
        for _ in 0..GAN_CROPS {
            for item in 0..batch {
                let top = rng.random_range(0..=big.0 - crop.0);
                let left = rng.random_range(0..=big.1 - crop.1);
                v.push(CropAnchor { item, top, left });
            }
        }
        v
    };
    let fake = draw(rng);
    let real = draw(rng);
    Ok((fake, real))
}

/// `input` repeated once per crop and concatenated with the crops.
pub(crate) fn gan_pairs<T: Scalar, O: Ops<T>>(
    ops: &O,
    input: &O::Node,
    source: &O::Node,
    anchors: &[CropAnchor],
) -> Result<O::Node> {
    let [_, _, h, w] = ops.dims(input);
    let crops = ops.crops(source, anchors, h, w)?;
    let inputs: Vec<CropAnchor> = anchors
        .iter()
        .map(|a| CropAnchor {
            item: a.item,
            top: 0,
            left: 0,
        })
        .collect();
    let repeated = ops.crops(input, &inputs, h, w)?;
    ops.concat_channels(&repeated, &crops)
}

/// `mean((D - target)^2)`.
pub fn lsgan_term<T: Scalar, O: Ops<T>>(ops: &O, logits: &O::Node, target: T) -> Result<O::Node> {
    let d = ops.add_scalar(logits, -target)?;
    ops.mean(&ops.mul(&d, &d)?)
}

/// Least-squares adversarial losses over `GAN_CROPS` seeded crops of the
/// output and the target, each paired with the input:
/// `gan_d = (mean((D(real) - 1)^2) + mean(D(fake)^2)) / 2`,
/// `gan_g = mean((D(fake) - 1)^2)`.
pub fn gan_losses<T: Scalar>(
    out: &Tensor<T>,
    target: &Tensor<T>,
    input: &Tensor<T>,
    d: &DiscriminatorWeights<T>,
    rng: &mut impl Rng,
) -> Result<(T, T)> {
    check_same(out, target)?;
    if input.batch() != out.batch() || input.channels() != out.channels() {
        return Err(shape_err!(
            "input {:?} for output {:?}",
            input.dims(),
            out.dims()
        ));
    }
    let (fake, real) = draw_gan_anchors(
        out.batch(),
        (out.height(), out.width()),
        (input.height(), input.width()),
        rng,
    )?;
    let bound = d.tensors.bind(&Eager, false)?;
    let fake_logits = discriminator_ops(&Eager, &bound, &gan_pairs(&Eager, input, out, &fake)?)?;
    let real_logits = discriminator_ops(&Eager, &bound, &gan_pairs(&Eager, input, target, &real)?)?;
    let gan_g = lsgan_term(&Eager, &fake_logits, T::one())?.data()[0];
    let gan_d = (lsgan_term(&Eager, &real_logits, T::one())?.data()[0]
        + lsgan_term(&Eager, &fake_logits, T::zero())?.data()[0])
        * T::lit(0.5);
    Ok((gan_g, gan_d))
}
