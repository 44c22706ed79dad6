//! The expansion generator: a five-stage encoder, expansion blocks on the
//! 1/4, 1/8 and 1/16 scale features, and a skip-sum decoder that outputs an
//! image twice the input size.
//!
//! Layer names double as archive keys:
//!
//! | layer | in -> out | stride | norm |
//! |---|---|---|---|
//! | `conv1` | 3 -> w | 1 | BN, ReLU |
//! | `conv2_1`, `conv2_2` | w -> 2w | 2, 1 | BN, ReLU |
//! | `conv3_1`, `conv3_2` | 2w -> 4w | 2, 1 | BN, ReLU |
//! | `conv4_1`, `conv4_2` | 4w -> 8w | 2, 1 | BN, ReLU |
//! | `conv5_1`, `conv5_2` | 8w -> 16w | 2, 1 | BN, ReLU |
//! | `block3`, `block4`, `block5` | expansion on `conv3_2`, `conv4_2`, `conv5_2` | | |
//! | `conv6` .. `conv9` | 16w -> 8w -> 4w -> 2w -> w | 1 | BN, ReLU |
//! | `conv10` | w -> 3 | 1 | bias only |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{same3x3, Eager, Ops};
use crate::error::{shape_err, Error, Result};
use crate::expansion::{transconv_block_ops, NoiseMaps, TransConvBlockParams};
use crate::params::{he_normal, Bound, NamedTensors};
use crate::tensor::{
    BatchMoments, BatchNormMode, ConvSpec, Dims, PaddingMode, RunningStats, Scalar, Tensor, BN_EPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorMode {
    SelfSim,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub base_width: usize,
    pub width_multiplier: f64,
    pub input_dims_divisor: usize,
    pub mode: GeneratorMode,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            base_width: 64,
            width_multiplier: 1.0,
            input_dims_divisor: 32,
            mode: GeneratorMode::SelfSim,
        }
    }
}

const ENCODER: [(&str, usize, usize, usize); 9] = [
    // name, input stage, output stage, stride
    ("conv1", 0, 0, 1),
    ("conv2_1", 0, 1, 2),
    ("conv2_2", 1, 1, 1),
    ("conv3_1", 1, 2, 2),
    ("conv3_2", 2, 2, 1),
    ("conv4_1", 2, 3, 2),
    ("conv4_2", 3, 3, 1),
    ("conv5_1", 3, 4, 2),
    ("conv5_2", 4, 4, 1),
];

const DECODER: [(&str, usize, usize); 4] = [
    ("conv6", 4, 3),
    ("conv7", 3, 2),
    ("conv8", 2, 1),
    ("conv9", 1, 0),
];

/// Blocks with the stage they expand.
const BLOCKS: [(&str, usize); 3] = [("block3", 2), ("block4", 3), ("block5", 4)];

impl GeneratorConfig {
    /// Desk-scale network: widths 16 .. 256.
    pub fn desk() -> Self {
        GeneratorConfig {
            width_multiplier: 0.25,
            ..Self::default()
        }
    }

    /// Channel widths of the five stages.
    pub fn widths(&self) -> [usize; 5] {
        let mut out = [0; 5];
        for (k, o) in out.iter_mut().enumerate() {
            let w = (self.base_width << k) as f64 * self.width_multiplier;
            *o = (w.round() as usize).max(1);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0
            || !(self.width_multiplier > 0.0)
            || !self.width_multiplier.is_finite()
        {
            return Err(Error::Config(format!(
                "invalid widths: base {} x {}",
                self.base_width, self.width_multiplier
            )));
        }
        if self.input_dims_divisor == 0 || self.input_dims_divisor % 32 != 0 {
            return Err(Error::Config(format!(
                "input_dims_divisor must be a positive multiple of 32, got {}",
                self.input_dims_divisor
            )));
        }
        Ok(())
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let d = self.input_dims_divisor;
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(shape_err!(
                "input {h}x{w} must be a nonzero multiple of {d} on both axes"
            ));
        }
        Ok(())
    }

    /// Every tensor name with its dims, in archive order.
    pub fn layout(&self) -> Vec<(String, Dims)> {
        let wd = self.widths();
        let mut out = Vec::new();
        let conv = |out: &mut Vec<(String, Dims)>,
                    name: &str,
                    cin: usize,
                    cout: usize,
                    k: usize,
                    bias: bool| {
            out.push((format!("{name}.weight"), [cout, cin, k, k]));
            if bias {
                out.push((format!("{name}.bias"), [1, cout, 1, 1]));
            }
        };
        let bn = |out: &mut Vec<(String, Dims)>, name: &str, c: usize| {
            for part in ["gamma", "beta", "running_mean", "running_var"] {
                out.push((format!("{name}.bn.{part}"), [1, c, 1, 1]));
            }
        };
        for (name, si, so, _) in ENCODER {
            let cin = if name == "conv1" { 3 } else { wd[si] };
            conv(&mut out, name, cin, wd[so], 3, false);
            bn(&mut out, name, wd[so]);
        }
        for (name, stage) in BLOCKS {
            let c = wd[stage];
            conv(&mut out, &format!("{name}.filter_conv1"), c, c, 3, true);
            conv(&mut out, &format!("{name}.filter_conv2"), c, c, 3, true);
            conv(&mut out, &format!("{name}.bias_fc"), c, c, 1, true);
            conv(
                &mut out,
                &format!("{name}.sim_conv1"),
                1,
                crate::selfsim::SIM_HIDDEN,
                3,
                true,
            );
            conv(
                &mut out,
                &format!("{name}.sim_conv2"),
                crate::selfsim::SIM_HIDDEN,
                1,
                3,
                true,
            );
            conv(&mut out, &format!("{name}.output_conv"), c, c, 3, true);
        }
        for (name, si, so) in DECODER {
            conv(&mut out, name, wd[si], wd[so], 3, false);
            bn(&mut out, name, wd[so]);
        }
        conv(&mut out, "conv10", wd[0], 3, 3, true);
        out
    }
}

/// Generator weights and the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorWeights<T: Scalar = f32> {
    pub config: GeneratorConfig,
    pub tensors: NamedTensors<T>,
}

impl<T: Scalar> GeneratorWeights<T> {
    /// He-normal convolutions, zero biases, unit BN scale, fresh running stats.
    pub fn init(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = NamedTensors::new();
        for (name, dims) in config.layout() {
            let t = if name.ends_with(".weight") {
                he_normal(dims, dims[1] * dims[2] * dims[3], &mut rng)
            } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
                Tensor::ones(dims)
            } else {
                Tensor::zeros(dims)
            };
            tensors.insert(name, t);
        }
        Ok(GeneratorWeights { config, tensors })
    }

    /// Validates names and dims against the configuration.
    pub fn from_tensors(config: GeneratorConfig, tensors: NamedTensors<T>) -> Result<Self> {
        config.validate()?;
        tensors.check_layout(&config.layout())?;
        Ok(GeneratorWeights { config, tensors })
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn update_running_stats(
        &mut self,
        moments: &[(String, BatchMoments<T>)],
        momentum: T,
    ) -> Result<()> {
        for (layer, m) in moments {
            let mut stats = RunningStats {
                mean: self
                    .tensors
                    .get(&format!("{layer}.bn.running_mean"))?
                    .clone(),
                var: self
                    .tensors
                    .get(&format!("{layer}.bn.running_var"))?
                    .clone(),
            };
            stats.update(m, momentum);
            *self.tensors.get_mut(&format!("{layer}.bn.running_mean"))? = stats.mean;
            *self.tensors.get_mut(&format!("{layer}.bn.running_var"))? = stats.var;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> GeneratorWeights<U> {
        GeneratorWeights {
            config: self.config.clone(),
            tensors: self.tensors.cast(),
        }
    }
}

/// Where the expansion blocks get their input maps from.
pub enum MapSource<'a, N> {
    SelfSim,
    /// Maps for the 1/16, 1/8 and 1/4 scale blocks.
    Noise {
        scale16: &'a N,
        scale8: &'a N,
        scale4: &'a N,
    },
}

/// Batch statistics gathered during a training-mode pass, per BN layer.
pub type LayerMoments<T> = Vec<(String, BatchMoments<T>)>;

struct Net<'a, T: Scalar, O: Ops<T>> {
    ops: &'a O,
    p: &'a Bound<O::Node>,
    mode: BatchNormMode,
    moments: LayerMoments<T>,
}

impl<T: Scalar, O: Ops<T>> Net<'_, T, O> {
    fn conv_bn_relu(&mut self, name: &str, x: &O::Node, stride: usize) -> Result<O::Node> {
        let spec = ConvSpec::new(stride, PaddingMode::partial(1));
        let y = self
            .ops
            .conv2d(x, self.p.get(&format!("{name}.weight"))?, None, &spec)?;
        let gamma = self.p.get(&format!("{name}.bn.gamma"))?;
        let beta = self.p.get(&format!("{name}.bn.beta"))?;
        let eps = T::lit(BN_EPS);
        let y = match self.mode {
            BatchNormMode::Train => {
                let (y, m) = self.ops.batch_norm_train(&y, gamma, beta, eps)?;
                self.moments.push((name.to_string(), m));
                y
            }
            BatchNormMode::Eval => {
                let stats = RunningStats {
                    mean: self
                        .ops
                        .value(self.p.get(&format!("{name}.bn.running_mean"))?),
                    var: self
                        .ops
                        .value(self.p.get(&format!("{name}.bn.running_var"))?),
                };
                self.ops.batch_norm_eval(&y, gamma, beta, &stats, eps)?
            }
        };
        self.ops.relu(&y)
    }

    fn encoder(&mut self, img: &O::Node) -> Result<Vec<O::Node>> {
        let mut stages: Vec<O::Node> = Vec::with_capacity(5);
        let mut x = img.clone();
        for (name, _, so, stride) in ENCODER {
            x = self.conv_bn_relu(name, &x, stride)?;
            if stages.len() == so {
                stages.push(x.clone());
            } else {
                stages[so] = x.clone();
            }
        }
        Ok(stages)
    }

    fn up(&self, x: &O::Node) -> Result<O::Node> {
        let [_, _, h, w] = self.ops.dims(x);
        self.ops.bilinear(x, 2 * h, 2 * w)
    }

    fn sum(&self, a: &O::Node, b: &O::Node, junction: &str) -> Result<O::Node> {
        let (da, db) = (self.ops.dims(a), self.ops.dims(b));
        if da != db {
            return Err(shape_err!("skip sum at {junction}: {da:?} vs {db:?}"));
        }
        self.ops.add(a, b)
    }

    fn forward(&mut self, img: &O::Node, maps: &MapSource<'_, O::Node>) -> Result<O::Node> {
        let stages = self.encoder(img)?;
        let mut blocks = Vec::with_capacity(3);
        for (name, stage) in BLOCKS {
            let feats = &stages[stage];
            let map = match maps {
                MapSource::SelfSim => self.ops.selfsim(feats)?,
                MapSource::Noise {
                    scale16,
                    scale8,
                    scale4,
                } => match stage {
                    2 => (*scale4).clone(),
                    3 => (*scale8).clone(),
                    _ => (*scale16).clone(),
                },
            };
            let params = TransConvBlockParams::from_bound(self.p, name)?;
            blocks.push(transconv_block_ops(self.ops, feats, &map, &params)?);
        }
        let x = self.up(&blocks[2])?;
        let x = self.conv_bn_relu("conv6", &x, 1)?;
        let x = self.sum(&x, &blocks[1], "conv6 + block4")?;
        let x = self.up(&x)?;
        let x = self.conv_bn_relu("conv7", &x, 1)?;
        let x = self.sum(&x, &blocks[0], "conv7 + block3")?;
        let x = self.up(&x)?;
        let x = self.conv_bn_relu("conv8", &x, 1)?;
        let x = self.up(&x)?;
        let x = self.conv_bn_relu("conv9", &x, 1)?;
        let w = self.p.get("conv10.weight")?;
        self.ops
            .conv2d(&x, w, Some(self.p.get("conv10.bias")?), &same3x3())
    }
}

/// Generator pass over any backend. Training mode also returns the batch
/// statistics of every BN layer, in layer order.
pub fn generator_ops<T: Scalar, O: Ops<T>>(
    ops: &O,
    params: &Bound<O::Node>,
    config: &GeneratorConfig,
    img: &O::Node,
    maps: &MapSource<'_, O::Node>,
    mode: BatchNormMode,
) -> Result<(O::Node, LayerMoments<T>)> {
    let [_, c, h, w] = ops.dims(img);
    if c != 3 {
        return Err(shape_err!("generator input needs 3 channels, got {c}"));
    }
    config.check_input(h, w)?;
    let mut net = Net {
        ops,
        p: params,
        mode,
        moments: Vec::new(),
    };
    let out = net.forward(img, maps)?;
    if !ops.value(&out).all_finite() {
        return Err(Error::Numeric(
            "generator produced non-finite values".into(),
        ));
    }
    Ok((out, net.moments))
}

/// Encoder features at scales 1, 1/2, 1/4, 1/8 and 1/16.
pub fn encoder_forward<T: Scalar>(
    img: &Tensor<T>,
    weights: &GeneratorWeights<T>,
    mode: BatchNormMode,
) -> Result<Vec<Tensor<T>>> {
    let [_, c, h, w] = img.dims();
    if c != 3 {
        return Err(shape_err!("generator input needs 3 channels, got {c}"));
    }
    weights.config.check_input(h, w)?;
    let bound = weights.tensors.bind(&Eager, false)?;
    let mut net = Net {
        ops: &Eager,
        p: &bound,
        mode,
        moments: Vec::new(),
    };
    net.encoder(img)
}

/// `[N, 3, H, W]` -> `[N, 3, 2H, 2W]` with eval-mode batch norm.
pub fn generator_forward<T: Scalar>(
    img: &Tensor<T>,
    weights: &GeneratorWeights<T>,
) -> Result<Tensor<T>> {
    let bound = weights.tensors.bind(&Eager, false)?;
    let (out, _) = generator_ops(
        &Eager,
        &bound,
        &weights.config,
        img,
        &MapSource::SelfSim,
        BatchNormMode::Eval,
    )?;
    Ok(out)
}

/// Output size per axis for an `input`-sized image and an `n5`-sized base
/// noise map.
pub fn noise_output_size(input: usize, n5: usize) -> usize {
    16 * n5 + input - 16
}

/// Base noise size giving output `target` from `input`, if one exists.
pub fn noise_base_for_target(input: usize, target: usize) -> Option<usize> {
    let diff = (target + 16).checked_sub(input)?;
    (diff % 16 == 0 && diff >= 16).then_some(diff / 16)
}

/// Generator pass with noise maps in place of the similarity maps.
pub fn generator_forward_noise<T: Scalar>(
    img: &Tensor<T>,
    weights: &GeneratorWeights<T>,
    noise: &NoiseMaps<T>,
) -> Result<Tensor<T>> {
    let n = img.batch();
    let noise = if noise.scale16.batch() == n {
        noise.clone()
    } else if noise.scale16.batch() == 1 {
        noise.repeat(n)?
    } else {
        return Err(shape_err!(
            "noise batch {} for input batch {n}",
            noise.scale16.batch()
        ));
    };
    let [_, _, a, b] = noise.scale16.dims();
    let expect8 = [n, 1, 2 * a - 1, 2 * b - 1];
    let expect4 = [n, 1, 4 * a - 3, 4 * b - 3];
    if noise.scale8.dims() != expect8 || noise.scale4.dims() != expect4 {
        return Err(shape_err!(
            "noise maps {:?} / {:?} / {:?} are inconsistent",
            noise.scale16.dims(),
            noise.scale8.dims(),
            noise.scale4.dims()
        ));
    }
    let bound = weights.tensors.bind(&Eager, false)?;
    let maps = MapSource::Noise {
        scale16: &noise.scale16,
        scale8: &noise.scale8,
        scale4: &noise.scale4,
    };
    let (out, _) = generator_ops(
        &Eager,
        &bound,
        &weights.config,
        img,
        &maps,
        BatchNormMode::Eval,
    )?;
    Ok(out)
}

/// Two generator passes: `[N, 3, H, W]` -> `[N, 3, 4H, 4W]`.
pub fn synthesize_4x<T: Scalar>(
    img: &Tensor<T>,
    weights: &GeneratorWeights<T>,
) -> Result<Tensor<T>> {
    let once = generator_forward(img, weights)?;
    generator_forward(&once, weights)
}
