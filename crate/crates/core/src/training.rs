//! Data pipeline, alternating adversarial optimization, learning-rate
//! schedule and checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crc::{Crc, CRC_64_ECMA_182};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::{Ops, Tape};
use crate::error::{shape_err, Error, Result};
use crate::generator::{generator_ops, GeneratorConfig, GeneratorWeights, MapSource};
use crate::io::{
    discriminator_from_bytes, discriminator_to_bytes, generator_from_bytes, generator_to_bytes,
    load_image,
};
use crate::losses::{
    discriminator_ops, draw_gan_anchors, gan_pairs, lsgan_term, perceptual_ops, style_ops,
    total_loss, DiscriminatorConfig, DiscriminatorWeights, FeatureExtractor, LossReport,
    LossWeights,
};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::NamedTensors;
use crate::tensor::{bilinear_upsample, center_crop, BatchNormMode, Scalar, Tensor, BN_MOMENTUM};

/// One target texture and its center crop.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    /// `[1, 3, 2H, 2W]`.
    pub target: Tensor<f32>,
    /// `[1, 3, H, W]`, the center of `target`.
    pub input: Tensor<f32>,
}

impl TrainingSample {
    /// Resizes `image` to `2h x 2w` and takes the center `h x w` crop.
    pub fn from_image(image: &Tensor<f32>, h: usize, w: usize) -> Result<Self> {
        let target = bilinear_upsample(image, 2 * h, 2 * w)?;
        let input = center_crop(&target, h, w)?;
        Ok(TrainingSample { target, input })
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<TrainingSample>,
    /// Files that could not be decoded, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Loads every decodable image in `dir` (sorted by file name) as a sample
/// with input size `h x w`. `threads` decoding workers; sample order does not
/// depend on it.
pub fn load_dataset(dir: impl AsRef<Path>, h: usize, w: usize, threads: usize) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let decode = |p: &PathBuf| load_image(p).and_then(|img| TrainingSample::from_image(&img, h, w));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Dataset(format!("thread pool: {e}")))?;
    let results: Vec<Result<TrainingSample>> =
        pool.install(|| paths.par_iter().map(decode).collect());
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for (p, r) in paths.into_iter().zip(results) {
        match r {
            Ok(s) => samples.push(s),
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                skipped.push((p, e.to_string()));
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!(
            "no usable images in {}",
            dir.display()
        )));
    }
    Ok(Dataset { samples, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Input size; targets are twice as large.
    pub h: usize,
    pub w: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub epochs: usize,
    /// Stops after this many steps in total, if set.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub extractor_seed: u64,
    pub checkpoint_every: usize,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            h: 64,
            w: 64,
            batch_size: 1,
            lr0: 0.0032,
            lr_decay_every: 150,
            lr_decay_factor: 0.1,
            epochs: 600,
            max_steps: None,
            seed: 0,
            extractor_seed: 0,
            checkpoint_every: 50,
            loss: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            generator: GeneratorConfig::desk(),
            discriminator: DiscriminatorConfig::desk(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.generator
            .check_input(self.h, self.w)
            .map_err(|e| Error::Config(format!("h/w: {e}")))?;
        self.loss.validate()?;
        let bad = |k: &str, why: &str| Err(Error::Config(format!("`{k}` {why}")));
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return bad("lr0", "must be a positive number");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every", "must be >= 1");
        }
        if !(self.lr_decay_factor > 0.0) {
            return bad("lr_decay_factor", "must be positive");
        }
        if self.discriminator.in_channels != 6 {
            return bad("discriminator.in_channels", "must be 6");
        }
        Ok(())
    }
}

/// `lr0 * factor^floor(epoch / decay_every)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0
        * cfg
            .lr_decay_factor
            .powi((epoch / cfg.lr_decay_every) as i32)
}

/// Everything a run needs to continue exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState<T: Scalar = f32> {
    pub generator: GeneratorWeights<T>,
    pub discriminator: DiscriminatorWeights<T>,
    pub opt_g: Optimizer<T>,
    pub opt_d: Optimizer<T>,
    pub epoch: usize,
    /// Batches of `epoch` already consumed.
    pub step_in_epoch: usize,
    pub global_step: u64,
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        Ok(TrainState {
            generator: GeneratorWeights::init(cfg.generator.clone(), cfg.seed)?,
            discriminator: DiscriminatorWeights::init(
                cfg.discriminator.clone(),
                cfg.seed.wrapping_add(1),
            ),
            opt_g: Optimizer::new(cfg.optimizer),
            opt_d: Optimizer::new(cfg.optimizer),
            epoch: 0,
            step_in_epoch: 0,
            global_step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2)),
        })
    }
}

/// Losses and gradients of one step.
#[derive(Debug, Clone)]
pub struct StepOutcome<T: Scalar> {
    pub report: LossReport,
    pub g_grads: NamedTensors<T>,
    pub d_grads: NamedTensors<T>,
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{name} loss is {v}")))
    }
}

/// One generator forward in training mode, a discriminator update on the
/// detached output, then a generator update against the updated
/// discriminator. Running BN statistics are updated from the generator pass.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    input: &Tensor<T>,
    target: &Tensor<T>,
    ext: &FeatureExtractor<T>,
    weights: &LossWeights,
    lr: f64,
) -> Result<StepOutcome<T>> {
    let [n, _, h, w] = input.dims();
    if target.dims() != [n, 3, 2 * h, 2 * w] {
        return Err(shape_err!(
            "target {:?} for input {:?}",
            target.dims(),
            input.dims()
        ));
    }
    let g_tape = Tape::<T>::new();
    let g_params = state.generator.tensors.bind(&g_tape, true)?;
    let x = g_tape.constant(input.clone())?;
    let (out, moments) = generator_ops(
        &g_tape,
        &g_params,
        &state.generator.config,
        &x,
        &MapSource::SelfSim,
        BatchNormMode::Train,
    )?;
    let (fake_anchors, real_anchors) = draw_gan_anchors(n, (2 * h, 2 * w), (h, w), &mut state.rng)?;

    let d_tape = Tape::<T>::new();
    let d_params = state.discriminator.tensors.bind(&d_tape, true)?;
    let d_input = d_tape.constant(input.clone())?;
    let d_fake = d_tape.constant(g_tape.value(out))?;
    let d_real = d_tape.constant(target.clone())?;
    let fake_logits = discriminator_ops(
        &d_tape,
        &d_params,
        &gan_pairs(&d_tape, &d_input, &d_fake, &fake_anchors)?,
    )?;
    let real_logits = discriminator_ops(
        &d_tape,
        &d_params,
        &gan_pairs(&d_tape, &d_input, &d_real, &real_anchors)?,
    )?;
    let d_loss = d_tape.add(
        &lsgan_term(&d_tape, &real_logits, T::one())?,
        &lsgan_term(&d_tape, &fake_logits, T::zero())?,
    )?;
    let d_loss = d_tape.scale(&d_loss, T::lit(0.5))?;
    let gan_d = finite("discriminator", d_tape.value(d_loss).data()[0].as_f64())?;
    let d_grads = d_params.collect_grads(&d_tape, &d_tape.backward_scalar(d_loss)?);
    state
        .opt_d
        .update(&mut state.discriminator.tensors, &d_grads, lr)?;

    let tgt_pyramid = ext.pyramid(target)?;
    let tgt_nodes = tgt_pyramid
        .activations
        .into_iter()
        .map(|t| g_tape.constant(t))
        .collect::<Result<Vec<_>>>()?;
    let out_nodes = ext.pyramid_ops(&g_tape, &out)?;
    let perceptual = perceptual_ops(&g_tape, &out_nodes, &tgt_nodes)?;
    let style = style_ops(&g_tape, &out_nodes, &tgt_nodes)?;
    let d_frozen = state.discriminator.tensors.bind(&g_tape, false)?;
    let g_input = g_tape.constant(input.clone())?;
    let g_logits = discriminator_ops(
        &g_tape,
        &d_frozen,
        &gan_pairs(&g_tape, &g_input, &out, &fake_anchors)?,
    )?;
    let gan_g = lsgan_term(&g_tape, &g_logits, T::one())?;
    let total = g_tape.add(
        &g_tape.add(
            &g_tape.scale(&perceptual, T::lit(weights.perceptual))?,
            &g_tape.scale(&style, T::lit(weights.style))?,
        )?,
        &g_tape.scale(&gan_g, T::lit(weights.gan))?,
    )?;
    let scalar = |v| g_tape.value(v).data()[0].as_f64();
    let report = LossReport {
        perceptual: finite("perceptual", scalar(perceptual))?,
        style: finite("style", scalar(style))?,
        gan_g: finite("generator adversarial", scalar(gan_g))?,
        gan_d,
        total: 0.0,
    };
    let report = LossReport {
        total: finite(
            "total",
            total_loss(report.perceptual, report.style, report.gan_g, weights),
        )?,
        ..report
    };
    let g_grads = g_params.collect_grads(&g_tape, &g_tape.backward_scalar(total)?);
    state
        .opt_g
        .update(&mut state.generator.tensors, &g_grads, lr)?;
    state
        .generator
        .update_running_stats(&moments, T::lit(BN_MOMENTUM))?;
    Ok(StepOutcome {
        report,
        g_grads,
        d_grads,
    })
}

/// Sample order of `epoch`, a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng);
    idx
}

fn batch_tensors(dataset: &Dataset, idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let inputs: Vec<_> = idx
        .iter()
        .map(|&i| dataset.samples[i].input.clone())
        .collect();
    let targets: Vec<_> = idx
        .iter()
        .map(|&i| dataset.samples[i].target.clone())
        .collect();
    Ok((Tensor::stack(&inputs)?, Tensor::stack(&targets)?))
}

const MAGIC: &[u8; 4] = b"TXSP";
pub const CHECKPOINT_VERSION: u32 = 1;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    epoch: usize,
    step_in_epoch: usize,
    global_step: u64,
    rng_seed: String,
    rng_word_pos: String,
    config: Value,
}

fn push_block(out: &mut Vec<u8>, block: &[u8]) {
    out.extend_from_slice(&(block.len() as u64).to_le_bytes());
    out.extend_from_slice(block);
}

fn take_block<'a>(bytes: &mut &'a [u8]) -> Result<&'a [u8]> {
    let corrupt = || Error::Integrity("checkpoint payload is truncated".into());
    if bytes.len() < 8 {
        return Err(corrupt());
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() - 8 < len {
        return Err(corrupt());
    }
    let block = &bytes[8..8 + len];
    *bytes = &bytes[8 + len..];
    Ok(block)
}

/// Serializes a training state with a config echo.
pub fn checkpoint_to_bytes(state: &TrainState<f32>, config: &TrainConfig) -> Result<Vec<u8>> {
    let seed: String = state
        .rng
        .get_seed()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    let meta = CheckpointMeta {
        epoch: state.epoch,
        step_in_epoch: state.step_in_epoch,
        global_step: state.global_step,
        rng_seed: seed,
        rng_word_pos: format!("{:x}", state.rng.get_word_pos()),
        config: serde_json::to_value(config)?,
    };
    let mut payload = Vec::new();
    push_block(&mut payload, &generator_to_bytes(&state.generator)?);
    push_block(&mut payload, &discriminator_to_bytes(&state.discriminator)?);
    push_block(&mut payload, &state.opt_g.to_bytes()?);
    push_block(&mut payload, &state.opt_d.to_bytes()?);
    push_block(&mut payload, &serde_json::to_vec(&meta)?);
    let mut out = Vec::with_capacity(payload.len() + 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&CRC64.checksum(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses a checkpoint, verifying magic, version and checksum. Returns the
/// state and the config it was written with.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(TrainState<f32>, TrainConfig)> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Integrity("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Integrity(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let crc = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let mut payload = &bytes[16..];
    if CRC64.checksum(payload) != crc {
        return Err(Error::Integrity("checkpoint checksum mismatch".into()));
    }
    let generator = generator_from_bytes(take_block(&mut payload)?)?;
    let discriminator = discriminator_from_bytes(take_block(&mut payload)?)?;
    let opt_g = Optimizer::from_bytes(take_block(&mut payload)?)?;
    let opt_d = Optimizer::from_bytes(take_block(&mut payload)?)?;
    let meta: CheckpointMeta = serde_json::from_slice(take_block(&mut payload)?)?;
    if !payload.is_empty() {
        return Err(Error::Integrity(
            "trailing bytes after checkpoint payload".into(),
        ));
    }
    let bad_rng = || Error::Integrity("bad RNG state in checkpoint".into());
    if meta.rng_seed.len() != 64 {
        return Err(bad_rng());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&meta.rng_seed[2 * i..2 * i + 2], 16).map_err(|_| bad_rng())?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(u128::from_str_radix(&meta.rng_word_pos, 16).map_err(|_| bad_rng())?);
    let config: TrainConfig = serde_json::from_value(meta.config)
        .map_err(|e| Error::Integrity(format!("checkpoint config: {e}")))?;
    Ok((
        TrainState {
            generator,
            discriminator,
            opt_g,
            opt_d,
            epoch: meta.epoch,
            step_in_epoch: meta.step_in_epoch,
            global_step: meta.global_step,
            rng,
        },
        config,
    ))
}

pub fn checkpoint_save(
    path: impl AsRef<Path>,
    state: &TrainState<f32>,
    config: &TrainConfig,
) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, checkpoint_to_bytes(state, config)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn checkpoint_load(path: impl AsRef<Path>) -> Result<(TrainState<f32>, TrainConfig)> {
    checkpoint_from_bytes(&fs::read(path)?)
}

/// One line of the JSONL loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub global_step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossReport,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub state: TrainState<f32>,
    pub log: Vec<LogRecord>,
    /// Most recent checkpoint written, if any.
    pub last_checkpoint: Option<PathBuf>,
}

/// Runs (or resumes) training. Writes `loss.jsonl`, periodic
/// `epoch_{k}.ckpt` files, `last.ckpt` and `generator.weights` into
/// `out_dir` when given.
pub fn train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
    resume: Option<TrainState<f32>>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let [_, _, h, w] = dataset.samples[0].input.dims();
    if (h, w) != (cfg.h, cfg.w) {
        return Err(Error::Config(format!(
            "dataset built for {h}x{w}, config says {}x{}",
            cfg.h, cfg.w
        )));
    }
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::new(cfg)?,
    };
    let ext = FeatureExtractor::random(cfg.extractor_seed);
    let mut log_file = match out_dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            Some(
                fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(d.join("loss.jsonl"))?,
            )
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut last_checkpoint: Option<PathBuf> = None;
    let batches = dataset.len().div_ceil(cfg.batch_size);
    let out_of_steps = |s: &TrainState<f32>| cfg.max_steps.is_some_and(|m| s.global_step >= m);
    'epochs: while state.epoch < cfg.epochs {
        let order = epoch_order(cfg.seed, state.epoch, dataset.len());
        let lr = lr_schedule(state.epoch, cfg);
        while state.step_in_epoch < batches {
            if out_of_steps(&state) {
                break 'epochs;
            }
            let k = state.step_in_epoch;
            let idx = &order[k * cfg.batch_size..((k + 1) * cfg.batch_size).min(order.len())];
            let (input, target) = batch_tensors(dataset, idx)?;
            let outcome = train_step(&mut state, &input, &target, &ext, &cfg.loss, lr).map_err(
                |e| match e {
                    Error::Numeric(m) => Error::Numeric(match &last_checkpoint {
                        Some(p) => format!("{m}; last good checkpoint: {}", p.display()),
                        None => format!("{m}; no checkpoint written yet"),
                    }),
                    e => e,
                },
            )?;
            let record = LogRecord {
                epoch: state.epoch,
                step: k,
                global_step: state.global_step,
                lr,
                losses: outcome.report,
            };
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&record)?)?;
            }
            log.push(record);
            state.step_in_epoch += 1;
            state.global_step += 1;
        }
        state.epoch += 1;
        state.step_in_epoch = 0;
        if let Some(d) = out_dir {
            if cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0 {
                let p = d.join(format!("epoch_{}.ckpt", state.epoch));
                checkpoint_save(&p, &state, cfg)?;
                last_checkpoint = Some(p);
            }
        }
    }
    if let Some(d) = out_dir {
        let p = d.join("last.ckpt");
        checkpoint_save(&p, &state, cfg)?;
        crate::io::save_generator(d.join("generator.weights"), &state.generator)?;
        last_checkpoint = Some(p);
    }
    Ok(TrainSummary {
        state,
        log,
        last_checkpoint,
    })
}
