//! `txsp`: texture expansion from the command line.
//!
//! Exit codes: 0 success, 2 usage or shape error, 3 missing or unreadable
//! artifact, 4 numeric failure. `TXSP_THREADS` (default 1) sets the worker
//! thread count.

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use txsp_core::expansion::make_noise_maps;
use txsp_core::generator::{
    encoder_forward, generator_forward, generator_forward_noise, noise_output_size, synthesize_4x,
};
use txsp_core::io::{load_generator, load_image, save_gray_png, save_png};
use txsp_core::metrics::{
    crop_eval, ssim, CropEvalOptions, Embedder, PixelEmbedder, Protocol, PyramidEmbedder,
    SsimConfig,
};
use txsp_core::selfsim::selfsim_fast;
use txsp_core::tensor::BatchNormMode;
use txsp_core::training::{checkpoint_load, load_dataset, train};
use txsp_core::{Error, GeneratorMode, GeneratorWeights, Tensor};

/// A usage problem detected by the CLI itself (exit 2).
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(
    name = "txsp",
    version,
    about = "Texture expansion with self-similarity guided transposed convolution"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Selfsim,
    Noise,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Metric {
    Ssim,
    Cfid,
    Clpips,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EmbedderKind {
    Pyramid,
    Pixels,
}

#[derive(Subcommand)]
enum Command {
    /// Expand a texture image.
    Synthesize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the mode recorded in the weights.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Output size factor: 2 or 4 in selfsim mode.
        #[arg(long, default_value_t = 2)]
        scale: usize,
        /// Noise-mode output size, `N` or `HxW`; defaults to scale x input.
        #[arg(long)]
        size: Option<String>,
        /// Round an unreachable noise-mode size to the nearest reachable one.
        #[arg(long)]
        snap: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a generator on a directory of images.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Write the self-similarity map of one encoder scale as a grayscale PNG.
    Selfsim {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Feature scale divisor: 4, 8 or 16.
        #[arg(long)]
        scale: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two images; prints a JSON report.
    Eval {
        /// Output image (cropped for cfid and clpips).
        #[arg(long)]
        a: PathBuf,
        /// Reference image.
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        crops: usize,
        /// Square crop side; protocol default when omitted.
        #[arg(long)]
        crop_size: Option<usize>,
        #[arg(long, value_enum, default_value_t = EmbedderKind::Pyramid)]
        embedder: EmbedderKind,
    },
}

fn threads() -> anyhow::Result<usize> {
    match std::env::var("TXSP_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Usage(format!(
                "TXSP_THREADS must be a positive integer, got `{v}`"
            ))
            .into()),
        },
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Numeric(_) | Error::StaleTape => 4,
                Error::Archive(_) | Error::Integrity(_) | Error::Io(_) => 3,
                Error::Image {
                    source: image::ImageError::IoError(_),
                    ..
                } => 3,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let n = threads()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .ok();
    match cli.command {
        Command::Synthesize {
            input,
            weights,
            out,
            mode,
            scale,
            size,
            snap,
            seed,
        } => synthesize(
            &input,
            &weights,
            &out,
            mode,
            scale,
            size.as_deref(),
            snap,
            seed,
        ),
        Command::Train {
            data,
            config,
            out_dir,
            resume,
            epochs,
            max_steps,
            seed,
            batch_size,
        } => {
            let over = config::Overrides {
                epochs,
                max_steps,
                seed,
                batch_size,
            };
            train_cmd(
                &data,
                config.as_deref(),
                &out_dir,
                resume.as_deref(),
                &over,
                n,
            )
        }
        Command::Selfsim {
            input,
            weights,
            scale,
            out,
        } => selfsim_cmd(&input, &weights, scale, &out),
        Command::Eval {
            a,
            b,
            metric,
            seed,
            crops,
            crop_size,
            embedder,
        } => eval_cmd(&a, &b, metric, seed, crops, crop_size, embedder),
    }
}

fn load_weights(path: &Path) -> anyhow::Result<GeneratorWeights<f32>> {
    load_generator(path).with_context(|| format!("loading weights {}", path.display()))
}

fn load_input(path: &Path) -> anyhow::Result<Tensor<f32>> {
    load_image(path).with_context(|| format!("reading {}", path.display()))
}

/// Output sizes reachable from an `input`-pixel axis in noise mode,
/// `input + 16 k`: the one requested, or the nearest below and above.
fn reachable(input: usize, target: usize) -> Result<usize, (Option<usize>, usize)> {
    if target >= input && (target - input) % 16 == 0 {
        return Ok(target);
    }
    if target < input {
        return Err((None, input));
    }
    let below = input + (target - input) / 16 * 16;
    Err((Some(below), below + 16))
}

fn resolve_axis(axis: &str, input: usize, target: usize, snap: bool) -> anyhow::Result<usize> {
    match reachable(input, target) {
        Ok(t) => Ok(t),
        Err((below, above)) => {
            let nearest = match below {
                Some(b) if target - b < above - target => b,
                _ => above,
            };
            if snap {
                log::warn!("{axis}: {target} is not reachable from {input}, using {nearest}");
                Ok(nearest)
            } else {
                let options = match below {
                    Some(b) => format!("{b} or {above}"),
                    None => format!("{above}"),
                };
                Err(Usage(format!(
                    "noise-mode {axis} {target} is not reachable from input {input} (sizes are {input} + 16k); \
                     nearest: {options}; pass --snap to round"
                ))
                .into())
            }
        }
    }
}

fn parse_size(s: &str) -> Result<(usize, usize), Usage> {
    let bad = || Usage(format!("--size must be N or HxW, got `{s}`"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((
            h.trim().parse().map_err(|_| bad())?,
            w.trim().parse().map_err(|_| bad())?,
        )),
        None => {
            let n = s.trim().parse().map_err(|_| bad())?;
            Ok((n, n))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn synthesize(
    input: &Path,
    weights: &Path,
    out: &Path,
    mode: Option<Mode>,
    scale: usize,
    size: Option<&str>,
    snap: bool,
    seed: u64,
) -> anyhow::Result<()> {
    let g = load_weights(weights)?;
    let img = load_input(input)?;
    let (h, w) = (img.height(), img.width());
    let mode = mode.unwrap_or(match g.config.mode {
        GeneratorMode::SelfSim => Mode::Selfsim,
        GeneratorMode::Noise => Mode::Noise,
    });
    let result = match mode {
        Mode::Selfsim => {
            if size.is_some() {
                bail!(Usage("--size applies to noise mode only".into()));
            }
            match scale {
                2 => generator_forward(&img, &g)?,
                4 => synthesize_4x(&img, &g)?,
                _ => bail!(Usage(format!(
                    "selfsim mode supports --scale 2 or 4, got {scale}"
                ))),
            }
        }
        Mode::Noise => {
            g.config.check_input(h, w)?;
            let (th, tw) = match size {
                Some(s) => parse_size(s)?,
                None => (scale * h, scale * w),
            };
            let th = resolve_axis("height", h, th, snap)?;
            let tw = resolve_axis("width", w, tw, snap)?;
            let base = ((th + 16 - h) / 16, (tw + 16 - w) / 16);
            debug_assert_eq!(noise_output_size(h, base.0), th);
            let maps = make_noise_maps(base, &mut ChaCha8Rng::seed_from_u64(seed))?;
            generator_forward_noise(&img, &g, &maps)?
        }
    };
    save_png(out, &result, 0)?;
    println!(
        "wrote {} ({}x{})",
        out.display(),
        result.height(),
        result.width()
    );
    Ok(())
}

fn train_cmd(
    data: &Path,
    config: Option<&Path>,
    out_dir: &Path,
    resume: Option<&Path>,
    over: &config::Overrides,
    threads: usize,
) -> anyhow::Result<()> {
    let cfg = config::load(config, over)?;
    let state = match resume {
        Some(p) => {
            let (state, _) =
                checkpoint_load(p).with_context(|| format!("resuming from {}", p.display()))?;
            if state.generator.config != cfg.generator
                || state.discriminator.config != cfg.discriminator
            {
                bail!(Usage(format!(
                    "checkpoint {} was written for a different network configuration",
                    p.display()
                )));
            }
            Some(state)
        }
        None => None,
    };
    let dataset = load_dataset(data, cfg.h, cfg.w, threads)?;
    for (p, why) in &dataset.skipped {
        eprintln!("warning: skipped {}: {why}", p.display());
    }
    let summary = train(&cfg, &dataset, Some(out_dir), state)?;
    let (first, last) = (summary.log.first(), summary.log.last());
    let feature = |r: &txsp_core::training::LogRecord| r.losses.perceptual + r.losses.style;
    println!(
        "{}",
        json!({
            "samples": dataset.len(),
            "steps": summary.log.len(),
            "epoch": summary.state.epoch,
            "first_feature_loss": first.map(feature),
            "last_feature_loss": last.map(feature),
            "checkpoint": summary.last_checkpoint,
        })
    );
    Ok(())
}

fn selfsim_cmd(input: &Path, weights: &Path, scale: usize, out: &Path) -> anyhow::Result<()> {
    let stage = match scale {
        4 => 2,
        8 => 3,
        16 => 4,
        _ => bail!(Usage(format!("--scale must be 4, 8 or 16, got {scale}"))),
    };
    let g = load_weights(weights)?;
    let img = load_input(input)?;
    let feats = encoder_forward(&img, &g, BatchNormMode::Eval)?;
    let map = selfsim_fast(&feats[stage])?;
    save_gray_png(out, &map.scores)?;
    println!(
        "wrote {} ({}x{})",
        out.display(),
        map.scores.height(),
        map.scores.width()
    );
    Ok(())
}

fn eval_cmd(
    a: &Path,
    b: &Path,
    metric: Metric,
    seed: u64,
    crops: usize,
    crop_size: Option<usize>,
    embedder: EmbedderKind,
) -> anyhow::Result<()> {
    let (x, y) = (load_input(a)?, load_input(b)?);
    let report = match metric {
        Metric::Ssim => json!({
            "metric": "ssim",
            "value": ssim(&x, &y, &SsimConfig::default())?,
            "protocol": null,
            "seed": null,
            "embedder": null,
        }),
        Metric::Cfid | Metric::Clpips => {
            let protocol = match metric {
                Metric::Cfid => Protocol::CFid,
                _ => Protocol::CLpipsLike,
            };
            let emb: Box<dyn Embedder> = match embedder {
                EmbedderKind::Pyramid => Box::new(PyramidEmbedder::new(seed)),
                EmbedderKind::Pixels => Box::new(PixelEmbedder),
            };
            let options = CropEvalOptions {
                crops,
                crop_size: crop_size.map(|s| (s, s)),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let value = crop_eval(&x, &y, emb.as_ref(), protocol, &options, &mut rng)?;
            eprintln!(
                "note: {} uses the `{}` embedder; values compare only with each other, not with pretrained-network scores",
                if matches!(metric, Metric::Cfid) { "cfid" } else { "clpips" },
                emb.id()
            );
            json!({
                "metric": if matches!(metric, Metric::Cfid) { "cfid" } else { "clpips" },
                "value": value,
                "protocol": protocol,
                "seed": seed,
                "embedder": emb.id(),
            })
        }
    };
    println!("{report}");
    Ok(())
}
