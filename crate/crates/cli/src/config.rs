//! TOML run configuration for `txsp train`.
//!
//! The file mirrors [`TrainConfig`]: top-level scalars plus `[loss]`,
//! `[optimizer]`, `[generator]` and `[discriminator]` tables. Omitted
//! top-level keys and tables take their defaults; a table that is present
//! must be complete. Unknown keys are rejected.

use std::fs;
use std::path::Path;

use anyhow::Context;
use txsp_core::training::TrainConfig;

use crate::Usage;

/// Flags that take precedence over the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub epochs: Option<usize>,
    pub max_steps: Option<u64>,
    pub seed: Option<u64>,
    pub batch_size: Option<usize>,
}

pub fn parse(text: &str) -> Result<TrainConfig, Usage> {
    toml::from_str(text).map_err(|e| Usage(format!("invalid config: {}", e.message())))
}

pub fn load(path: Option<&Path>, over: &Overrides) -> anyhow::Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            parse(&text).with_context(|| p.display().to_string())?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = over.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = over.max_steps {
        cfg.max_steps = Some(v);
    }
    if let Some(v) = over.seed {
        cfg.seed = v;
    }
    if let Some(v) = over.batch_size {
        cfg.batch_size = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(parse("").unwrap(), TrainConfig::default());
    }

    #[test]
    fn nested_tables() {
        let cfg = parse(
            "h = 32\nw = 64\nepochs = 3\n[loss]\nperceptual = 1.0\nstyle = 2.0\ngan = 0.0\n\
             [generator]\nbase_width = 64\nwidth_multiplier = 0.125\ninput_dims_divisor = 32\nmode = \"noise\"\n\
             [optimizer]\nkind = \"sgd\"\n",
        )
        .unwrap();
        assert_eq!((cfg.h, cfg.w, cfg.epochs), (32, 64, 3));
        assert_eq!(cfg.loss.style, 2.0);
        assert_eq!(cfg.generator.width_multiplier, 0.125);
        assert_eq!(cfg.generator.mode, txsp_core::GeneratorMode::Noise);
        assert_eq!(cfg.discriminator, TrainConfig::default().discriminator);
        assert!(parse("[loss]\nstyle = 2.0\n")
            .unwrap_err()
            .0
            .contains("perceptual"));
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = parse("learning_rate = 0.1\n").unwrap_err();
        assert!(err.0.contains("learning_rate"), "{}", err.0);
        let err = parse("[generator]\nbase_width = 64\nwidth_multiplier = 1.0\ninput_dims_divisor = 32\nmode = \"noise\"\nwidth = 3\n").unwrap_err();
        assert!(err.0.contains("`width`"), "{}", err.0);
    }
}
