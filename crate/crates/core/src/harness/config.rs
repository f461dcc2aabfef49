//! Flat `key = value` run configuration, one pair per line, `#` comments.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::train::TrainConfig;
use crate::error::{Error, Result};
use crate::network::RichUNetConfig;

/// Network, optimizer and synthetic-data settings for one run. Unset keys
/// keep the desk-scale defaults: the micro network at 64×64.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub net: RichUNetConfig,
    pub train: TrainConfig,
    /// Side length of generated images for `--synth`.
    pub image_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            net: RichUNetConfig::micro(),
            train: TrainConfig::default(),
            image_size: 64,
        }
    }
}

pub const KEYS: &[&str] = &[
    "in_channels",
    "num_classes",
    "stage_channels",
    "heads",
    "topk",
    "drop_rate",
    "patch_size",
    "bottleneck_channels",
    "reduction",
    "k_attention",
    "fusion_layer",
    "msagf",
    "learning_rate",
    "epochs",
    "batch_size",
    "seed",
    "beta1",
    "beta2",
    "eps",
    "lambda",
    "steps",
    "checkpoint_every",
    "image_size",
];

fn value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("line {line}: cannot parse {key} = {raw:?}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw_line.split('#').next().unwrap().trim();
            if content.is_empty() {
                continue;
            }
            let (key, raw) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected key = value, got {content:?}")))?;
            let (key, raw) = (key.trim(), raw.trim());
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {line}: duplicate key {key}")));
            }
            seen.push(key);
            cfg.set(line, key, raw)?;
        }
        cfg.net.validate()?;
        cfg.train.validate()?;
        if cfg.image_size % cfg.net.spatial_divisor() != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a multiple of {}",
                cfg.image_size,
                cfg.net.spatial_divisor()
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn set(&mut self, line: usize, key: &str, raw: &str) -> Result<()> {
        let (n, t) = (&mut self.net, &mut self.train);
        match key {
            "in_channels" => n.in_channels = value(line, key, raw)?,
            "num_classes" => n.num_classes = value(line, key, raw)?,
            "stage_channels" => {
                let parts = raw
                    .split(',')
                    .map(|p| value(line, key, p.trim()))
                    .collect::<Result<Vec<usize>>>()?;
                n.stage_channels = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("line {line}: stage_channels needs three values")))?;
            }
            "heads" => n.heads = value(line, key, raw)?,
            "topk" => n.topk = value(line, key, raw)?,
            "drop_rate" => n.drop_rate = value(line, key, raw)?,
            "patch_size" => n.patch_size = value(line, key, raw)?,
            "bottleneck_channels" => n.bottleneck_channels = value(line, key, raw)?,
            "reduction" => n.reduction = value(line, key, raw)?,
            "k_attention" => n.modules.k_attention = value(line, key, raw)?,
            "fusion_layer" => n.modules.fusion_layer = value(line, key, raw)?,
            "msagf" => n.modules.msagf = value(line, key, raw)?,
            "learning_rate" => t.learning_rate = value(line, key, raw)?,
            "epochs" => t.epochs = value(line, key, raw)?,
            "batch_size" => t.batch_size = value(line, key, raw)?,
            "seed" => t.seed = value(line, key, raw)?,
            "beta1" => t.beta1 = value(line, key, raw)?,
            "beta2" => t.beta2 = value(line, key, raw)?,
            "eps" => t.eps = value(line, key, raw)?,
            "lambda" => t.lambda = value(line, key, raw)?,
            "steps" => t.steps = Some(value(line, key, raw)?),
            "checkpoint_every" => t.checkpoint_every = value(line, key, raw)?,
            "image_size" => self.image_size = value(line, key, raw)?,
            _ => return Err(Error::Config(format!("line {line}: unknown key {key:?}"))),
        }
        Ok(())
    }
}
