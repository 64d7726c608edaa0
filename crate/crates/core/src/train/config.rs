use std::path::Path;

use super::optim::{AdamWConfig, PlateauConfig};
use crate::data::PipelineConfig;
use crate::error::{Error, Result};
use crate::loss::{AdversarialReduction, ContentReduction, ADVERSARIAL_WEIGHT};
use crate::model::{ConvStyle, DiscriminatorConfig, ExtractorConfig, GeneratorConfig};

/// Everything that defines a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub generator: GeneratorConfig,
    pub generator_style: ConvStyle,
    pub discriminator: DiscriminatorConfig,
    pub extractor: ExtractorConfig,
    pub pipeline: PipelineConfig,
    pub batch_size: usize,
    pub epochs: u64,
    pub seed: u64,
    pub adam_g: AdamWConfig,
    pub adam_d: AdamWConfig,
    pub plateau: PlateauConfig,
    pub adversarial_weight: f64,
    pub content_reduction: ContentReduction,
    pub adversarial_reduction: AdversarialReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            generator: GeneratorConfig::default(),
            generator_style: ConvStyle::Separable,
            discriminator: DiscriminatorConfig::default(),
            extractor: ExtractorConfig::default(),
            pipeline: PipelineConfig::default(),
            batch_size: 16,
            epochs: 10,
            seed: 0,
            adam_g: AdamWConfig::default(),
            adam_d: AdamWConfig::default(),
            plateau: PlateauConfig::default(),
            adversarial_weight: ADVERSARIAL_WEIGHT,
            content_reduction: ContentReduction::default(),
            adversarial_reduction: AdversarialReduction::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for key `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.extractor.validate()?;
        self.pipeline.validate()?;
        self.adam_g.validate()?;
        self.adam_d.validate()?;
        self.plateau.validate()?;
        if self.pipeline.scale != self.generator.upscale_factor {
            return Err(Error::Config(format!(
                "pipeline scale {} differs from generator upscale factor {}",
                self.pipeline.scale, self.generator.upscale_factor
            )));
        }
        if self.generator.in_channels != 3 || self.discriminator.in_channels != 3 || self.extractor.in_channels != 3 {
            return Err(Error::Config("training works on 3-channel images".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.adversarial_weight >= 0.0) {
            return Err(Error::Config("adversarial_weight must be non-negative".into()));
        }
        Ok(())
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => {
                self.seed = parse(key, value)?;
                self.pipeline.seed = self.seed;
            }
            "batch_size" => self.batch_size = parse(key, value)?,
            "crop_size" => self.pipeline.crop_size = parse(key, value)?,
            "scale" => {
                self.pipeline.scale = parse(key, value)?;
                self.generator.upscale_factor = self.pipeline.scale;
            }
            "flip_prob" => self.pipeline.flip_prob = parse(key, value)?,
            "rot90_prob" => self.pipeline.rot90_prob = parse(key, value)?,
            "base_channels" => self.generator.base_channels = parse(key, value)?,
            "num_residual_blocks" => self.generator.num_residual_blocks = parse(key, value)?,
            "generator_style" => {
                self.generator_style = match value {
                    "separable" | "dsconv" => ConvStyle::Separable,
                    "standard" => ConvStyle::Standard,
                    _ => return Err(Error::Config(format!("invalid value `{value}` for key `{key}`"))),
                }
            }
            "disc_channels" => self.discriminator.block_channels = parse_list(key, value)?,
            "disc_strides" => self.discriminator.strides = parse_list(key, value)?,
            "disc_pool_size" => self.discriminator.pool_size = parse(key, value)?,
            "disc_hidden_units" => self.discriminator.hidden_units = parse(key, value)?,
            "extractor_channels" => self.extractor.channels = parse_list(key, value)?,
            "extractor_strides" => self.extractor.strides = parse_list(key, value)?,
            "extractor_tap" => self.extractor.tap = parse(key, value)?,
            "lr" => {
                self.adam_g.lr = parse(key, value)?;
                self.adam_d.lr = self.adam_g.lr;
            }
            "lr_g" => self.adam_g.lr = parse(key, value)?,
            "lr_d" => self.adam_d.lr = parse(key, value)?,
            "beta1" => {
                self.adam_g.beta1 = parse(key, value)?;
                self.adam_d.beta1 = self.adam_g.beta1;
            }
            "beta2" => {
                self.adam_g.beta2 = parse(key, value)?;
                self.adam_d.beta2 = self.adam_g.beta2;
            }
            "eps" => {
                self.adam_g.eps = parse(key, value)?;
                self.adam_d.eps = self.adam_g.eps;
            }
            "weight_decay" => {
                self.adam_g.weight_decay = parse(key, value)?;
                self.adam_d.weight_decay = self.adam_g.weight_decay;
            }
            "plateau_factor" => self.plateau.factor = parse(key, value)?,
            "plateau_patience" => self.plateau.patience = parse(key, value)?,
            "min_lr" => self.plateau.min_lr = parse(key, value)?,
            "adversarial_weight" => self.adversarial_weight = parse(key, value)?,
            "content_reduction" => {
                self.content_reduction = match value {
                    "mean" => ContentReduction::Mean,
                    "channel_sum" => ContentReduction::ChannelSum,
                    _ => return Err(Error::Config(format!("invalid value `{value}` for key `{key}`"))),
                }
            }
            "adversarial_reduction" => {
                self.adversarial_reduction = match value {
                    "sum" => AdversarialReduction::Sum,
                    "mean" => AdversarialReduction::Mean,
                    _ => return Err(Error::Config(format!("invalid value `{value}` for key `{key}`"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Overlay flat `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }
}
