use super::checkpoint::{Checkpoint, NamedTensor};
use super::graph::Layer;
use super::ModelGraph;
use crate::error::{Error, Result};
use crate::nn::{BatchNormState, ConvParams, LinearParams, LEAKY_SLOPE, PRELU_INIT};

pub const CONFIG_RECORD: &str = "meta.config";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    Generator,
    Discriminator,
    Extractor,
}

/// Whether feature convolutions are depthwise-separable or standard.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvStyle {
    Separable,
    Standard,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub num_residual_blocks: usize,
    /// 2, 4 or 8; one upsample block per factor of two.
    pub upscale_factor: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            in_channels: 3,
            base_channels: 64,
            num_residual_blocks: 16,
            upscale_factor: 4,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8].contains(&self.upscale_factor) {
            return Err(Error::Config(format!(
                "upscale_factor must be 2, 4 or 8, got {}",
                self.upscale_factor
            )));
        }
        if self.num_residual_blocks == 0 || self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config(
                "generator needs at least one residual block and non-zero channels".into(),
            ));
        }
        Ok(())
    }

    pub fn upsample_blocks(&self) -> usize {
        self.upscale_factor.trailing_zeros() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub block_channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub pool_size: usize,
    pub hidden_units: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            in_channels: 3,
            block_channels: vec![64, 64, 128, 128, 256, 256, 512, 512],
            strides: vec![1, 2, 1, 2, 1, 2, 1, 2],
            pool_size: 6,
            hidden_units: 1024,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_channels.len() != 8 || self.strides.len() != 8 {
            return Err(Error::Config(format!(
                "discriminator needs 8 block channels and 8 strides, got {} and {}",
                self.block_channels.len(),
                self.strides.len()
            )));
        }
        if self.pool_size == 0 || self.hidden_units == 0 || self.in_channels == 0 {
            return Err(Error::Config("pool_size, hidden_units and in_channels must be positive".into()));
        }
        if self.block_channels.contains(&0) || self.strides.iter().any(|&s| !(1..=2).contains(&s)) {
            return Err(Error::Config("block channels must be positive and strides 1 or 2".into()));
        }
        Ok(())
    }
}

/// Frozen conv + ReLU6 feature network; `tap` is the number of blocks kept
/// (0 is the identity extractor).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractorConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub tap: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            in_channels: 3,
            channels: vec![16, 16, 32, 32],
            strides: vec![1, 2, 1, 2],
            tap: 4,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != self.strides.len() || self.tap > self.channels.len() {
            return Err(Error::Config(format!(
                "extractor has {} channel entries, {} strides and tap {}",
                self.channels.len(),
                self.strides.len(),
                self.tap
            )));
        }
        if self.in_channels == 0 || self.channels.contains(&0) || self.strides.contains(&0) {
            return Err(Error::Config("extractor channels and strides must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelConfig {
    Generator(GeneratorConfig, ConvStyle),
    Discriminator(DiscriminatorConfig, ConvStyle),
    Extractor(ExtractorConfig),
}

impl ModelConfig {
    pub fn topology(&self) -> Topology {
        match self {
            ModelConfig::Generator(..) => Topology::Generator,
            ModelConfig::Discriminator(..) => Topology::Discriminator,
            ModelConfig::Extractor(_) => Topology::Extractor,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            ModelConfig::Generator(c, _) => c.in_channels,
            ModelConfig::Discriminator(c, _) => c.in_channels,
            ModelConfig::Extractor(c) => c.in_channels,
        }
    }

    pub fn style(&self) -> ConvStyle {
        match self {
            ModelConfig::Generator(_, s) | ModelConfig::Discriminator(_, s) => *s,
            ModelConfig::Extractor(_) => ConvStyle::Standard,
        }
    }

    /// Same config with the convolution style replaced (extractors are unchanged).
    pub fn with_style(&self, style: ConvStyle) -> ModelConfig {
        match self {
            ModelConfig::Generator(c, _) => ModelConfig::Generator(c.clone(), style),
            ModelConfig::Discriminator(c, _) => ModelConfig::Discriminator(c.clone(), style),
            ModelConfig::Extractor(c) => ModelConfig::Extractor(c.clone()),
        }
    }

    pub fn build(&self, seed: u64) -> Result<ModelGraph> {
        let mut model = match self {
            ModelConfig::Generator(c, s) => generator_graph(c, *s)?,
            ModelConfig::Discriminator(c, s) => discriminator_graph(c, *s)?,
            ModelConfig::Extractor(c) => extractor_graph(c)?,
        };
        model.init_weights(seed);
        Ok(model)
    }

    /// Integer encoding stored as the `meta.config` record:
    /// `[topology, style, in_channels, ...]`.
    pub(crate) fn to_record(&self) -> NamedTensor {
        let style = |s: &ConvStyle| match s {
            ConvStyle::Separable => 0,
            ConvStyle::Standard => 1,
        };
        let mut v: Vec<usize> = match self {
            ModelConfig::Generator(c, s) => vec![
                0,
                style(s),
                c.in_channels,
                c.base_channels,
                c.num_residual_blocks,
                c.upscale_factor,
            ],
            ModelConfig::Discriminator(c, s) => {
                let mut v = vec![1, style(s), c.in_channels, c.pool_size, c.hidden_units, c.block_channels.len()];
                v.extend(&c.block_channels);
                v.extend(&c.strides);
                v
            }
            ModelConfig::Extractor(c) => {
                let mut v = vec![2, 1, c.in_channels, c.tap, c.channels.len()];
                v.extend(&c.channels);
                v.extend(&c.strides);
                v
            }
        };
        let data: Vec<f32> = v.drain(..).map(|x| x as f32).collect();
        NamedTensor::new(CONFIG_RECORD.to_string(), vec![data.len()], data)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let rec = ckpt
            .get(CONFIG_RECORD)
            .ok_or_else(|| Error::Format(format!("no `{CONFIG_RECORD}` record")))?;
        let bad = || Error::Format(format!("malformed `{CONFIG_RECORD}` record"));
        let v: Vec<usize> = rec
            .data
            .iter()
            .map(|&x| {
                if x >= 0.0 && x.fract() == 0.0 {
                    Ok(x as usize)
                } else {
                    Err(bad())
                }
            })
            .collect::<Result<_>>()?;
        let at = |i: usize| v.get(i).copied().ok_or_else(bad);
        let style = match at(1)? {
            0 => ConvStyle::Separable,
            1 => ConvStyle::Standard,
            _ => return Err(bad()),
        };
        let list = |start: usize, len: usize| -> Result<Vec<usize>> {
            v.get(start..start + len).map(<[usize]>::to_vec).ok_or_else(bad)
        };
        let cfg = match at(0)? {
            0 => ModelConfig::Generator(
                GeneratorConfig {
                    in_channels: at(2)?,
                    base_channels: at(3)?,
                    num_residual_blocks: at(4)?,
                    upscale_factor: at(5)?,
                },
                style,
            ),
            1 => {
                let n = at(5)?;
                ModelConfig::Discriminator(
                    DiscriminatorConfig {
                        in_channels: at(2)?,
                        pool_size: at(3)?,
                        hidden_units: at(4)?,
                        block_channels: list(6, n)?,
                        strides: list(6 + n, n)?,
                    },
                    style,
                )
            }
            2 => {
                let n = at(4)?;
                ModelConfig::Extractor(ExtractorConfig {
                    in_channels: at(2)?,
                    tap: at(3)?,
                    channels: list(5, n)?,
                    strides: list(5 + n, n)?,
                })
            }
            _ => return Err(bad()),
        };
        match &cfg {
            ModelConfig::Generator(c, _) => c.validate()?,
            ModelConfig::Discriminator(c, _) => c.validate()?,
            ModelConfig::Extractor(c) => c.validate()?,
        }
        Ok(cfg)
    }
}

fn feature_conv(name: String, style: ConvStyle, k: usize, c_in: usize, c_out: usize, stride: usize) -> Layer {
    let padding = k / 2;
    match style {
        ConvStyle::Separable => Layer::DsConv {
            name,
            depthwise: ConvParams::zeros(c_in, 1, k, stride, padding, true),
            pointwise: ConvParams::zeros(c_out, c_in, 1, 1, 0, true),
        },
        ConvStyle::Standard => Layer::Conv {
            name,
            conv: ConvParams::zeros(c_out, c_in, k, stride, padding, true),
        },
    }
}

fn bn(name: String, c: usize) -> Layer {
    Layer::BatchNorm {
        name,
        bn: BatchNormState::new(c),
    }
}

fn prelu(name: String, c: usize) -> Layer {
    Layer::PRelu {
        name,
        slope: vec![PRELU_INIT; c],
    }
}

fn generator_graph(cfg: &GeneratorConfig, style: ConvStyle) -> Result<ModelGraph> {
    cfg.validate()?;
    let c = cfg.base_channels;
    let mut layers = vec![
        feature_conv("head.conv".into(), style, 9, cfg.in_channels, c, 1),
        prelu("head.act".into(), c),
    ];

    let mut trunk = Vec::with_capacity(cfg.num_residual_blocks + 2);
    for i in 0..cfg.num_residual_blocks {
        let p = format!("trunk.res.{i}");
        trunk.push(Layer::Residual {
            name: p.clone(),
            body: vec![
                feature_conv(format!("{p}.conv1"), style, 3, c, c, 1),
                bn(format!("{p}.bn1"), c),
                prelu(format!("{p}.act"), c),
                feature_conv(format!("{p}.conv2"), style, 3, c, c, 1),
                bn(format!("{p}.bn2"), c),
            ],
        });
    }
    trunk.push(feature_conv("trunk.conv".into(), style, 3, c, c, 1));
    trunk.push(bn("trunk.bn".into(), c));
    layers.push(Layer::Residual {
        name: "trunk".into(),
        body: trunk,
    });

    for j in 0..cfg.upsample_blocks() {
        layers.push(feature_conv(format!("up.{j}.conv"), style, 3, c, c * 4, 1));
        layers.push(Layer::PixelShuffle(2));
        layers.push(prelu(format!("up.{j}.act"), c));
    }
    layers.push(feature_conv("tail.conv".into(), style, 9, c, cfg.in_channels, 1));
    Ok(ModelGraph::from_parts(
        ModelConfig::Generator(cfg.clone(), style),
        layers,
    ))
}

fn discriminator_graph(cfg: &DiscriminatorConfig, style: ConvStyle) -> Result<ModelGraph> {
    cfg.validate()?;
    let mut layers = Vec::new();
    let mut c_in = cfg.in_channels;
    for (i, (&c_out, &stride)) in cfg.block_channels.iter().zip(&cfg.strides).enumerate() {
        layers.push(feature_conv(format!("blocks.{i}.conv"), style, 3, c_in, c_out, stride));
        if i > 0 {
            layers.push(bn(format!("blocks.{i}.bn"), c_out));
        }
        layers.push(Layer::LeakyRelu(LEAKY_SLOPE));
        c_in = c_out;
    }
    let pooled = c_in * cfg.pool_size * cfg.pool_size;
    layers.extend([
        Layer::AdaptiveAvgPool(cfg.pool_size, cfg.pool_size),
        Layer::Flatten,
        Layer::Linear {
            name: "head.fc1".into(),
            linear: LinearParams::zeros(pooled, cfg.hidden_units, true),
        },
        Layer::LeakyRelu(LEAKY_SLOPE),
        Layer::Linear {
            name: "head.fc2".into(),
            linear: LinearParams::zeros(cfg.hidden_units, 1, true),
        },
        Layer::Sigmoid,
    ]);
    Ok(ModelGraph::from_parts(
        ModelConfig::Discriminator(cfg.clone(), style),
        layers,
    ))
}

fn extractor_graph(cfg: &ExtractorConfig) -> Result<ModelGraph> {
    cfg.validate()?;
    let mut layers = Vec::new();
    let mut c_in = cfg.in_channels;
    for (i, (&c_out, &stride)) in cfg.channels.iter().zip(&cfg.strides).take(cfg.tap).enumerate() {
        layers.push(feature_conv(format!("features.{i}.conv"), ConvStyle::Standard, 3, c_in, c_out, stride));
        layers.push(Layer::Relu6);
        c_in = c_out;
    }
    Ok(ModelGraph::from_parts(ModelConfig::Extractor(cfg.clone()), layers))
}

/// Depthwise-separable generator with Kaiming-initialized weights.
pub fn build_generator(cfg: &GeneratorConfig, seed: u64) -> Result<ModelGraph> {
    ModelConfig::Generator(cfg.clone(), ConvStyle::Separable).build(seed)
}

pub fn build_discriminator(cfg: &DiscriminatorConfig, seed: u64) -> Result<ModelGraph> {
    ModelConfig::Discriminator(cfg.clone(), ConvStyle::Separable).build(seed)
}

/// Generator topology with every separable convolution replaced by a
/// standard convolution of the same kernel, channels and stride.
pub fn build_standard_conv_twin(cfg: &GeneratorConfig, seed: u64) -> Result<ModelGraph> {
    ModelConfig::Generator(cfg.clone(), ConvStyle::Standard).build(seed)
}

pub fn build_extractor(cfg: &ExtractorConfig, seed: u64) -> Result<ModelGraph> {
    ModelConfig::Extractor(cfg.clone()).build(seed)
}
