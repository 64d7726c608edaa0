//! Small synthetic images and reduced model configs for training tests.

use swiftsr::data::{Image, PipelineConfig};
use swiftsr::model::{DiscriminatorConfig, ExtractorConfig, GeneratorConfig};
use swiftsr::train::TrainConfig;

/// Smooth colour waves with a little seeded texture, `w`×`h`.
pub fn wave_image(w: usize, h: usize, seed: u64) -> Image {
    let mut r = super::rng(seed);
    let (fx, fy) = (0.05 + (seed % 5) as f64 * 0.03, 0.07 + (seed % 3) as f64 * 0.04);
    let mut px = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let phase = c as f64 * 2.1 + seed as f64;
                let v = 128.0 + 90.0 * (fx * x as f64 + fy * y as f64 + phase).sin() + rand::Rng::gen_range(&mut r, -8.0..8.0);
                px.push(v.clamp(0.0, 255.0) as u8);
            }
        }
    }
    Image::from_rgb8(w, h, &px).unwrap()
}

pub fn wave_images(n: usize, w: usize, h: usize, seed: u64) -> Vec<Image> {
    (0..n as u64).map(|i| wave_image(w, h, seed * 1000 + i)).collect()
}

/// A few-thousand-parameter setup that trains in milliseconds per step.
pub fn tiny_config(crop: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        generator: GeneratorConfig {
            base_channels: 8,
            num_residual_blocks: 2,
            ..GeneratorConfig::default()
        },
        discriminator: DiscriminatorConfig {
            block_channels: vec![4, 4, 8, 8, 8, 8, 16, 16],
            pool_size: 2,
            hidden_units: 16,
            ..DiscriminatorConfig::default()
        },
        extractor: ExtractorConfig {
            channels: vec![8, 8, 16],
            strides: vec![1, 2, 1],
            tap: 3,
            ..ExtractorConfig::default()
        },
        pipeline: PipelineConfig {
            crop_size: crop,
            seed,
            ..PipelineConfig::default()
        },
        batch_size: 2,
        epochs: 2,
        seed,
        ..TrainConfig::default()
    }
}
