//! Per-frame latency measurement of generator forward passes.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ConvStyle, ModelGraph, Topology};
use crate::tensor::Tensor;

/// Named input presets: 270p and 540p frames.
pub const PRESETS: [(&str, (usize, usize)); 2] = [("270p", (480, 270)), ("540p", (960, 540))];

/// Parse `WxH` or a preset name into `(width, height)`.
pub fn parse_resolution(s: &str) -> Result<(usize, usize)> {
    if let Some((_, wh)) = PRESETS.iter().find(|(name, _)| name.eq_ignore_ascii_case(s)) {
        return Ok(*wh);
    }
    let bad = || Error::InvalidArgument(format!("invalid resolution `{s}`, expected WxH, 270p or 540p"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub width: usize,
    pub height: usize,
    pub warmup: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            width: 64,
            height: 64,
            warmup: 10,
            iterations: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub input_resolution: String,
    pub output_resolution: String,
    pub warmup_iterations: usize,
    pub timed_iterations: usize,
    pub min_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
    pub fps: f64,
    pub threads: usize,
    pub variant: String,
    pub samples_ms: Vec<f64>,
}

/// Order statistics of per-frame samples: `(min, median, p95, mean)`.
/// The 95th percentile uses the nearest-rank rule.
pub fn order_stats(samples: &[f64]) -> Result<(f64, f64, f64, f64)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("at least one timed iteration is required".into()));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 };
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    let mean = s.iter().sum::<f64>() / n as f64;
    Ok((s[0], median, s[rank - 1], mean))
}

pub fn variant_name(model: &ModelGraph) -> &'static str {
    match model.config().style() {
        ConvStyle::Separable => "dsconv",
        ConvStyle::Standard => "standard-twin",
    }
}

/// Time `cfg.iterations` eval forwards of `model` on one fixed random frame
/// after `cfg.warmup` untimed ones. Only the forward call is timed.
pub fn run_latency_bench(model: &ModelGraph, cfg: &BenchConfig) -> Result<BenchReport> {
    if model.topology() != Topology::Generator {
        return Err(Error::InvalidArgument("latency benchmark needs a generator checkpoint".into()));
    }
    if cfg.iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let input = Tensor::from_fn((1, model.in_channels(), cfg.height, cfg.width), |_| rng.gen());
    let out_shape = model.output_shape(input.shape())?;
    for _ in 0..cfg.warmup {
        std::hint::black_box(model.forward(&input)?);
    }
    let mut samples = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let t0 = Instant::now();
        let y = model.forward(&input)?;
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(y);
    }
    let (min, median, p95, mean) = order_stats(&samples)?;
    Ok(BenchReport {
        input_resolution: format!("{}x{}", cfg.width, cfg.height),
        output_resolution: format!("{}x{}", out_shape.w, out_shape.h),
        warmup_iterations: cfg.warmup,
        timed_iterations: cfg.iterations,
        min_ms: min,
        median_ms: median,
        p95_ms: p95,
        mean_ms: mean,
        fps: 1000.0 / median,
        threads: rayon::current_num_threads(),
        variant: variant_name(model).to_string(),
        samples_ms: samples,
    })
}
