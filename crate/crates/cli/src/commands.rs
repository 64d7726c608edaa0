use std::fmt::Display;
use std::path::{Path, PathBuf};

use log::info;
use serde_json::json;
use swiftsr::bench::{parse_resolution, run_latency_bench, BenchConfig};
use swiftsr::data::{list_images, load_image, save_image, Image};
use swiftsr::metrics::{evaluate_pair_directory, score_pair, EvalConfig, EvalReport};
use swiftsr::model::{load_checkpoint, save_checkpoint, ConvStyle, GeneratorConfig, ModelConfig, ModelGraph, Topology};
use swiftsr::train::{fit, TrainConfig};

use crate::{Kind, Variant};

pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl From<swiftsr::Error> for CliError {
    fn from(e: swiftsr::Error) -> Self {
        CliError {
            code: if e.is_user_error() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

fn user(message: impl Display) -> CliError {
    CliError {
        code: 2,
        message: message.to_string(),
    }
}

fn internal(message: impl Display) -> CliError {
    CliError {
        code: 1,
        message: message.to_string(),
    }
}

type CliResult = Result<(), CliError>;

fn style(v: Variant) -> ConvStyle {
    match v {
        Variant::Dsconv => ConvStyle::Separable,
        Variant::Standard => ConvStyle::Standard,
    }
}

fn fmt_db(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "inf".into()
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    std::fs::write(path, contents).map_err(|e| user(format!("cannot write {}: {e}", path.display())))
}

fn load_generator(path: &Path) -> Result<ModelGraph, CliError> {
    let (model, _) = load_checkpoint(path)?;
    if model.topology() != Topology::Generator {
        return Err(user(format!("{} holds a {:?} checkpoint, expected a generator", path.display(), model.topology())));
    }
    Ok(model)
}

fn file_name(path: &Path) -> Result<String, CliError> {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| user(format!("{} has no file name", path.display())))
}

pub fn upscale(model: &Path, input: &Path, output: &Path, scale: usize, reference: Option<&Path>) -> CliResult {
    let g = load_generator(model)?;
    if let ModelConfig::Generator(cfg, _) = g.config() {
        if cfg.upscale_factor != scale {
            return Err(user(format!(
                "checkpoint upscales by {}, --scale is {scale}",
                cfg.upscale_factor
            )));
        }
    }
    let inputs: Vec<PathBuf> = if input.is_dir() {
        let files = list_images(input)?;
        if files.is_empty() {
            return Err(user(format!("no .png or .ppm images in {}", input.display())));
        }
        files
    } else if input.is_file() {
        vec![input.to_path_buf()]
    } else {
        return Err(user(format!("input {} does not exist", input.display())));
    };
    std::fs::create_dir_all(output).map_err(|e| user(format!("cannot create {}: {e}", output.display())))?;
    let eval_cfg = EvalConfig::default();
    for path in &inputs {
        let img = load_image(path)?;
        let sr = g.forward(&img.to_unit())?;
        let full = Image::from_unit(&sr)?;
        let out_img = Image::from_rgb8(full.width(), full.height(), &full.to_rgb8())?;
        let name = file_name(path)?;
        let dest = output.join(&name);
        save_image(&out_img, &dest)?;
        println!(
            "{name}: {}x{} -> {}x{} written to {}",
            img.width(),
            img.height(),
            out_img.width(),
            out_img.height(),
            dest.display()
        );
        if let Some(r) = reference {
            let ref_path = if r.is_dir() { r.join(&name) } else { r.to_path_buf() };
            let hr = load_image(&ref_path)?;
            let (p, s) = score_pair(&out_img.tensor, &hr.tensor, &eval_cfg)?;
            println!("{name}: psnr {} dB, ssim {s:.4}", fmt_db(p));
        }
    }
    Ok(())
}

pub fn bench(
    model: Option<&Path>,
    in_res: &str,
    iters: usize,
    warmup: usize,
    variant: Option<Variant>,
    seed: u64,
    json_path: Option<&Path>,
) -> CliResult {
    let (width, height) = parse_resolution(in_res)?;
    if iters == 0 {
        return Err(user("--iters must be at least 1"));
    }
    let base = match model {
        Some(p) => load_generator(p)?,
        None => ModelConfig::Generator(GeneratorConfig::default(), ConvStyle::Separable).build(seed)?,
    };
    let g = match variant.map(style) {
        Some(s) if s != base.config().style() => base.config().with_style(s).build(seed)?,
        _ => base,
    };
    let cfg = BenchConfig {
        width,
        height,
        warmup,
        iterations: iters,
        seed,
    };
    let r = run_latency_bench(&g, &cfg)?;
    println!("variant      {}", r.variant);
    println!("resolution   {} -> {}", r.input_resolution, r.output_resolution);
    println!("iterations   {} timed after {} warmup", r.timed_iterations, r.warmup_iterations);
    println!(
        "per frame    min {:.3} ms, median {:.3} ms, p95 {:.3} ms, mean {:.3} ms",
        r.min_ms, r.median_ms, r.p95_ms, r.mean_ms
    );
    println!("throughput   {:.2} fps on {} threads", r.fps, r.threads);
    if let Some(p) = json_path {
        let text = serde_json::to_string_pretty(&r).map_err(internal)?;
        write_file(p, &text)?;
    }
    Ok(())
}

fn build_config(config: Option<&Path>, overrides: &[String]) -> Result<TrainConfig, CliError> {
    let mut cfg = match config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| user(format!("override `{kv}` is not of the form key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    data: &Path,
    val: &Path,
    out: &Path,
    epochs: Option<u64>,
    seed: Option<u64>,
    config: Option<&Path>,
    overrides: &[String],
    resume: bool,
) -> CliResult {
    let mut cfg = build_config(config, overrides)?;
    if let Some(e) = epochs {
        cfg.set("epochs", &e.to_string())?;
    }
    if let Some(s) = seed {
        cfg.set("seed", &s.to_string())?;
    }
    cfg.validate()?;
    let report = fit(data, val, cfg, out, resume)?;
    if let Some(e) = report.resumed_from_epoch {
        info!("resumed from epoch {e}");
    }
    let state = &report.trainer.state;
    println!("epochs completed  {}", state.epoch);
    println!("steps             {}", state.step);
    if let Some(last) = report.logs.last() {
        println!(
            "last epoch        content {:.6}, adversarial {:.6}, val psnr {} dB, val ssim {:.4}",
            last.losses.content,
            last.losses.adversarial,
            fmt_db(last.val.psnr),
            last.val.ssim
        );
    }
    println!("output            {}", report.out_dir.display());
    Ok(())
}

fn eval_json(report: &EvalReport) -> serde_json::Value {
    let rows: Vec<_> = report
        .rows
        .iter()
        .map(|r| {
            let psnr = if r.psnr.is_finite() { json!(r.psnr) } else { json!("inf") };
            json!({ "name": r.name, "psnr": psnr, "ssim": r.ssim })
        })
        .collect();
    let mut v = report.summary_json();
    v["rows"] = json!(rows);
    v
}

pub fn eval(sr: &Path, hr: &Path, luma: bool, json_path: Option<&Path>, csv_path: Option<&Path>) -> CliResult {
    let cfg = EvalConfig {
        luma,
        ..EvalConfig::default()
    };
    let report = evaluate_pair_directory(sr, hr, &cfg)?;
    for r in &report.rows {
        println!("{:<32} psnr {:>9} dB  ssim {:.4}", r.name, fmt_db(r.psnr), r.ssim);
    }
    println!(
        "mean over {} pairs: psnr {} dB, ssim {:.4}",
        report.rows.len(),
        fmt_db(report.psnr_mean),
        report.ssim_mean
    );
    if let Some(p) = json_path {
        let text = serde_json::to_string_pretty(&eval_json(&report)).map_err(internal)?;
        write_file(p, &text)?;
    }
    if let Some(p) = csv_path {
        write_file(p, &report.to_csv())?;
    }
    Ok(())
}

pub fn inspect(model: &Path, as_json: bool) -> CliResult {
    let (m, _) = load_checkpoint(model)?;
    let layers = m.layer_summaries();
    let with_bias = m.count_parameters(true, true);
    let conv_only = m.count_parameters(false, true);
    let all = m.count_parameters(true, false);
    let twin = match m.topology() {
        Topology::Extractor => None,
        _ => {
            let other = match m.config().style() {
                ConvStyle::Separable => ConvStyle::Standard,
                ConvStyle::Standard => ConvStyle::Separable,
            };
            Some(m.config().with_style(other).build(0)?.count_parameters(false, true))
        }
    };
    let (ds, st) = match (m.config().style(), twin) {
        (ConvStyle::Separable, Some(t)) => (Some(conv_only), Some(t)),
        (ConvStyle::Standard, Some(t)) => (Some(t), Some(conv_only)),
        _ => (None, None),
    };
    let ratio = ds.zip(st).map(|(d, s)| s as f64 / d as f64);
    let first_block_bn = (m.topology() == Topology::Discriminator)
        .then(|| m.parameter_names().iter().any(|n| n.starts_with("blocks.0.bn")));

    if as_json {
        let rows: Vec<_> = layers
            .iter()
            .map(|l| {
                json!({
                    "name": l.name,
                    "kind": l.kind,
                    "conv_weights": l.conv_weights,
                    "biases": l.biases,
                    "other": l.other,
                })
            })
            .collect();
        let v = json!({
            "topology": format!("{:?}", m.topology()).to_lowercase(),
            "variant": match m.config().style() { ConvStyle::Separable => "dsconv", ConvStyle::Standard => "standard" },
            "layers": rows,
            "conv_params": conv_only,
            "conv_params_with_biases": with_bias,
            "all_params": all,
            "dsconv_conv_params": ds,
            "standard_twin_conv_params": st,
            "ratio": ratio,
            "first_block_has_batch_norm": first_block_bn,
        });
        println!("{}", serde_json::to_string_pretty(&v).map_err(internal)?);
        return Ok(());
    }

    println!("{:<28} {:<18} {:>12} {:>8} {:>8}", "layer", "kind", "conv weights", "biases", "other");
    for l in &layers {
        println!(
            "{:<28} {:<18} {:>12} {:>8} {:>8}",
            l.name, l.kind, l.conv_weights, l.biases, l.other
        );
    }
    println!();
    println!("conv weights                {conv_only}");
    println!("conv weights and biases     {with_bias}");
    println!("all parameters              {all}");
    if let (Some(d), Some(s), Some(r)) = (ds, st, ratio) {
        println!("dsconv conv weights         {d}");
        println!("standard twin conv weights  {s}");
        println!("twin / dsconv ratio         {r:.2}");
    }
    if let Some(bn) = first_block_bn {
        println!("first block batch norm      {}", if bn { "present" } else { "none" });
    }
    Ok(())
}

pub fn init(
    out: &Path,
    kind: Kind,
    variant: Variant,
    seed: u64,
    config: Option<&Path>,
    overrides: &[String],
) -> CliResult {
    let cfg = build_config(config, overrides)?;
    let mc = match kind {
        Kind::Generator => ModelConfig::Generator(cfg.generator, style(variant)),
        Kind::Discriminator => ModelConfig::Discriminator(cfg.discriminator, style(variant)),
    };
    let model = mc.build(seed)?;
    save_checkpoint(&model, &[], out)?;
    println!(
        "wrote {} ({} parameters) to {}",
        format!("{:?}", model.topology()).to_lowercase(),
        model.count_parameters(true, false),
        out.display()
    );
    Ok(())
}
