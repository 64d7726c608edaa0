//! PSNR and SSIM.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{list_images, load_image};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean of squared differences over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same(b)?;
    if a.is_empty() {
        return Err(Error::InvalidArgument("mse of empty tensors".into()));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(sum / a.len() as f64)
}

/// `20·log10(max) − 10·log10(mse)` in dB; identical inputs give `+inf`.
pub fn psnr(a: &Tensor, b: &Tensor, max_value: f64) -> Result<f64> {
    if !(max_value > 0.0) {
        return Err(Error::InvalidArgument(format!("psnr peak value must be positive, got {max_value}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * max_value.log10() - 10.0 * m.log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Gaussian,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub window: Window,
    /// Odd side length of the sliding window.
    pub window_size: usize,
    pub gaussian_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
    /// Exponents on the luminance, contrast and structure terms.
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: Window::Gaussian,
            window_size: 11,
            gaussian_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 255.0,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl SsimConfig {
    /// Defaults for tensors normalized to `[0, 1]`.
    pub fn unit_range() -> Self {
        SsimConfig {
            dynamic_range: 1.0,
            ..Self::default()
        }
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    pub fn c3(&self) -> f64 {
        self.c2() / 2.0
    }

    fn validate(&self) -> Result<()> {
        if self.window_size.is_multiple_of(2) || self.window_size == 0 {
            return Err(Error::InvalidArgument(format!("ssim window size {} must be odd", self.window_size)));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0 && self.dynamic_range > 0.0) {
            return Err(Error::InvalidArgument("ssim k1, k2 and dynamic range must be positive".into()));
        }
        if self.window == Window::Gaussian && !(self.gaussian_sigma > 0.0) {
            return Err(Error::InvalidArgument("gaussian sigma must be positive".into()));
        }
        Ok(())
    }

    /// Normalized `window_size²` weights, row-major.
    pub fn weights(&self) -> Vec<f64> {
        let n = self.window_size;
        match self.window {
            Window::Uniform => vec![1.0 / (n * n) as f64; n * n],
            Window::Gaussian => {
                let r = (n / 2) as f64;
                let g: Vec<f64> = (0..n)
                    .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * self.gaussian_sigma.powi(2))).exp())
                    .collect();
                let total: f64 = g.iter().sum();
                let g: Vec<f64> = g.iter().map(|v| v / total).collect();
                (0..n * n).map(|i| g[i / n] * g[i % n]).collect()
            }
        }
    }
}

/// Luminance, contrast and structure comparisons for one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimTerms {
    pub luminance: f64,
    pub contrast: f64,
    pub structure: f64,
}

impl SsimTerms {
    pub fn combine(&self, cfg: &SsimConfig) -> f64 {
        self.luminance.powf(cfg.alpha) * self.contrast.powf(cfg.beta) * self.structure.powf(cfg.gamma)
    }
}

/// Per-window terms for two single-channel planes of size `h × w`, over
/// every fully contained window position in row-major order.
pub fn ssim_terms(a: &[f32], b: &[f32], h: usize, w: usize, cfg: &SsimConfig) -> Result<Vec<SsimTerms>> {
    cfg.validate()?;
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::InvalidArgument("ssim planes do not match the stated size".into()));
    }
    let n = cfg.window_size;
    if h < n || w < n {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} is smaller than the {n}x{n} ssim window"
        )));
    }
    let weights = cfg.weights();
    let (c1, c2, c3) = (cfg.c1(), cfg.c2(), cfg.c3());
    let (oh, ow) = (h - n + 1, w - n + 1);
    let terms = (0..oh)
        .into_par_iter()
        .flat_map_iter(|y| {
            let weights = &weights;
            (0..ow).map(move |x| {
                let (mut mx, mut my) = (0.0f64, 0.0f64);
                for i in 0..n {
                    for j in 0..n {
                        let wt = weights[i * n + j];
                        let idx = (y + i) * w + x + j;
                        mx += wt * a[idx] as f64;
                        my += wt * b[idx] as f64;
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0f64, 0.0f64, 0.0f64);
                for i in 0..n {
                    for j in 0..n {
                        let wt = weights[i * n + j];
                        let idx = (y + i) * w + x + j;
                        let dx = a[idx] as f64 - mx;
                        let dy = b[idx] as f64 - my;
                        vx += wt * dx * dx;
                        vy += wt * dy * dy;
                        cxy += wt * dx * dy;
                    }
                }
                let sxsy = (vx * vy).sqrt();
                SsimTerms {
                    luminance: (2.0 * mx * my + c1) / (mx * mx + my * my + c1),
                    contrast: (2.0 * sxsy + c2) / (vx + vy + c2),
                    structure: (cxy + c3) / (sxsy + c3),
                }
            })
        })
        .collect();
    Ok(terms)
}

/// Mean SSIM of two single-channel planes.
pub fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize, cfg: &SsimConfig) -> Result<f64> {
    let terms = ssim_terms(a, b, h, w, cfg)?;
    Ok(terms.iter().map(|t| t.combine(cfg)).sum::<f64>() / terms.len() as f64)
}

/// SSIM averaged over every `(n, c)` plane.
pub fn ssim(a: &Tensor, b: &Tensor, cfg: &SsimConfig) -> Result<f64> {
    a.check_same(b)?;
    let s = a.shape();
    if s.n * s.c == 0 {
        return Err(Error::InvalidArgument("ssim of empty tensors".into()));
    }
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            total += ssim_plane(a.plane(n, c), b.plane(n, c), s.h, s.w, cfg)?;
        }
    }
    Ok(total / (s.n * s.c) as f64)
}

/// ITU-R BT.601 luma `0.299 R + 0.587 G + 0.114 B` of an RGB tensor.
pub fn to_luma(rgb: &Tensor) -> Result<Tensor> {
    let s = rgb.shape();
    if s.c != 3 {
        return Err(Error::InvalidArgument(format!("luma needs 3 channels, got {s}")));
    }
    let mut out = Vec::with_capacity(s.n * s.plane());
    for n in 0..s.n {
        let (r, g, b) = (rgb.plane(n, 0), rgb.plane(n, 1), rgb.plane(n, 2));
        out.extend((0..s.plane()).map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]));
    }
    Tensor::from_vec((s.n, 1, s.h, s.w), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalConfig {
    pub ssim: SsimConfig,
    /// Score the luma channel instead of averaging over RGB.
    pub luma: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<PairScore>,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

impl EvalReport {
    pub fn from_rows(rows: Vec<PairScore>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("no image pairs to evaluate".into()));
        }
        let n = rows.len() as f64;
        let psnr_mean = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
        let ssim_mean = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        Ok(EvalReport {
            rows,
            psnr_mean,
            ssim_mean,
        })
    }

    /// `name,psnr_db,ssim` rows; infinite PSNR is written as `inf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,psnr_db,ssim\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.6}\n", r.name, fmt_db(r.psnr), r.ssim));
        }
        out
    }

    /// `{count, psnr_mean, ssim_mean}`; an infinite mean PSNR is the string `"inf"`.
    pub fn summary_json(&self) -> serde_json::Value {
        let psnr = if self.psnr_mean.is_finite() {
            serde_json::json!(self.psnr_mean)
        } else {
            serde_json::json!("inf")
        };
        serde_json::json!({
            "count": self.rows.len(),
            "psnr_mean": psnr,
            "ssim_mean": self.ssim_mean,
        })
    }
}

/// PSNR (peak 255) and SSIM for one pair of 8-bit-range images.
pub fn score_pair(sr: &Tensor, hr: &Tensor, cfg: &EvalConfig) -> Result<(f64, f64)> {
    let (a, b) = if cfg.luma {
        (to_luma(sr)?, to_luma(hr)?)
    } else {
        (sr.clone(), hr.clone())
    };
    Ok((psnr(&a, &b, 255.0)?, ssim(&a, &b, &cfg.ssim)?))
}

/// Score same-named images in two directories, ordered by filename.
pub fn evaluate_pair_directory(dir_sr: &Path, dir_hr: &Path, cfg: &EvalConfig) -> Result<EvalReport> {
    let index = |dir: &Path| -> Result<BTreeMap<String, std::path::PathBuf>> {
        Ok(list_images(dir)?
            .into_iter()
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), p))
            .collect())
    };
    let sr = index(dir_sr)?;
    let hr = index(dir_hr)?;
    let unmatched: Vec<&str> = sr
        .keys()
        .filter(|k| !hr.contains_key(*k))
        .chain(hr.keys().filter(|k| !sr.contains_key(*k)))
        .map(String::as_str)
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "unmatched filenames: {}",
            unmatched.join(", ")
        )));
    }
    let rows = sr
        .par_iter()
        .map(|(name, sr_path)| {
            let a = load_image(sr_path)?;
            let b = load_image(&hr[name])?;
            if a.tensor.shape() != b.tensor.shape() {
                return Err(Error::InvalidArgument(format!(
                    "{name}: size {}x{} vs {}x{}",
                    a.width(),
                    a.height(),
                    b.width(),
                    b.height()
                )));
            }
            let (p, s) = score_pair(&a.tensor, &b.tensor, cfg)?;
            Ok(PairScore {
                name: name.clone(),
                psnr: p,
                ssim: s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_rows(rows)
}
