//! Image I/O, augmentation, bicubic resampling and LR/HR batching.

use std::io::{BufWriter, Cursor};
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An RGB image stored as a `(1, 3, h, w)` tensor with values in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub tensor: Tensor,
    pub path: Option<PathBuf>,
}

impl Image {
    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        let s = tensor.shape();
        if s.n != 1 || s.c != 3 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "an image is a (1, 3, h, w) tensor".into(),
            });
        }
        Ok(Image { tensor, path: None })
    }

    pub fn from_rgb8(width: usize, height: usize, pixels: &[u8]) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "{} bytes do not form a {width}x{height} RGB image",
                pixels.len()
            )));
        }
        let plane = width * height;
        let t = Tensor::from_fn((1, 3, height, width), |i| pixels[(i % plane) * 3 + i / plane] as f32);
        Image::from_tensor(t)
    }

    /// Network output in `[0, 1]` back to the 8-bit range, clamped.
    pub fn from_unit(t: &Tensor) -> Result<Self> {
        Image::from_tensor(t.map(|v| (v * 255.0).clamp(0.0, 255.0)))
    }

    /// Values divided by 255.
    pub fn to_unit(&self) -> Tensor {
        self.tensor.scale(1.0 / 255.0)
    }

    pub fn width(&self) -> usize {
        self.tensor.shape().w
    }

    pub fn height(&self) -> usize {
        self.tensor.shape().h
    }

    /// Interleaved RGB bytes, rounded and clamped.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.width() * self.height();
        let d = self.tensor.data();
        (0..plane * 3)
            .map(|i| d[(i % 3) * plane + i / 3].round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

const PNG_SIGNATURE: &[u8] = &[0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

fn decode_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parse a binary PPM (`P6`, maxval 255). Errors carry the byte offset.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err("missing P6 magic at byte 0".into());
    }
    let mut pos = 2;
    let field = |pos: &mut usize, name: &str| -> std::result::Result<usize, String> {
        let mut p = *pos;
        loop {
            match bytes.get(p) {
                Some(b'#') => {
                    while p < bytes.len() && bytes[p] != b'\n' {
                        p += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => p += 1,
                Some(_) => break,
                None => return Err(format!("truncated header: expected {name} at byte {p}")),
            }
        }
        let start = p;
        while p < bytes.len() && bytes[p].is_ascii_digit() {
            p += 1;
        }
        if start == p {
            return Err(format!("expected {name} at byte {start}"));
        }
        let v = std::str::from_utf8(&bytes[start..p])
            .unwrap()
            .parse()
            .map_err(|_| format!("{name} out of range at byte {start}"))?;
        *pos = p;
        Ok(v)
    };
    let width = field(&mut pos, "width")?;
    let height = field(&mut pos, "height")?;
    let maxval_at = pos;
    let maxval = field(&mut pos, "maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval} at byte {maxval_at}, only 255 is accepted"));
    }
    if width == 0 || height == 0 {
        return Err(format!("zero image dimension in header ending at byte {pos}"));
    }
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err(format!("truncated header: expected whitespace at byte {pos}")),
    }
    let need = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| "image dimensions overflow".to_string())?;
    let have = bytes.len() - pos;
    if have < need {
        return Err(format!(
            "truncated pixel data at byte {}: expected {need} bytes from byte {pos}",
            bytes.len()
        ));
    }
    Ok((width, height, bytes[pos..pos + need].to_vec()))
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.to_rgb8());
    out
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| decode_err(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| decode_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf.to_vec(),
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(decode_err(path, format!("unsupported png color type {other:?}"))),
    };
    Image::from_rgb8(w, h, &rgb)
}

/// Load an 8-bit PNG or binary PPM, detected by content.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut img = if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(&bytes, path)?
    } else if bytes.starts_with(b"P6") {
        let (w, h, px) = decode_ppm(&bytes).map_err(|r| decode_err(path, r))?;
        Image::from_rgb8(w, h, &px)?
    } else {
        return Err(decode_err(path, "unsupported format, expected PNG or binary PPM"));
    };
    img.path = Some(path.to_path_buf());
    Ok(img)
}

/// Save as PNG or PPM according to the file extension.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "ppm" => std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e)),
        "png" => {
            let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut enc = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
            let mut writer = enc.write_header().map_err(to_io)?;
            writer.write_image_data(&img.to_rgb8()).map_err(to_io)?;
            writer.finish().map_err(to_io)
        }
        _ => Err(Error::InvalidArgument(format!(
            "cannot save {}: use a .png or .ppm extension",
            path.display()
        ))),
    }
}

/// PNG and PPM files in `dir`, sorted by filename.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if p.is_file() && matches!(ext.as_deref(), Some("png" | "ppm")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Copy the `size × size` region at `(top, left)`.
pub fn crop(img: &Image, top: usize, left: usize, size: usize) -> Result<Image> {
    if top + size > img.height() || left + size > img.width() || size == 0 {
        return Err(Error::InvalidArgument(format!(
            "crop {size}x{size} at ({top}, {left}) exceeds {}x{} image",
            img.width(),
            img.height()
        )));
    }
    let t = Tensor::from_fn((1, 3, size, size), |i| {
        let (c, y, x) = (i / (size * size), i / size % size, i % size);
        img.tensor.at(0, c, top + y, left + x)
    });
    Image::from_tensor(t)
}

/// Uniformly placed square crop; returns the crop and its `(top, left)` offset.
pub fn random_crop(img: &Image, size: usize, rng: &mut impl Rng) -> Result<(Image, (usize, usize))> {
    if img.height() < size || img.width() < size {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} is smaller than crop size {size}",
            img.width(),
            img.height()
        )));
    }
    let top = rng.gen_range(0..=img.height() - size);
    let left = rng.gen_range(0..=img.width() - size);
    Ok((crop(img, top, left, size)?, (top, left)))
}

pub fn center_crop(img: &Image, size: usize) -> Result<Image> {
    if img.height() < size || img.width() < size {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} is smaller than crop size {size}",
            img.width(),
            img.height()
        )));
    }
    crop(img, (img.height() - size) / 2, (img.width() - size) / 2, size)
}

pub fn flip_horizontal(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let t = Tensor::from_fn((1, 3, h, w), |i| {
        let (c, y, x) = (i / (h * w), i / w % h, i % w);
        img.tensor.at(0, c, y, w - 1 - x)
    });
    Image { tensor: t, path: img.path.clone() }
}

/// Rotate 90° counter-clockwise.
pub fn rotate90(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let t = Tensor::from_fn((1, 3, w, h), |i| {
        let (c, y, x) = (i / (h * w), i / h % w, i % h);
        img.tensor.at(0, c, x, w - 1 - y)
    });
    Image { tensor: t, path: img.path.clone() }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub crop_size: usize,
    pub scale: usize,
    pub flip_prob: f64,
    pub rot90_prob: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            crop_size: 96,
            scale: 4,
            flip_prob: 0.5,
            rot90_prob: 0.5,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 || self.crop_size == 0 || !self.crop_size.is_multiple_of(self.scale) {
            return Err(Error::Config(format!(
                "crop size {} must be a positive multiple of scale {}",
                self.crop_size, self.scale
            )));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("rot90_prob", self.rot90_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// Horizontal flip, then 90° rotation, each with its configured probability.
pub fn augment(img: &Image, cfg: &PipelineConfig, rng: &mut impl Rng) -> Result<Image> {
    let flip = rng.gen::<f64>() < cfg.flip_prob;
    let rot = rng.gen::<f64>() < cfg.rot90_prob;
    if cfg.rot90_prob > 0.0 && img.height() != img.width() {
        return Err(Error::InvalidArgument(format!(
            "rotation needs a square image, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    let mut out = if flip { flip_horizontal(img) } else { img.clone() };
    if rot {
        out = rotate90(&out);
    }
    Ok(out)
}

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per output sample, the clamped source taps and normalized weights.
/// Downsampling widens the kernel by the scale factor.
pub fn resample_weights(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = in_len as f64 / out_len as f64;
    let stretch = scale.max(1.0);
    let support = 2.0 * stretch;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .filter_map(|j| {
                    let w = cubic_kernel((j as f64 + 0.5 - center) / stretch);
                    (w != 0.0).then(|| (j.clamp(0, in_len as isize - 1) as usize, w))
                })
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Separable bicubic resampling of every plane, unclamped.
pub fn resize_bicubic(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = t.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize target must be at least 1x1".into()));
    }
    let wx = resample_weights(s.w, out_w);
    let wy = resample_weights(s.h, out_h);
    let mut out = vec![0.0f32; s.n * s.c * out_h * out_w];
    out.par_chunks_mut(out_h * out_w).enumerate().for_each(|(p, dst)| {
        let src = t.plane(p / s.c, p % s.c);
        let mut rows = vec![0.0f64; s.h * out_w];
        for y in 0..s.h {
            let row = &src[y * s.w..(y + 1) * s.w];
            for (x, taps) in wx.iter().enumerate() {
                rows[y * out_w + x] = taps.iter().map(|&(j, w)| w * row[j] as f64).sum();
            }
        }
        for (y, taps) in wy.iter().enumerate() {
            for x in 0..out_w {
                dst[y * out_w + x] = taps.iter().map(|&(j, w)| w * rows[j * out_w + x]).sum::<f64>() as f32;
            }
        }
    });
    Tensor::from_vec((s.n, s.c, out_h, out_w), out)
}

/// Bicubic resize of an 8-bit image, clamped to `[0, 255]`.
pub fn bicubic_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    let t = resize_bicubic(&img.tensor, out_h, out_w)?.map(|v| v.clamp(0.0, 255.0));
    Ok(Image { tensor: t, path: img.path.clone() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub hr: Image,
    pub lr: Image,
}

fn downsample(hr: Image, scale: usize) -> Result<ImagePair> {
    let lr = bicubic_resize(&hr, hr.height() / scale, hr.width() / scale)?;
    Ok(ImagePair { hr, lr })
}

/// Crop, augment, then bicubic downsample by `cfg.scale`.
pub fn make_pair(hr: &Image, cfg: &PipelineConfig, rng: &mut impl Rng) -> Result<ImagePair> {
    cfg.validate()?;
    let (cropped, _) = random_crop(hr, cfg.crop_size, rng)?;
    downsample(augment(&cropped, cfg, rng)?, cfg.scale)
}

/// Center crop and downsample, no augmentation.
pub fn make_eval_pair(hr: &Image, cfg: &PipelineConfig) -> Result<ImagePair> {
    cfg.validate()?;
    downsample(center_crop(hr, cfg.crop_size)?, cfg.scale)
}

/// LR and HR batches normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub lr: Tensor,
    pub hr: Tensor,
}

impl Batch {
    pub fn from_pairs(pairs: &[ImagePair]) -> Result<Self> {
        let lr: Vec<Tensor> = pairs.iter().map(|p| p.lr.to_unit()).collect();
        let hr: Vec<Tensor> = pairs.iter().map(|p| p.hr.to_unit()).collect();
        Ok(Batch {
            lr: Tensor::stack(&lr)?,
            hr: Tensor::stack(&hr)?,
        })
    }

    pub fn len(&self) -> usize {
        self.hr.shape().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// An in-memory image set with a deterministic per-epoch batch stream.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<Image>,
    skipped: usize,
    cfg: PipelineConfig,
}

impl Dataset {
    /// Load every image in `dir`. Unreadable files and images smaller than
    /// the crop are skipped with a warning and counted.
    pub fn open(dir: impl AsRef<Path>, cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = dir.as_ref();
        let paths = list_images(dir)?;
        let loaded: Vec<Result<Image>> = paths.par_iter().map(load_image).collect();
        let mut images = Vec::new();
        let mut skipped = 0;
        for (path, img) in paths.iter().zip(loaded) {
            match img {
                Ok(img) if img.width() >= cfg.crop_size && img.height() >= cfg.crop_size => images.push(img),
                Ok(img) => {
                    warn!(
                        "skipping {}: {}x{} is smaller than crop {}",
                        path.display(),
                        img.width(),
                        img.height(),
                        cfg.crop_size
                    );
                    skipped += 1;
                }
                Err(e) => {
                    warn!("skipping {}: {e}", path.display());
                    skipped += 1;
                }
            }
        }
        if images.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no usable images in {} ({skipped} skipped)",
                dir.display()
            )));
        }
        Ok(Dataset { images, skipped, cfg })
    }

    pub fn from_images(images: Vec<Image>, cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        if images.is_empty() {
            return Err(Error::InvalidArgument("dataset needs at least one image".into()));
        }
        if let Some(img) = images.iter().find(|i| i.width() < cfg.crop_size || i.height() < cfg.crop_size) {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} is smaller than crop size {}",
                img.width(),
                img.height(),
                cfg.crop_size
            )));
        }
        Ok(Dataset { images, skipped: 0, cfg })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn num_batches(&self, batch_size: usize) -> usize {
        self.len().div_ceil(batch_size.max(1))
    }

    /// Visit order for `epoch`: a seeded shuffle of the sorted file list.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Batches for one epoch; the last batch may be short. The stream depends
    /// only on the images, the config and `epoch`.
    pub fn batches(&self, epoch: u64, batch_size: usize) -> Result<Batches<'_>> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(Batches {
            ds: self,
            order: self.epoch_order(epoch),
            pos: 0,
            batch_size,
            epoch,
        })
    }

    /// Center-cropped pairs of every image, for validation.
    pub fn eval_pairs(&self) -> Result<Vec<ImagePair>> {
        self.images.iter().map(|i| make_eval_pair(i, &self.cfg)).collect()
    }
}

pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    epoch: u64,
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let slots: Vec<usize> = (self.pos..end).collect();
        self.pos = end;
        let cfg = self.ds.cfg;
        let epoch_key = mix(cfg.seed ^ mix(self.epoch));
        let pairs: Result<Vec<ImagePair>> = slots
            .par_iter()
            .map(|&slot| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(epoch_key ^ slot as u64));
                make_pair(&self.ds.images[self.order[slot]], &cfg, &mut rng)
            })
            .collect();
        Some(pairs.and_then(|p| Batch::from_pairs(&p)))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (n, Some(n))
    }
}
