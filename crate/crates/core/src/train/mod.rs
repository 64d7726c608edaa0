//! AdamW, plateau scheduling and the alternating GAN training loop.
//!
//! Each iteration runs one discriminator step on real and detached fake
//! images, then one generator step on the perceptual loss. [`fit`] drives
//! whole epochs, validates, schedules learning rates and writes resumable
//! checkpoints.

mod config;
mod optim;

pub use config::TrainConfig;
pub use optim::{
    adamw_step, adamw_update, plateau_step, AdamState, AdamWConfig, Moments, PlateauConfig, PlateauState,
};

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;

use crate::data::{Batch, Dataset, ImagePair};
use crate::error::{Error, Result};
use crate::loss::{
    adversarial_loss, adversarial_loss_grad, content_loss, content_loss_grad, discriminator_loss,
    discriminator_loss_grad, perceptual_loss_weighted, AdversarialReduction, ContentReduction, FeatureExtractor,
    LossReport,
};
use crate::metrics::{psnr, ssim, SsimConfig};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, ModelGraph, NamedTensor, Tape};
use crate::nn::Mode;
use crate::tensor::Tensor;
use optim::{u64_words, words_u64};

pub const GENERATOR_FILE: &str = "generator.ssrg";
pub const DISCRIMINATOR_FILE: &str = "discriminator.ssrg";
pub const BEST_GENERATOR_FILE: &str = "best_generator.ssrg";
pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "epoch,step,content,adversarial,perceptual,d_loss,val_psnr,val_ssim,lr_g,lr_d";

/// Loss weighting and optimizer settings shared by the step functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    pub adversarial_weight: f64,
    pub content_reduction: ContentReduction,
    pub adversarial_reduction: AdversarialReduction,
    pub adam_g: AdamWConfig,
    pub adam_d: AdamWConfig,
    pub lr_g: f64,
    pub lr_d: f64,
}

fn abort(what: &str, e: Error) -> Error {
    Error::StepAborted(format!("{what}: {e}"))
}

fn check_loss(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::StepAborted(format!("{name} loss is {v}")))
    }
}

/// One discriminator update on real `hr` and fake `sr`. `sr` is treated as
/// a constant, so no gradient reaches the generator.
pub fn discriminator_step(
    disc: &mut ModelGraph,
    hr: &Tensor,
    sr: &Tensor,
    opt: &mut AdamState,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<f64> {
    let (p_real, t_real) = disc.forward_tape(hr, Mode::Train)?;
    let (p_fake, t_fake) = disc.forward_tape(sr, Mode::Train)?;
    let loss = discriminator_loss(p_real.data(), p_fake.data()).map_err(|e| abort("discriminator", e))?;
    check_loss("discriminator", loss)?;
    let (g_real, g_fake) = discriminator_loss_grad(p_real.data(), p_fake.data())?;
    let (_, mut grads) = disc.backward(&t_real, &Tensor::from_vec(p_real.shape(), g_real)?)?;
    let (_, fake_grads) = disc.backward(&t_fake, &Tensor::from_vec(p_fake.shape(), g_fake)?)?;
    grads.merge(fake_grads);
    adamw_step(disc, &grads, opt, cfg, lr)?;
    disc.commit_running_stats(&t_real);
    disc.commit_running_stats(&t_fake);
    Ok(loss)
}

/// One generator update from the recorded forward `gen_tape` that produced
/// `sr`. The discriminator and extractor are only read. Returns the content
/// and adversarial terms.
#[allow(clippy::too_many_arguments)]
pub fn generator_step(
    gen: &mut ModelGraph,
    gen_tape: &Tape,
    sr: &Tensor,
    hr: &Tensor,
    disc: &ModelGraph,
    fx: &FeatureExtractor,
    opt: &mut AdamState,
    cfg: &StepConfig,
) -> Result<(f64, f64)> {
    let phi_hr = fx.extract(hr)?;
    let (phi_sr, fx_tape) = fx.extract_recorded(sr)?;
    let content = check_loss("content", content_loss(&phi_hr, &phi_sr, cfg.content_reduction)?)?;
    let (p_fake, d_tape) = disc.forward_tape(sr, Mode::Train)?;
    let adversarial = adversarial_loss(p_fake.data(), cfg.adversarial_reduction).map_err(|e| abort("adversarial", e))?;
    check_loss("adversarial", adversarial)?;

    let grad_phi = content_loss_grad(&phi_hr, &phi_sr, cfg.content_reduction)?;
    let mut grad_sr = fx.backward(&fx_tape, &grad_phi)?;
    if cfg.adversarial_weight != 0.0 {
        let w = cfg.adversarial_weight as f32;
        let grad_p: Vec<f32> = adversarial_loss_grad(p_fake.data(), cfg.adversarial_reduction)?
            .into_iter()
            .map(|g| g * w)
            .collect();
        let grad_adv = disc.backward_input(&d_tape, &Tensor::from_vec(p_fake.shape(), grad_p)?)?;
        grad_sr.add_assign(&grad_adv)?;
    }
    let (_, grads) = gen.backward(gen_tape, &grad_sr)?;
    adamw_step(gen, &grads, opt, &cfg.adam_g, cfg.lr_g)?;
    Ok((content, adversarial))
}

/// Discriminator step then generator step on one batch.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    gen: &mut ModelGraph,
    disc: &mut ModelGraph,
    fx: &FeatureExtractor,
    lr_batch: &Tensor,
    hr_batch: &Tensor,
    opt_g: &mut AdamState,
    opt_d: &mut AdamState,
    cfg: &StepConfig,
) -> Result<LossReport> {
    let (sr, gen_tape) = gen.forward_tape(lr_batch, Mode::Train)?;
    sr.check_same(hr_batch)
        .map_err(|e| Error::InvalidArgument(format!("generator output does not match the hr batch: {e}")))?;
    if let Err(Error::NonFinite { index }) = sr.validate_finite() {
        return Err(Error::StepAborted(format!("generator output is non-finite at index {index}")));
    }
    let d_loss = discriminator_step(disc, hr_batch, &sr, opt_d, &cfg.adam_d, cfg.lr_d)?;
    let (content, adversarial) = generator_step(gen, &gen_tape, &sr, hr_batch, disc, fx, opt_g, cfg)?;
    gen.commit_running_stats(&gen_tape);
    Ok(LossReport {
        content,
        adversarial,
        perceptual: perceptual_loss_weighted(content, adversarial, cfg.adversarial_weight)?,
        discriminator: d_loss,
    })
}

/// Scalar bookkeeping that travels with the generator checkpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainState {
    pub epoch: u64,
    pub step: u64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub best_val: Option<f64>,
    pub plateau_g: PlateauState,
    pub plateau_d: PlateauState,
    pub seed: u64,
}

fn opt_bits(v: Option<f64>) -> u64 {
    v.unwrap_or(f64::NAN).to_bits()
}

fn bits_opt(b: u64) -> Option<f64> {
    Some(f64::from_bits(b)).filter(|v| !v.is_nan())
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        TrainState {
            epoch: 0,
            step: 0,
            lr_g: cfg.adam_g.lr,
            lr_d: cfg.adam_d.lr,
            best_val: None,
            plateau_g: PlateauState::default(),
            plateau_d: PlateauState::default(),
            seed: cfg.seed,
        }
    }

    fn words(&self) -> [(&'static str, u64); 10] {
        [
            ("epoch", self.epoch),
            ("step", self.step),
            ("lr_g", self.lr_g.to_bits()),
            ("lr_d", self.lr_d.to_bits()),
            ("best_val", opt_bits(self.best_val)),
            ("plateau_g.best", opt_bits(self.plateau_g.best)),
            ("plateau_g.bad_evals", self.plateau_g.bad_evals as u64),
            ("plateau_d.best", opt_bits(self.plateau_d.best)),
            ("plateau_d.bad_evals", self.plateau_d.bad_evals as u64),
            ("seed", self.seed),
        ]
    }

    /// `state.*` records, each a 64-bit value packed bit-exactly into two f32 words.
    pub fn to_records(&self) -> Vec<NamedTensor> {
        self.words()
            .iter()
            .map(|&(k, v)| NamedTensor::new(format!("state.{k}"), vec![2], u64_words(v).to_vec()))
            .collect()
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let get = |k: &str| -> Result<u64> {
            ckpt.get(&format!("state.{k}"))
                .and_then(|t| words_u64(&t.data))
                .ok_or_else(|| Error::Format(format!("missing or malformed `state.{k}`")))
        };
        Ok(TrainState {
            epoch: get("epoch")?,
            step: get("step")?,
            lr_g: f64::from_bits(get("lr_g")?),
            lr_d: f64::from_bits(get("lr_d")?),
            best_val: bits_opt(get("best_val")?),
            plateau_g: PlateauState {
                best: bits_opt(get("plateau_g.best")?),
                bad_evals: get("plateau_g.bad_evals")? as usize,
            },
            plateau_d: PlateauState {
                best: bits_opt(get("plateau_d.best")?),
                bad_evals: get("plateau_d.bad_evals")? as usize,
            },
            seed: get("seed")?,
        })
    }
}

/// Mean validation scores over a set of pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Validation {
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
}

/// Generator, discriminator, frozen extractor and their optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub generator: ModelGraph,
    pub discriminator: ModelGraph,
    pub extractor: FeatureExtractor,
    pub opt_g: AdamState,
    pub opt_d: AdamState,
    pub state: TrainState,
}

impl Trainer {
    fn generator_config(cfg: &TrainConfig) -> ModelConfig {
        ModelConfig::Generator(cfg.generator.clone(), cfg.generator_style)
    }

    fn discriminator_config(cfg: &TrainConfig) -> ModelConfig {
        ModelConfig::Discriminator(cfg.discriminator.clone(), crate::model::ConvStyle::Separable)
    }

    /// Fresh models seeded from `cfg.seed`.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            generator: Self::generator_config(&cfg).build(cfg.seed)?,
            discriminator: Self::discriminator_config(&cfg).build(cfg.seed.wrapping_add(1))?,
            extractor: FeatureExtractor::reference(&cfg.extractor, cfg.seed.wrapping_add(2))?,
            opt_g: AdamState::default(),
            opt_d: AdamState::default(),
            state: TrainState::new(&cfg),
            cfg,
        })
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            adversarial_weight: self.cfg.adversarial_weight,
            content_reduction: self.cfg.content_reduction,
            adversarial_reduction: self.cfg.adversarial_reduction,
            adam_g: self.cfg.adam_g,
            adam_d: self.cfg.adam_d,
            lr_g: self.state.lr_g,
            lr_d: self.state.lr_d,
        }
    }

    pub fn step(&mut self, batch: &Batch) -> Result<LossReport> {
        let cfg = self.step_config();
        let report = train_step(
            &mut self.generator,
            &mut self.discriminator,
            &self.extractor,
            &batch.lr,
            &batch.hr,
            &mut self.opt_g,
            &mut self.opt_d,
            &cfg,
        )?;
        self.state.step += 1;
        Ok(report)
    }

    /// Eval-mode scores on `[0, 1]` images: PSNR (peak 1), SSIM and the
    /// perceptual loss the scheduler monitors.
    pub fn validate(&self, pairs: &[ImagePair]) -> Result<Validation> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("no validation pairs".into()));
        }
        let ssim_cfg = SsimConfig::unit_range();
        let (mut p, mut s, mut l) = (0.0, 0.0, 0.0);
        for pair in pairs {
            let hr = pair.hr.to_unit();
            let sr = self.generator.forward(&pair.lr.to_unit())?.map(|v| v.clamp(0.0, 1.0));
            p += psnr(&sr, &hr, 1.0)?;
            s += ssim(&sr, &hr, &ssim_cfg)?;
            let content = content_loss(&self.extractor.extract(&hr)?, &self.extractor.extract(&sr)?, self.cfg.content_reduction)?;
            let prob = self.discriminator.forward(&sr)?;
            let adv = adversarial_loss(prob.data(), self.cfg.adversarial_reduction)?;
            l += perceptual_loss_weighted(content, adv, self.cfg.adversarial_weight)?;
        }
        let n = pairs.len() as f64;
        Ok(Validation {
            psnr: p / n,
            ssim: s / n,
            perceptual: l / n,
        })
    }

    /// Write the generator (with its optimizer and training state) and the
    /// discriminator (with its optimizer) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut g_extra = self.opt_g.to_records();
        g_extra.extend(self.state.to_records());
        save_checkpoint(&self.generator, &g_extra, dir.join(GENERATOR_FILE))?;
        save_checkpoint(&self.discriminator, &self.opt_d.to_records(), dir.join(DISCRIMINATOR_FILE))
    }

    /// Restore a run saved by [`Trainer::save`]; the stored models must match `cfg`.
    pub fn load(dir: &Path, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (generator, g_ckpt) = load_checkpoint(dir.join(GENERATOR_FILE))?;
        let (discriminator, d_ckpt) = load_checkpoint(dir.join(DISCRIMINATOR_FILE))?;
        if *generator.config() != Self::generator_config(&cfg) {
            return Err(Error::Config("stored generator does not match the run config".into()));
        }
        if *discriminator.config() != Self::discriminator_config(&cfg) {
            return Err(Error::Config("stored discriminator does not match the run config".into()));
        }
        let state = TrainState::from_checkpoint(&g_ckpt)?;
        if state.seed != cfg.seed {
            return Err(Error::Config(format!(
                "checkpoint was trained with seed {}, run config has {}",
                state.seed, cfg.seed
            )));
        }
        Ok(Trainer {
            extractor: FeatureExtractor::reference(&cfg.extractor, cfg.seed.wrapping_add(2))?,
            opt_g: AdamState::from_checkpoint(&g_ckpt)?,
            opt_d: AdamState::from_checkpoint(&d_ckpt)?,
            generator,
            discriminator,
            state,
            cfg,
        })
    }
}

/// One row of the metric log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    pub step: u64,
    pub losses: LossReport,
    pub val: Validation,
    pub lr_g: f64,
    pub lr_d: f64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let l = &self.losses;
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            l.content,
            l.adversarial,
            l.perceptual,
            l.discriminator,
            self.val.psnr,
            self.val.ssim,
            self.lr_g,
            self.lr_d
        );
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub out_dir: PathBuf,
    pub logs: Vec<EpochLog>,
    pub resumed_from_epoch: Option<u64>,
    pub trainer: Trainer,
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Train on images in `train_dir`, validating on `val_dir` after every epoch.
///
/// `out_dir` receives `generator.ssrg`, `discriminator.ssrg`,
/// `best_generator.ssrg` and `metrics.csv`. With `resume`, an existing run in
/// `out_dir` is continued until `cfg.epochs` epochs are complete.
pub fn fit(train_dir: &Path, val_dir: &Path, cfg: TrainConfig, out_dir: &Path, resume: bool) -> Result<FitReport> {
    cfg.validate()?;
    let train = Dataset::open(train_dir, cfg.pipeline)?;
    let val = Dataset::open(val_dir, cfg.pipeline)?;
    if train.skipped() > 0 {
        info!("skipped {} unreadable training files", train.skipped());
    }
    fit_datasets(&train, &val, cfg, out_dir, resume)
}

/// [`fit`] over already loaded datasets.
pub fn fit_datasets(
    train: &Dataset,
    val: &Dataset,
    cfg: TrainConfig,
    out_dir: &Path,
    resume: bool,
) -> Result<FitReport> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let existing = out_dir.join(GENERATOR_FILE).exists();
    let (mut trainer, resumed_from_epoch) = if resume && existing {
        let t = Trainer::load(out_dir, cfg.clone())?;
        let e = t.state.epoch;
        (t, Some(e))
    } else {
        let t = Trainer::new(cfg.clone())?;
        std::fs::write(&metrics_path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&metrics_path, e))?;
        t.save(out_dir)?;
        (t, None)
    };
    if !metrics_path.exists() {
        std::fs::write(&metrics_path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&metrics_path, e))?;
    }
    let eval_pairs = val.eval_pairs()?;
    let mut logs = Vec::new();
    while trainer.state.epoch < cfg.epochs {
        let epoch = trainer.state.epoch;
        let mut sum = LossReport::default();
        let mut n = 0usize;
        for batch in train.batches(epoch, cfg.batch_size)? {
            let r = trainer.step(&batch?)?;
            sum.content += r.content;
            sum.adversarial += r.adversarial;
            sum.perceptual += r.perceptual;
            sum.discriminator += r.discriminator;
            n += 1;
        }
        let k = n.max(1) as f64;
        let losses = LossReport {
            content: sum.content / k,
            adversarial: sum.adversarial / k,
            perceptual: sum.perceptual / k,
            discriminator: sum.discriminator / k,
        };
        let v = trainer.validate(&eval_pairs)?;
        let st = &mut trainer.state;
        st.lr_g = plateau_step(&mut st.plateau_g, &cfg.plateau, st.lr_g, v.perceptual);
        st.lr_d = plateau_step(&mut st.plateau_d, &cfg.plateau, st.lr_d, v.perceptual);
        let improved = st.best_val.is_none_or(|b| v.perceptual < b);
        if improved {
            st.best_val = Some(v.perceptual);
        }
        st.epoch += 1;
        let log = EpochLog {
            epoch: st.epoch,
            step: st.step,
            losses,
            val: v,
            lr_g: st.lr_g,
            lr_d: st.lr_d,
        };
        if improved {
            save_checkpoint(&trainer.generator, &[], out_dir.join(BEST_GENERATOR_FILE))?;
        }
        trainer.save(out_dir)?;
        append_line(&metrics_path, &log.csv_row())?;
        info!(
            "epoch {} step {}: perceptual {:.5}, d_loss {:.4}, val psnr {:.3} dB, ssim {:.4}",
            log.epoch, log.step, losses.perceptual, losses.discriminator, v.psnr, v.ssim
        );
        logs.push(log);
    }
    Ok(FitReport {
        out_dir: out_dir.to_path_buf(),
        logs,
        resumed_from_epoch,
        trainer,
    })
}
