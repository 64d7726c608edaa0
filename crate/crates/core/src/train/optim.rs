use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{Checkpoint, Gradients, ModelGraph, NamedTensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.lr > 0.0 && self.eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and eps must be positive, weight decay non-negative".into()));
        }
        Ok(())
    }
}

/// First and second moments of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Optimizer state for every parameter of one model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

/// One decoupled-decay Adam update of a single tensor at step `t` (1-based).
pub fn adamw_update(theta: &mut [f32], grad: &[f32], mom: &mut Moments, t: u64, lr: f64, cfg: &AdamWConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (((p, &g), m), v) in theta.iter_mut().zip(grad).zip(&mut mom.m).zip(&mut mom.v) {
        let g = g as f64;
        let mn = cfg.beta1 * *m as f64 + (1.0 - cfg.beta1) * g;
        let vn = cfg.beta2 * *v as f64 + (1.0 - cfg.beta2) * g * g;
        *m = mn as f32;
        *v = vn as f32;
        let m_hat = mn / bc1;
        let v_hat = vn / bc2;
        let theta0 = *p as f64;
        *p = (theta0 - lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * theta0)) as f32;
    }
}

/// Apply one AdamW step to every parameter of `model`. Nothing is modified
/// if any gradient is missing, misshapen or non-finite.
pub fn adamw_step(
    model: &mut ModelGraph,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::StepAborted(format!("non-finite gradient in `{name}`")));
    }
    for e in model.entries().iter().filter(|e| e.kind.is_parameter()) {
        let g = grads
            .get(&e.name)
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient for `{}`", e.name)))?;
        if g.len() != e.data.len() {
            return Err(Error::InvalidArgument(format!(
                "gradient for `{}` has {} values, parameter has {}",
                e.name,
                g.len(),
                e.data.len()
            )));
        }
    }
    state.step += 1;
    let t = state.step;
    for e in model.entries_mut().into_iter().filter(|e| e.kind.is_parameter()) {
        let n = e.data.len();
        let mom = state.moments.entry(e.name.clone()).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        adamw_update(e.data, grads.get(&e.name).unwrap(), mom, t, lr, cfg);
    }
    Ok(())
}

impl AdamState {
    /// Records `opt.{param}.m`, `opt.{param}.v` and `opt.step`.
    pub fn to_records(&self) -> Vec<NamedTensor> {
        let mut out = vec![NamedTensor::new("opt.step".into(), vec![2], u64_words(self.step).to_vec())];
        for (name, mom) in &self.moments {
            out.push(NamedTensor::new(format!("opt.{name}.m"), vec![mom.m.len()], mom.m.clone()));
            out.push(NamedTensor::new(format!("opt.{name}.v"), vec![mom.v.len()], mom.v.clone()));
        }
        out
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let step = match ckpt.get("opt.step") {
            Some(t) => words_u64(&t.data).ok_or_else(|| Error::Format("malformed `opt.step`".into()))?,
            None => 0,
        };
        let mut moments = BTreeMap::new();
        for (rest, t) in ckpt.with_prefix("opt.") {
            let Some(name) = rest.strip_suffix(".m") else { continue };
            let v = ckpt
                .get(&format!("opt.{name}.v"))
                .ok_or_else(|| Error::Format(format!("missing `opt.{name}.v`")))?;
            if v.data.len() != t.data.len() {
                return Err(Error::Format(format!("moment sizes differ for `{name}`")));
            }
            moments.insert(
                name.to_string(),
                Moments {
                    m: t.data.clone(),
                    v: v.data.clone(),
                },
            );
        }
        Ok(AdamState { step, moments })
    }
}

/// A `u64` stored bit-exactly as two f32 words (low, high).
pub(crate) fn u64_words(v: u64) -> [f32; 2] {
    [f32::from_bits(v as u32), f32::from_bits((v >> 32) as u32)]
}

pub(crate) fn words_u64(w: &[f32]) -> Option<u64> {
    match w {
        [lo, hi] => Some(lo.to_bits() as u64 | (hi.to_bits() as u64) << 32),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.5,
            patience: 5,
            min_lr: 1e-7,
        }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::Config(format!("plateau factor must lie in (0, 1), got {}", self.factor)));
        }
        if !(self.min_lr >= 0.0) {
            return Err(Error::Config("min_lr must be non-negative".into()));
        }
        Ok(())
    }
}

/// Reduce-on-plateau bookkeeping for a minimized metric.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlateauState {
    pub best: Option<f64>,
    pub bad_evals: usize,
}

/// Record `metric` and return the learning rate to use next.
pub fn plateau_step(state: &mut PlateauState, cfg: &PlateauConfig, lr: f64, metric: f64) -> f64 {
    if !metric.is_finite() {
        return lr;
    }
    match state.best {
        Some(b) if metric >= b => state.bad_evals += 1,
        _ => {
            state.best = Some(metric);
            state.bad_evals = 0;
        }
    }
    if state.bad_evals > cfg.patience {
        state.bad_evals = 0;
        return (lr * cfg.factor).max(cfg.min_lr);
    }
    lr
}
