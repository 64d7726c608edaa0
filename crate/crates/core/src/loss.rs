//! Content, adversarial, perceptual and discriminator losses.
//!
//! Losses are returned as `f64` and accumulated in flat-index order. Each
//! loss that feeds a backward pass has a `*_grad` companion giving the
//! derivative with respect to its second (generated) argument.

use crate::error::{Error, Result};
use crate::model::{build_extractor, ExtractorConfig, ModelGraph, Tape, Topology};
use crate::nn::Mode;
use crate::tensor::Tensor;

/// Weight of the adversarial term in the perceptual loss.
pub const ADVERSARIAL_WEIGHT: f64 = 1e-3;

/// How the squared feature error is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContentReduction {
    /// Divide by `W·H`, then average over channels and batch (a plain mean).
    #[default]
    Mean,
    /// Divide by `W·H`, sum over channels, average over batch.
    ChannelSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdversarialReduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub content: f64,
    pub adversarial: f64,
    pub perceptual: f64,
    pub discriminator: f64,
}

/// Frozen feature network; gradients flow through it to the image only.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    model: ModelGraph,
}

impl FeatureExtractor {
    pub fn new(model: ModelGraph) -> Result<Self> {
        if model.topology() != Topology::Extractor {
            return Err(Error::InvalidArgument("feature extractor needs an extractor topology".into()));
        }
        Ok(FeatureExtractor { model })
    }

    /// Seeded random conv/ReLU6 network used as a perceptual proxy.
    pub fn reference(cfg: &ExtractorConfig, seed: u64) -> Result<Self> {
        Self::new(build_extractor(cfg, seed)?)
    }

    pub fn model(&self) -> &ModelGraph {
        &self.model
    }

    /// Activations after the tapped block.
    pub fn extract(&self, img: &Tensor) -> Result<Tensor> {
        self.model.forward(img)
    }

    pub fn extract_recorded(&self, img: &Tensor) -> Result<(Tensor, Tape)> {
        self.model.forward_tape(img, Mode::Eval)
    }

    /// Gradient with respect to the image; parameters receive nothing.
    pub fn backward(&self, tape: &Tape, grad_features: &Tensor) -> Result<Tensor> {
        self.model.backward_input(tape, grad_features)
    }
}

fn content_divisor(shape: crate::tensor::Shape, reduction: ContentReduction) -> f64 {
    let plane = shape.plane() as f64;
    match reduction {
        ContentReduction::Mean => plane * (shape.c * shape.n) as f64,
        ContentReduction::ChannelSum => plane * shape.n as f64,
    }
}

/// Normalized squared euclidean distance between two feature maps.
pub fn content_loss(phi_hr: &Tensor, phi_sr: &Tensor, reduction: ContentReduction) -> Result<f64> {
    phi_hr.check_same(phi_sr)?;
    if phi_hr.is_empty() {
        return Err(Error::InvalidArgument("content loss of empty feature maps".into()));
    }
    let sum: f64 = phi_hr
        .data()
        .iter()
        .zip(phi_sr.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(sum / content_divisor(phi_hr.shape(), reduction))
}

/// `∂ content / ∂ phi_sr`.
pub fn content_loss_grad(phi_hr: &Tensor, phi_sr: &Tensor, reduction: ContentReduction) -> Result<Tensor> {
    phi_hr.check_same(phi_sr)?;
    let k = 2.0 / content_divisor(phi_hr.shape(), reduction);
    Tensor::from_vec(
        phi_sr.shape(),
        phi_hr
            .data()
            .iter()
            .zip(phi_sr.data())
            .map(|(&a, &b)| (k * (b as f64 - a as f64)) as f32)
            .collect(),
    )
}

fn check_probs(probs: &[f32]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument("loss over an empty batch".into()));
    }
    if let Some(p) = probs.iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::InvalidArgument(format!("probability {p} outside (0, 1)")));
    }
    Ok(())
}

/// `Σ −ln p` over the batch (or its mean).
pub fn adversarial_loss(d_fake: &[f32], reduction: AdversarialReduction) -> Result<f64> {
    check_probs(d_fake)?;
    let sum: f64 = d_fake.iter().map(|&p| -(p as f64).ln()).sum();
    Ok(match reduction {
        AdversarialReduction::Sum => sum,
        AdversarialReduction::Mean => sum / d_fake.len() as f64,
    })
}

/// `∂ adversarial / ∂ p = −1/p`, scaled by `1/N` for the mean.
pub fn adversarial_loss_grad(d_fake: &[f32], reduction: AdversarialReduction) -> Result<Vec<f32>> {
    check_probs(d_fake)?;
    let scale = match reduction {
        AdversarialReduction::Sum => 1.0,
        AdversarialReduction::Mean => 1.0 / d_fake.len() as f64,
    };
    Ok(d_fake.iter().map(|&p| (-scale / p as f64) as f32).collect())
}

/// Perceptual loss with an explicit adversarial weight.
pub fn perceptual_loss_weighted(content: f64, adversarial: f64, weight: f64) -> Result<f64> {
    if !content.is_finite() || !adversarial.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "non-finite loss terms: content {content}, adversarial {adversarial}"
        )));
    }
    Ok(content + weight * adversarial)
}

/// `content + 1e-3 · adversarial`.
pub fn perceptual_loss(content: f64, adversarial: f64) -> Result<f64> {
    perceptual_loss_weighted(content, adversarial, ADVERSARIAL_WEIGHT)
}

/// Binary cross-entropy: batch mean of `−ln d_real − ln(1 − d_fake)`.
pub fn discriminator_loss(d_real: &[f32], d_fake: &[f32]) -> Result<f64> {
    check_probs(d_real)?;
    check_probs(d_fake)?;
    if d_real.len() != d_fake.len() {
        return Err(Error::InvalidArgument(format!(
            "real batch {} and fake batch {} differ in size",
            d_real.len(),
            d_fake.len()
        )));
    }
    let sum: f64 = d_real
        .iter()
        .zip(d_fake)
        .map(|(&r, &f)| -(r as f64).ln() - (1.0 - f as f64).ln())
        .sum();
    Ok(sum / d_real.len() as f64)
}

/// Gradients of [`discriminator_loss`] with respect to the real and fake probabilities.
pub fn discriminator_loss_grad(d_real: &[f32], d_fake: &[f32]) -> Result<(Vec<f32>, Vec<f32>)> {
    discriminator_loss(d_real, d_fake)?;
    let n = d_real.len() as f64;
    Ok((
        d_real.iter().map(|&r| (-1.0 / (n * r as f64)) as f32).collect(),
        d_fake.iter().map(|&f| (1.0 / (n * (1.0 - f as f64))) as f32).collect(),
    ))
}
