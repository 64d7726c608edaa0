use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
}

/// Statistics saved by a forward pass for the adjoint and for the
/// running-average update.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub mode: Mode,
    /// Normalized input `(x − μ) / sqrt(σ² + eps)`.
    pub xhat: Tensor,
    pub inv_std: Vec<f32>,
    pub batch_mean: Vec<f32>,
    /// Unbiased batch variance, used only for the running estimate.
    pub batch_var_unbiased: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, input: &Tensor) -> Result<()> {
        let c = input.shape().c;
        if [self.beta.len(), self.running_mean.len(), self.running_var.len()]
            .iter()
            .any(|&l| l != self.gamma.len())
            || c != self.gamma.len()
        {
            return Err(Error::InvalidArgument(format!(
                "batch norm has {} channels, input has {c}",
                self.gamma.len()
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("batch norm eps must be positive".into()));
        }
        Ok(())
    }

    /// Forward pass without touching the running statistics.
    pub fn forward_cached(&self, input: &Tensor, mode: Mode) -> Result<(Tensor, BatchNormCache)> {
        self.check(input)?;
        let s = input.shape();
        let count = s.n * s.plane();
        let (mean, var_biased, var_unbiased) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "batch norm in train mode needs at least 2 values per channel, got {count}"
                    )));
                }
                let stats: Vec<(f32, f32, f32)> = (0..s.c)
                    .into_par_iter()
                    .map(|c| {
                        let mut sum = 0.0f64;
                        for n in 0..s.n {
                            sum += input.plane(n, c).iter().map(|&v| v as f64).sum::<f64>();
                        }
                        let mu = sum / count as f64;
                        let mut sq = 0.0f64;
                        for n in 0..s.n {
                            sq += input
                                .plane(n, c)
                                .iter()
                                .map(|&v| (v as f64 - mu).powi(2))
                                .sum::<f64>();
                        }
                        (mu as f32, (sq / count as f64) as f32, (sq / (count - 1) as f64) as f32)
                    })
                    .collect();
                (
                    stats.iter().map(|s| s.0).collect::<Vec<_>>(),
                    stats.iter().map(|s| s.1).collect::<Vec<_>>(),
                    stats.iter().map(|s| s.2).collect::<Vec<_>>(),
                )
            }
            Mode::Eval => (
                self.running_mean.clone(),
                self.running_var.clone(),
                self.running_var.clone(),
            ),
        };
        let inv_std: Vec<f32> = var_biased
            .iter()
            .map(|&v| 1.0 / (v.max(0.0) + self.eps).sqrt())
            .collect();

        let plane = s.plane();
        let mut xhat = input.clone();
        let mut out = input.clone();
        xhat.data_mut()
            .par_chunks_mut(plane)
            .zip(out.data_mut().par_chunks_mut(plane))
            .enumerate()
            .for_each(|(nc, (xh, o))| {
                let c = nc % s.c;
                for (xv, ov) in xh.iter_mut().zip(o.iter_mut()) {
                    *xv = (*xv - mean[c]) * inv_std[c];
                    *ov = self.gamma[c] * *xv + self.beta[c];
                }
            });
        Ok((
            out,
            BatchNormCache {
                mode,
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var_unbiased: var_unbiased,
            },
        ))
    }

    /// `running ← (1 − momentum)·running + momentum·batch` for a train-mode cache.
    pub fn update_running(&mut self, cache: &BatchNormCache) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = self.momentum;
        for c in 0..self.gamma.len() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * cache.batch_mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * cache.batch_var_unbiased[c];
        }
    }

    /// Forward pass; in train mode the running statistics are updated.
    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let (out, cache) = self.forward_cached(input, mode)?;
        self.update_running(&cache);
        Ok(out)
    }

    pub fn backward(&self, cache: &BatchNormCache, grad_out: &Tensor) -> Result<BatchNormGrads> {
        cache.xhat.check_same(grad_out)?;
        let s = grad_out.shape();
        let count = (s.n * s.plane()) as f64;
        let mut dgamma = vec![0.0f32; s.c];
        let mut dbeta = vec![0.0f32; s.c];
        for c in 0..s.c {
            let (mut g, mut b) = (0.0f64, 0.0f64);
            for n in 0..s.n {
                for (&dy, &xh) in grad_out.plane(n, c).iter().zip(cache.xhat.plane(n, c)) {
                    g += (dy * xh) as f64;
                    b += dy as f64;
                }
            }
            dgamma[c] = g as f32;
            dbeta[c] = b as f32;
        }

        let mut dx = grad_out.clone();
        let plane = s.plane();
        dx.data_mut()
            .par_chunks_mut(plane)
            .zip(cache.xhat.data().par_chunks(plane))
            .enumerate()
            .for_each(|(nc, (d, xh))| {
                let c = nc % s.c;
                let scale = self.gamma[c] * cache.inv_std[c];
                match cache.mode {
                    Mode::Eval => d.iter_mut().for_each(|v| *v *= scale),
                    Mode::Train => {
                        let mb = dbeta[c] as f64 / count;
                        let mg = dgamma[c] as f64 / count;
                        for (v, &x) in d.iter_mut().zip(xh) {
                            *v = (scale as f64 * (*v as f64 - mb - x as f64 * mg)) as f32;
                        }
                    }
                }
            });
        Ok(BatchNormGrads {
            input: dx,
            gamma: dgamma,
            beta: dbeta,
        })
    }
}
