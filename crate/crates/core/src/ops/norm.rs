//! Batch normalization over NCHW maps.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance-floor epsilon. The f64 engine can afford a tiny one, which keeps
/// normalization of exactly-unit-variance data within 1e-6 of identity.
pub const BN_EPS: f64 = 1e-12;

/// Momentum of the running-statistics exponential moving average.
pub const BN_MOMENTUM: f64 = 0.9;

/// Statistics mode for one batchnorm application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running estimates are updated.
    Train,
    /// Running estimates; never updated.
    Eval,
    /// Running estimates; never updated. Fine-tuning contract: behaves like
    /// `Eval` for statistics while the surrounding network trains.
    Frozen,
}

impl BnMode {
    pub fn uses_batch_stats(self) -> bool {
        matches!(self, BnMode::Train)
    }
}

/// Per-channel running estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub initialized: bool,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels], initialized: false }
    }

    /// Mark the estimates usable as-is (mean 0, var 1 unless set otherwise).
    pub fn init_identity(&mut self) {
        self.initialized = true;
    }

    pub fn set(&mut self, mean: Vec<f64>, var: Vec<f64>) {
        self.mean = mean;
        self.var = var;
        self.initialized = true;
    }

    /// EMA update from one batch's statistics.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        self.initialized = true;
    }
}

/// Values saved by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BnSaved {
    pub mode: BnMode,
    /// Normalized input x_hat.
    pub x_hat: Vec<f64>,
    /// 1 / sqrt(var + eps) per channel.
    pub inv_std: Vec<f64>,
    /// Batch statistics (train mode only), for the running-estimate update.
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

fn check(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!("batchnorm: input must be NCHW, got {:?}", x.shape())));
    }
    let c = x.shape()[1];
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!(
            "batchnorm: gamma/beta must have {} elements (got {}/{})",
            c,
            gamma.len(),
            beta.len()
        )));
    }
    let m = x.shape()[0] * x.shape()[2] * x.shape()[3];
    Ok((c, m, x.shape()[2] * x.shape()[3]))
}

pub fn forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &RunningStats,
    mode: BnMode,
) -> Result<(Tensor, BnSaved)> {
    let (c, m, plane) = check(x, gamma, beta)?;
    let n = x.shape()[0];
    if mode.uses_batch_stats() && m < 2 {
        return Err(Error::Numeric(format!(
            "batchnorm: train mode needs batch*H*W >= 2 per channel, got {m}"
        )));
    }
    if !mode.uses_batch_stats() && !stats.initialized {
        return Err(Error::Numeric(
            "batchnorm: eval/frozen mode requires initialized running statistics".into(),
        ));
    }

    let (mean, var): (Vec<f64>, Vec<f64>) = if mode.uses_batch_stats() {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for ni in 0..n {
                let p = &x.data()[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                s += p.iter().sum::<f64>();
            }
            let mu = s / m as f64;
            let mut sq = 0.0;
            for ni in 0..n {
                let p = &x.data()[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                sq += p.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
            }
            mean[ci] = mu;
            var[ci] = sq / m as f64;
        }
        (mean, var)
    } else {
        (stats.mean.clone(), stats.var.clone())
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut out = Tensor::zeros(x.shape());
    let mut x_hat = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let (mu, is, g, b) = (mean[ci], inv_std[ci], gamma.data()[ci], beta.data()[ci]);
            for i in 0..plane {
                let xh = (x.data()[base + i] - mu) * is;
                x_hat[base + i] = xh;
                out.data_mut()[base + i] = g * xh + b;
            }
        }
    }
    let saved = BnSaved {
        mode,
        x_hat,
        inv_std,
        batch_mean: if mode.uses_batch_stats() { mean } else { Vec::new() },
        batch_var: if mode.uses_batch_stats() { var } else { Vec::new() },
    };
    Ok((out, saved))
}

/// Returns (dx, dgamma, dbeta).
pub fn backward(
    x_shape: &[usize],
    gamma: &Tensor,
    saved: &BnSaved,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c) = (x_shape[0], x_shape[1]);
    let plane = x_shape[2] * x_shape[3];
    let m = (n * plane) as f64;
    let mut dx = Tensor::zeros(x_shape);
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);

    for ci in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in 0..plane {
                let dy = dout.data()[base + i];
                sum_dy += dy;
                sum_dy_xhat += dy * saved.x_hat[base + i];
            }
        }
        dgamma.data_mut()[ci] = sum_dy_xhat;
        dbeta.data_mut()[ci] = sum_dy;

        let g = gamma.data()[ci];
        let is = saved.inv_std[ci];
        if saved.mode.uses_batch_stats() {
            // batch statistics participate in the graph
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                for i in 0..plane {
                    let dy = dout.data()[base + i];
                    let xh = saved.x_hat[base + i];
                    dx.data_mut()[base + i] =
                        g * is / m * (m * dy - sum_dy - xh * sum_dy_xhat);
                }
            }
        } else {
            // statistics are constants
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                for i in 0..plane {
                    dx.data_mut()[base + i] = g * is * dout.data()[base + i];
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn standardized_input() -> Tensor {
        // two channels, each with exactly zero mean and unit (biased) variance
        let vals = [-1.5, -0.5, 0.5, 1.5];
        let scale = (vals.iter().map(|v| v * v).sum::<f64>() / 4.0).sqrt();
        let mut t = Tensor::zeros(&[1, 2, 2, 2]);
        for c in 0..2 {
            for (i, v) in vals.iter().enumerate() {
                t.data_mut()[c * 4 + i] = v / scale;
            }
        }
        t
    }

    #[test]
    fn normalization_fixed_point() {
        let x = standardized_input();
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let stats = RunningStats::new(2);
        let (y, _) = forward(&x, &gamma, &beta, &stats, BnMode::Train).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn frozen_mode_never_touches_stats() {
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let mut stats = RunningStats::new(2);
        stats.set(vec![0.3, -0.1], vec![1.7, 0.4]);
        let before = stats.clone();

        let x1 = Tensor::from_fn(&[2, 2, 2, 2], |i| (i as f64).cos());
        let x2 = Tensor::from_fn(&[2, 2, 2, 2], |i| (i as f64) * 0.17 - 1.0);
        forward(&x1, &gamma, &beta, &stats, BnMode::Frozen).unwrap();
        forward(&x2, &gamma, &beta, &stats, BnMode::Frozen).unwrap();
        assert_eq!(stats, before);
        // bit-identical, not just close
        assert!(stats.mean.iter().zip(&before.mean).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn eval_without_stats_is_an_error() {
        let x = Tensor::zeros(&[1, 2, 2, 2]);
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let stats = RunningStats::new(2);
        assert!(forward(&x, &gamma, &beta, &stats, BnMode::Eval).is_err());
        assert!(forward(&x, &gamma, &beta, &stats, BnMode::Frozen).is_err());
    }

    #[test]
    fn train_mode_needs_two_samples() {
        let x = Tensor::zeros(&[1, 2, 1, 1]);
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let stats = RunningStats::new(2);
        assert!(forward(&x, &gamma, &beta, &stats, BnMode::Train).is_err());
    }

    #[test]
    fn ema_update() {
        let mut stats = RunningStats::new(1);
        stats.update(&[1.0], &[2.0]);
        assert!((stats.mean[0] - 0.1).abs() < 1e-15);
        assert!((stats.var[0] - (0.9 + 0.2)).abs() < 1e-15);
        assert!(stats.initialized);
    }
}
