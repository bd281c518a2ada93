use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_distr::Open01;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Temperature schedule: fixed `tau`, or an exponential decay to `final_tau`
/// over a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GumbelConfig {
    pub tau: f64,
    #[serde(default)]
    pub final_tau: Option<f64>,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig {
            tau: 1.0,
            final_tau: None,
        }
    }
}

impl GumbelConfig {
    pub fn annealed() -> Self {
        GumbelConfig {
            tau: 1.0,
            final_tau: Some(0.1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || self.final_tau.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::Config(format!("temperatures must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Temperature at `epoch` of `epochs`.
    pub fn tau_at(&self, epoch: usize, epochs: usize) -> f64 {
        match self.final_tau {
            Some(end) if epochs > 1 => {
                let t = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
                self.tau * (end / self.tau).powf(t)
            }
            Some(end) => end,
            None => self.tau,
        }
    }
}

/// Standard Gumbel draws `-ln(-ln u)` with `u` uniform on `(0, 1)`.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            -(-u.ln()).ln()
        })
        .collect()
}

pub fn gumbel_noise_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n = shape.iter().product();
    Ok(Tensor::from_vec(gumbel_noise(rng, n), shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// `softmax((h + g) / tau)`.
pub fn gumbel_softmax(h: &[f64], g: &[f64], tau: f64) -> Vec<f64> {
    assert!(tau > 0.0, "temperature must be positive");
    assert_eq!(h.len(), g.len());
    let y: Vec<f64> = h.iter().zip(g).map(|(a, b)| (a + b) / tau).collect();
    let m = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = y.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Tensor form of [`gumbel_softmax`] along `dim`.
pub fn gumbel_softmax_tensor<Dm: candle_core::shape::Dim>(
    logits: &Tensor,
    noise: &Tensor,
    tau: f64,
    dim: Dm,
) -> Result<Tensor> {
    assert!(tau > 0.0, "temperature must be positive");
    Ok(candle_nn::ops::softmax(&((logits + noise)? / tau)?, dim)?)
}

/// Hard sample `argmax(h + g)`.
pub fn gumbel_argmax(h: &[f64], g: &[f64]) -> usize {
    h.iter()
        .zip(g)
        .map(|(a, b)| a + b)
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map_or(0, |(i, _)| i)
}

/// Per-row hard argmax of a `(.., C)` tensor as one-hot.
pub fn one_hot_argmax(t: &Tensor) -> Result<Tensor> {
    let c = t.dim(D::Minus1)?;
    let idx = t.argmax_keepdim(D::Minus1)?;
    let range = Tensor::arange(0u32, c as u32, t.device())?;
    Ok(idx.broadcast_eq(&range)?.to_dtype(t.dtype())?)
}
