//! The data-dependent-prior diffusion: noise schedule, closed-form forward
//! kernel, score targets, the conditional score network, training and
//! reverse-SDE sampling.
//!
//! The forward process drifts mel frames toward the prior `xbar` (the SIMS)
//! while injecting noise: `dX = 1/2 (xbar - X) beta(t) dt + sqrt(beta(t)) dW`
//! on t in [0, 1]. Its transition kernel is Gaussian with mean
//! `xbar + (x0 - xbar) exp(-B(t)/2)` and variance `lambda(t) = 1 - exp(-B(t))`
//! where `B(t)` integrates the schedule, so the terminal distribution is
//! `N(xbar, I)` for any schedule. The reverse process subtracts the score and
//! is solved backwards with Euler-Maruyama steps.

mod sample;
mod train;
mod unet;

pub use sample::{reverse_sde_sample, reverse_sde_with_score};
pub use train::{
    decoder_eval_loss, decoder_loss, finetune_decoder, train_decoder, DecoderTrainConfig,
    DecoderTrainItem,
};
pub use unet::{build_speaker_condition, score_forward, ScoreNetwork, ScoreNetworkConfig};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Smallest diffusion time used anywhere; avoids the score singularity at 0.
pub const T_MIN: f64 = 1e-5;

/// Linear noise schedule `beta(t) = beta0 + (beta1 - beta0) t` on [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    pub beta0: f64,
    pub beta1: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            beta0: 0.05,
            beta1: 20.0,
        }
    }
}

impl NoiseSchedule {
    pub fn new(beta0: f64, beta1: f64) -> Result<Self> {
        if !(0.0 < beta0 && beta0 < beta1) {
            return Err(Error::Config(format!(
                "noise schedule needs 0 < beta0 < beta1, got [{beta0}, {beta1}]"
            )));
        }
        Ok(Self { beta0, beta1 })
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta0 + (self.beta1 - self.beta0) * t
    }

    /// `B(t) = integral_0^t beta(s) ds = beta0 t + (beta1 - beta0) t^2 / 2`.
    pub fn b_integral(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!(
                "diffusion time {t} outside [0, 1]"
            )));
        }
        Ok(self.beta0 * t + 0.5 * (self.beta1 - self.beta0) * t * t)
    }

    /// Kernel variance `lambda(t) = 1 - exp(-B(t))`, strictly increasing.
    pub fn lambda(&self, t: f64) -> Result<f64> {
        Ok(1.0 - (-self.b_integral(t)?).exp())
    }

    /// Kernel mean coefficient `exp(-B(t)/2)` on `x0 - xbar`.
    pub fn mean_coeff(&self, t: f64) -> Result<f64> {
        Ok((-0.5 * self.b_integral(t)?).exp())
    }
}

/// Draws `x_t` from the closed-form transition kernel given standard-normal
/// `noise`: `x_t = xbar + (x0 - xbar) e^{-B/2} + sqrt(lambda) noise`.
pub fn forward_sample(
    x0: &Array2<f64>,
    xbar: &Array2<f64>,
    t: f64,
    noise: &Array2<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if x0.dim() != xbar.dim() || x0.dim() != noise.dim() {
        return Err(Error::Shape(format!(
            "forward_sample shapes differ: x0 {:?}, xbar {:?}, noise {:?}",
            x0.dim(),
            xbar.dim(),
            noise.dim()
        )));
    }
    let mc = schedule.mean_coeff(t)?;
    let sd = schedule.lambda(t)?.sqrt();
    Ok(xbar + &((x0 - xbar) * mc) + &(noise * sd))
}

/// Exact score of the transition kernel at `x_t`:
/// `grad log p(x_t | x0) = -(x_t - mean_t) / lambda(t)`.
///
/// When `x_t` came from [`forward_sample`] with noise `eps`, this equals
/// `-eps / sqrt(lambda(t))`.
pub fn score_target(
    x_t: &Array2<f64>,
    x0: &Array2<f64>,
    xbar: &Array2<f64>,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if t < T_MIN {
        return Err(Error::InvalidArgument(format!(
            "score target undefined below t_min = {T_MIN} (got {t})"
        )));
    }
    let mc = schedule.mean_coeff(t)?;
    let lambda = schedule.lambda(t)?;
    let mean = xbar + &((x0 - xbar) * mc);
    Ok((x_t - &mean) * (-1.0 / lambda))
}
