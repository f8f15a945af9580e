//! Noise schedule and the deterministic DDIM update.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::LatentTensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("timestep {0} outside the noise schedule")]
    UnknownTimestep(usize),
    #[error("DDIM step must move from a noisier timestep: {from} -> {to}")]
    Ordering { from: usize, to: usize },
    #[error("step count {steps} not supported by a {train}-step schedule")]
    StepCount { steps: usize, train: usize },
}

/// Cumulative signal fractions `alpha_bar[t]` for each training timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// Latent-diffusion "scaled linear" betas.
    pub fn scaled_linear(beta_start: f64, beta_end: f64, train_timesteps: usize) -> Self {
        let (s, e) = (beta_start.sqrt(), beta_end.sqrt());
        let mut alpha_bar = 1.0;
        let alphas_cumprod = (0..train_timesteps)
            .map(|i| {
                let frac = if train_timesteps > 1 {
                    i as f64 / (train_timesteps - 1) as f64
                } else {
                    0.0
                };
                let beta = (s + frac * (e - s)).powi(2);
                alpha_bar *= 1.0 - beta;
                alpha_bar
            })
            .collect();
        Self { alphas_cumprod }
    }

    /// The schedule used by the 1.x latent diffusion checkpoints.
    pub fn stable_diffusion() -> Self {
        Self::scaled_linear(0.00085, 0.012, 1000)
    }

    pub fn train_timesteps(&self) -> usize {
        self.alphas_cumprod.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, ScheduleError> {
        self.alphas_cumprod
            .get(t)
            .copied()
            .ok_or(ScheduleError::UnknownTimestep(t))
    }

    /// Ascending timestep tags of an `steps`-step trajectory, starting at the
    /// clean tag 0: `[0, 1, 1 + r, ..., 1 + (steps - 1) r]` with
    /// `r = train / steps`.
    pub fn trajectory(&self, steps: usize) -> Result<Vec<usize>, ScheduleError> {
        let train = self.train_timesteps();
        if steps == 0 || steps >= train {
            return Err(ScheduleError::StepCount { steps, train });
        }
        let ratio = train / steps;
        Ok(std::iter::once(0)
            .chain((0..steps).map(|k| k * ratio + 1))
            .collect())
    }
}

/// Moves a latent between noise levels along the deterministic DDIM path
/// given its noise estimate.
pub fn ddim_transfer(z: &LatentTensor, eps: &LatentTensor, alpha_from: f64, alpha_to: f64, tag: usize) -> LatentTensor {
    let (sa, sb) = (alpha_from.sqrt(), (1.0 - alpha_from).sqrt());
    let (ta, tb) = (alpha_to.sqrt(), (1.0 - alpha_to).sqrt());
    let mut data = z.data.clone();
    ndarray::Zip::from(&mut data)
        .and(&eps.data)
        .for_each(|x, &e| {
            let x0 = (*x - sb * e) / sa;
            *x = ta * x0 + tb * e;
        });
    LatentTensor::new(data, tag)
}

/// One deterministic (eta = 0) DDIM denoising step from `t` to `t_prev`.
pub fn ddim_step(
    z_t: &LatentTensor,
    eps: &LatentTensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentTensor, ScheduleError> {
    if t <= t_prev {
        return Err(ScheduleError::Ordering { from: t, to: t_prev });
    }
    let a_t = schedule.alpha_bar(t)?;
    let a_prev = schedule.alpha_bar(t_prev)?;
    Ok(ddim_transfer(z_t, eps, a_t, a_prev, t_prev))
}

/// One inversion step from `t` up to the noisier `t_next`, using the noise
/// estimate taken at the current latent.
pub fn ddim_inverse_step(
    z_t: &LatentTensor,
    eps: &LatentTensor,
    t: usize,
    t_next: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentTensor, ScheduleError> {
    if t_next <= t {
        return Err(ScheduleError::Ordering { from: t, to: t_next });
    }
    let a_t = schedule.alpha_bar(t)?;
    let a_next = schedule.alpha_bar(t_next)?;
    Ok(ddim_transfer(z_t, eps, a_t, a_next, t_next))
}

/// `eps_uncond + scale * (eps_cond - eps_uncond)`
pub fn classifier_free_guidance(eps_cond: &LatentTensor, eps_uncond: &LatentTensor, scale: f64) -> LatentTensor {
    let mut data = eps_uncond.data.clone();
    ndarray::Zip::from(&mut data)
        .and(&eps_cond.data)
        .for_each(|u, &c| *u += scale * (c - *u));
    LatentTensor::new(data, eps_cond.timestep_tag)
}
