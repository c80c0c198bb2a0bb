//! Linear-schedule diffusion: forward noising, Tweedie estimates, training,
//! deterministic DDIM sampling with physics guidance, and checkpoints.

mod checkpoint;
mod sample;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Result};
use crate::denoiser::{fill_missing, Denoiser, DenoiserConfig, Prediction};
use crate::gradcore::{Bound, Tape, Tensor, Var};
use crate::sensorlib::ConditionPair;

pub use checkpoint::{load_checkpoint, read_abd1, save_checkpoint, write_abd1, Checkpoint};
pub use sample::{
    ddim_sample, ddim_timesteps, pgs_gradient, pgs_inject, GradientRoute, GuidanceConfig,
    SampleOutput,
};
pub use train::{train, McdWeighting, StepLosses, TrainConfig, TrainContext, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Linear beta schedule and its cumulative products.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(domain_err!("a schedule needs at least 2 steps, got {timesteps}"));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(domain_err!(
                "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
            ));
        }
        let last = (timesteps - 1) as f64;
        let beta: Vec<f64> = (0..timesteps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / last)
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            config: ScheduleConfig {
                timesteps,
                beta_start,
                beta_end,
            },
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        Self::linear(c.timesteps, c.beta_start, c.beta_end)
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(domain_err!("timestep {t} outside [0, {})", self.len()));
        }
        Ok(())
    }

    /// `(sqrt(abar_t), sqrt(1 - abar_t))`.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_t(t)?;
        let ab = self.alpha_bar[t];
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
pub fn forward_diffuse(x0: &Tensor, t: usize, noise: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if x0.shape() != noise.shape() {
        return Err(shape_err!("x0 {:?} vs noise {:?}", x0.shape(), noise.shape()));
    }
    let (a, s) = schedule.coefficients(t)?;
    x0.zip_map(noise, |x, e| a * x + s * e)
}

/// `x0_hat = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
pub fn tweedie_x0(x_t: &Tensor, eps: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    if x_t.shape() != eps.shape() {
        return Err(shape_err!("x_t {:?} vs eps {:?}", x_t.shape(), eps.shape()));
    }
    let (a, s) = schedule.coefficients(t)?;
    x_t.zip_map(eps, |x, e| (x - s * e) / a)
}

/// [`tweedie_x0`] recorded on a tape.
pub fn tweedie_on(tape: &mut Tape, x_t: Var, eps: Var, t: usize, schedule: &NoiseSchedule) -> Result<Var> {
    let (a, s) = schedule.coefficients(t)?;
    let scaled = tape.scale(eps, -s)?;
    let diff = tape.add(x_t, scaled)?;
    tape.scale(diff, 1.0 / a)
}

/// Noise estimate as an affine map of the head output `F`:
/// `eps = gain_x x_t + gain_fill fill + gain_head F`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadMap {
    pub gain_x: f64,
    pub gain_fill: f64,
    pub gain_head: f64,
}

impl HeadMap {
    pub fn new(cfg: &DenoiserConfig, t: usize, schedule: &NoiseSchedule) -> Result<Self> {
        let (a, s) = schedule.coefficients(t)?;
        Ok(match cfg.prediction {
            Prediction::Epsilon => Self {
                gain_x: 0.0,
                gain_fill: 0.0,
                gain_head: 1.0,
            },
            Prediction::Velocity => Self {
                gain_x: s,
                gain_fill: 0.0,
                gain_head: a,
            },
            Prediction::Anchored => {
                // eps = (x_t - a x0_hat) / s with x0_hat from the
                // preconditioned form; see `Prediction::Anchored`.
                let sigma = s / a;
                let sd = cfg.sigma_data;
                let v = sigma * sigma + sd * sd;
                let k = sigma / v;
                Self {
                    gain_x: k / a,
                    gain_fill: -k,
                    gain_head: -sd / v.sqrt(),
                }
            }
        })
    }

    fn uses_fill(&self) -> bool {
        self.gain_fill != 0.0
    }
}

/// Noise estimate from the denoiser, recorded on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn noise_on(
    tape: &mut Tape,
    denoiser: &Denoiser,
    bound: &Bound,
    x_t: Var,
    t: usize,
    c: Var,
    m: Var,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let map = HeadMap::new(denoiser.config(), t, schedule)?;
    let out = denoiser.forward(tape, bound, x_t, t, c, m)?;
    let mut eps = tape.scale(out, map.gain_head)?;
    if map.gain_x != 0.0 {
        let x = tape.scale(x_t, map.gain_x)?;
        eps = tape.add(eps, x)?;
    }
    if map.uses_fill() {
        let fill = fill_missing(tape.value(c), tape.value(m))?;
        let fill = tape.constant(fill.map(|f| map.gain_fill * f));
        eps = tape.add(eps, fill)?;
    }
    Ok(eps)
}

/// `eps_hat` for `x_t` at step `t`, whatever the head regresses.
pub fn predict_noise(
    denoiser: &Denoiser,
    x_t: &Tensor,
    t: usize,
    pair: &ConditionPair,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let map = HeadMap::new(denoiser.config(), t, schedule)?;
    let out = denoiser.predict(x_t, t, pair)?;
    let eps = out.zip_map(x_t, |f, x| map.gain_head * f + map.gain_x * x)?;
    if map.uses_fill() {
        let fill = fill_missing(&pair.c, &pair.m)?;
        return eps.zip_map(&fill, |e, f| e + map.gain_fill * f);
    }
    Ok(eps)
}

#[cfg(test)]
mod tests;
