use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{noise_on, predict_noise, tweedie_on, tweedie_x0, NoiseSchedule};
use crate::denoiser::Denoiser;
use crate::error::{domain_err, shape_err, Error, Result};
use crate::gradcore::{Tape, Tensor};
use crate::physops::{eval_loss_phy, loss_phy, PhysTarget, PhysWeights};
use crate::sensorlib::ConditionPair;

/// How the guidance gradient reaches `x_t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientRoute {
    /// Through the Tweedie formula only, holding `eps_hat` fixed.
    #[default]
    TweedieOnly,
    /// Also through the denoiser's dependence on `x_t`.
    FullBackprop,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Guidance scale `s >= 0`.
    pub scale: f64,
    pub weights: PhysWeights,
    pub route: GradientRoute,
    /// Overwrite observed entries of each clean estimate with `c`. Only
    /// meaningful when `c` is on the native band grid (identity sensor).
    pub replace_observed: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: 1.0,
            weights: PhysWeights::default(),
            route: GradientRoute::TweedieOnly,
            replace_observed: false,
        }
    }
}

impl GuidanceConfig {
    pub fn unguided() -> Self {
        Self {
            scale: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0) || !self.scale.is_finite() {
            return Err(domain_err!("guidance scale must be finite and >= 0, got {}", self.scale));
        }
        let w = self.weights;
        if [w.index, w.prior, w.range].iter().any(|v| !(*v >= 0.0)) {
            return Err(domain_err!("guidance loss weights must be >= 0"));
        }
        Ok(())
    }
}

/// Gradient of the guidance loss of the Tweedie estimate with respect to
/// `x_t` (`[H, W, B]`). With [`GradientRoute::FullBackprop`] the noise
/// prediction is recomputed on the tape from `net`.
pub fn pgs_gradient(
    eps_hat: &Tensor,
    x_t: &Tensor,
    t: usize,
    target: &PhysTarget,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    net: Option<(&Denoiser, &ConditionPair)>,
) -> Result<Tensor> {
    let shape = x_t.shape().to_vec();
    let b = target.wavelengths.len();
    if shape.len() != 3 || shape[0] * shape[1] != target.pixels || shape[2] != b {
        return Err(shape_err!("x_t {shape:?} does not match the guidance target"));
    }
    let mut tape = Tape::new();
    let x = tape.param(x_t.clone());
    let eps = match guidance.route {
        GradientRoute::TweedieOnly => tape.constant(eps_hat.clone()),
        GradientRoute::FullBackprop => {
            let (denoiser, pair) = net.ok_or_else(|| {
                Error::State("full-backprop guidance needs the denoiser and its condition".into())
            })?;
            let bound = denoiser.params().bind(&mut tape, false);
            let c = tape.constant(pair.c.clone());
            let m = tape.constant(pair.m.clone());
            noise_on(&mut tape, denoiser, &bound, x, t, c, m, schedule)?
        }
    };
    let x0 = tweedie_on(&mut tape, x, eps, t, schedule)?;
    let flat = tape.reshape(x0, &[target.pixels, b])?;
    let l = loss_phy(&mut tape, flat, target, &guidance.weights)?;
    let g = tape.backward(l)?.wrt(x)?.clone();
    if !g.is_finite() {
        return Err(Error::Numeric(format!("guidance gradient is not finite at t = {t}")));
    }
    Ok(g)
}

/// Corrected noise estimate `eps_hat + s sqrt(1 - abar_t) g_t`. Adding the
/// gradient moves the implied clean estimate down the guidance loss, since
/// `x0_hat` depends on `eps` with coefficient `-sqrt(1 - abar_t)/sqrt(abar_t)`.
/// `s = 0` returns `eps_hat` untouched.
pub fn pgs_inject(
    eps_hat: &Tensor,
    x_t: &Tensor,
    t: usize,
    target: &PhysTarget,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    net: Option<(&Denoiser, &ConditionPair)>,
) -> Result<Tensor> {
    guidance.validate()?;
    if guidance.scale == 0.0 {
        return Ok(eps_hat.clone());
    }
    let g = pgs_gradient(eps_hat, x_t, t, target, schedule, guidance, net)?;
    let (_, s) = schedule.coefficients(t)?;
    let k = guidance.scale * s;
    eps_hat.zip_map(&g, |e, gi| e + k * gi)
}

/// Evenly spaced descending timesteps from `T - 1` to `0`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(domain_err!("need 1 <= steps <= {total}, got {steps}"));
    }
    if steps == 1 {
        return Ok(vec![total - 1]);
    }
    let last = (total - 1) as f64;
    Ok((0..steps)
        .rev()
        .map(|i| (i as f64 * last / (steps - 1) as f64).round() as usize)
        .collect())
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    /// Final clean estimate, clamped to `[-1, 1]`, `[H, W, B]`.
    pub x0: Tensor,
    /// Guidance loss of `x0` when a target was supplied.
    pub l_phy: Option<f64>,
}

/// Deterministic DDIM (eta = 0) from `x_T ~ N(0, I)` drawn with `seed`,
/// clipping each clean estimate to `[-1, 1]`.
pub fn ddim_sample(
    denoiser: &Denoiser,
    pair: &ConditionPair,
    schedule: &NoiseSchedule,
    steps: usize,
    guidance: &GuidanceConfig,
    target: Option<&PhysTarget>,
    seed: u64,
) -> Result<SampleOutput> {
    guidance.validate()?;
    if guidance.scale > 0.0 && target.is_none() {
        return Err(Error::State("guided sampling needs a physical target".into()));
    }
    let ts = ddim_timesteps(schedule.len(), steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = pair.c.shape().to_vec();
    let mut x = Tensor::from_fn(&shape, |_| StandardNormal.sample(&mut rng));
    let mut x0 = x.clone();
    for (i, &t) in ts.iter().enumerate() {
        let eps_hat = predict_noise(denoiser, &x, t, pair, schedule)?;
        let eps = match target {
            Some(tg) if guidance.scale > 0.0 => {
                pgs_inject(&eps_hat, &x, t, tg, schedule, guidance, Some((denoiser, pair)))?
            }
            _ => eps_hat,
        };
        // Clip the clean estimate to the data range and re-derive the noise
        // it implies, so the next state stays on the same DDIM trajectory.
        x0 = tweedie_x0(&x, &eps, t, schedule)?.map(|v| v.clamp(-1.0, 1.0));
        if guidance.replace_observed {
            x0 = x0.zip_map(&pair.m, |u, m| u * (1.0 - m))?.zip_map(&pair.c, |u, c| u + c)?;
        }
        if let Some(&prev) = ts.get(i + 1) {
            let (a_t, s_t) = schedule.coefficients(t)?;
            let eps = x.zip_map(&x0, |xt, u| (xt - a_t * u) / s_t)?;
            let (a, s) = schedule.coefficients(prev)?;
            x = x0.zip_map(&eps, |u, e| a * u + s * e)?;
        }
    }
    if !x0.is_finite() {
        return Err(Error::Numeric("sampler produced non-finite values".into()));
    }
    let l_phy = match target {
        Some(tg) => Some(eval_loss_phy(&x0, tg, &guidance.weights)?),
        None => None,
    };
    Ok(SampleOutput { x0, l_phy })
}
