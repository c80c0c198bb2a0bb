use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{forward_diffuse, noise_on, tweedie_on, HeadMap, NoiseSchedule};
use crate::denoiser::Denoiser;
use crate::emulator::Emulator;
use crate::error::{domain_err, Error, Result};
use crate::gradcore::{cosine_lr, AdamW, AdamWConfig, ParamSet, Tape, Tensor, Var};
use crate::physops::{loss_image, loss_pixel, loss_region, SpectralIndex, SpectralPrior};
use crate::sensorlib::{dsm_mask, sample_p_drop, MaskMode, SensorSrf};
use crate::specdata::{Domain, HyperCube};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_px: f64,
    pub lambda_reg: f64,
    pub lambda_img: f64,
    pub optimizer: AdamWConfig,
    pub lr: f64,
    /// Fraction of steps spent in linear warmup.
    pub warmup_frac: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub mask_mode: MaskMode,
    pub mcd_weighting: McdWeighting,
}

/// Per-timestep weight on the noise-prediction error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McdWeighting {
    /// Plain `|eps - eps_hat|^2`.
    Uniform,
    /// `|eps - eps_hat|^2 / gain_head^2`: the error in the head's own output
    /// units. For non-epsilon heads the plain form scales the head error by
    /// a factor that vanishes at high noise, leaving those steps untrained.
    #[default]
    Head,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_px: 1.0,
            lambda_reg: 0.5,
            lambda_img: 0.2,
            optimizer: AdamWConfig {
                weight_decay: 1e-4,
                ..AdamWConfig::default()
            },
            lr: 1e-4,
            warmup_frac: 0.1,
            grad_clip: Some(1.0),
            batch_size: 8,
            steps: 2000,
            seed: 0,
            mask_mode: MaskMode::PerBand,
            mcd_weighting: McdWeighting::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_px, self.lambda_reg, self.lambda_img].iter().any(|l| !(*l >= 0.0)) {
            return Err(domain_err!("loss weights must be >= 0"));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(domain_err!("lr must be positive and warmup_frac in [0, 1]"));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(domain_err!("batch size and steps must be positive"));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(domain_err!("grad_clip must be positive"));
        }
        Ok(())
    }

    fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.steps as f64).round() as usize
    }
}

/// Batch means of each loss term. The physical columns are the weighted
/// contributions `lambda * abar_t * L`, so `total` is their sum with `l_mcd`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub l_mcd: f64,
    pub l_pixel: f64,
    pub l_region: f64,
    pub l_image: f64,
    pub lr: f64,
    pub l_total: f64,
}

/// Frozen inputs to training.
#[derive(Clone, Copy)]
pub struct TrainContext<'a> {
    pub schedule: &'a NoiseSchedule,
    pub emulator: &'a Emulator,
    pub prior: &'a SpectralPrior,
    pub library: &'a [SensorSrf],
}

pub struct Trainer {
    denoiser: Denoiser,
    config: TrainConfig,
    opt: AdamW,
    rng: ChaCha8Rng,
    step: usize,
}

struct SampleTerms {
    mcd: f64,
    pixel: f64,
    region: f64,
    image: f64,
    grads: ParamSet,
}

impl Trainer {
    pub fn new(denoiser: Denoiser, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            opt: AdamW::new(config.optimizer),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            denoiser,
            config,
            step: 0,
        })
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn into_denoiser(self) -> Denoiser {
        self.denoiser
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn sample_terms(&self, x0: &HyperCube, ctx: &TrainContext, rng: &mut ChaCha8Rng) -> Result<SampleTerms> {
        let cfg = &self.config;
        let t = rng.random_range(0..ctx.schedule.len());
        let shape = [x0.height(), x0.width(), x0.bands()];
        let noise = Tensor::from_fn(&shape, |_| StandardNormal.sample(rng));
        let p_drop = sample_p_drop(rng);
        let pair = dsm_mask(x0, ctx.library, p_drop, cfg.mask_mode, rng.random())?;
        let x_t = forward_diffuse(&x0.to_tensor(), t, &noise, ctx.schedule)?;

        let mut tape = Tape::new();
        let bound = self.denoiser.params().bind(&mut tape, true);
        let xv = tape.constant(x_t);
        let c = tape.constant(pair.c);
        let m = tape.constant(pair.m);
        let eps_hat = noise_on(&mut tape, &self.denoiser, &bound, xv, t, c, m, ctx.schedule)?;
        let target = tape.constant(noise);
        let d = tape.sub(eps_hat, target)?;
        let sq = tape.square(d)?;
        let abar = ctx.schedule.alpha_bar()[t];
        let mcd = tape.mean(sq)?;
        let mcd = match cfg.mcd_weighting {
            McdWeighting::Uniform => mcd,
            McdWeighting::Head => {
                let g = HeadMap::new(self.denoiser.config(), t, ctx.schedule)?.gain_head;
                tape.scale(mcd, 1.0 / (g * g))?
            }
        };
        let weights = [cfg.lambda_px, cfg.lambda_reg, cfg.lambda_img].map(|l| l * abar);
        let mut terms: [Option<Var>; 3] = [None; 3];
        if weights.iter().any(|w| *w > 0.0) {
            let n = x0.pixels();
            let b = x0.bands();
            let est = tweedie_on(&mut tape, xv, eps_hat, t, ctx.schedule)?;
            // Clip to the valid range so indices and the emulator see
            // reflectances even when the estimate is still noisy.
            let est = tape.clamp(est, -1.0, 1.0)?;
            let est = tape.reshape(est, &[n, b])?;
            let half = tape.scale(est, 0.5)?;
            let phys = tape.add_scalar(half, 0.5)?;
            let real = crate::specdata::denormalize(x0)?.to_matrix();
            if weights[0] > 0.0 {
                let l = loss_pixel(&mut tape, est, ctx.prior)?;
                terms[0] = Some(tape.scale(l, weights[0])?);
            }
            if weights[1] > 0.0 {
                let l = loss_region(&mut tape, &[real.clone()], &[phys], &SpectralIndex::ALL, x0.wavelengths(), None)?;
                terms[1] = Some(tape.scale(l, weights[1])?);
            }
            if weights[2] > 0.0 {
                let l = loss_image(&mut tape, phys, &real, ctx.emulator)?;
                terms[2] = Some(tape.scale(l, weights[2])?);
            }
        }
        let mut total = mcd;
        for v in terms.iter().flatten() {
            total = tape.add(total, *v)?;
        }
        let grads = bound.grads(&tape.backward(total)?)?;
        let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0]);
        Ok(SampleTerms {
            mcd: tape.value(mcd).data()[0],
            pixel: value(terms[0]),
            region: value(terms[1]),
            image: value(terms[2]),
            grads,
        })
    }

    /// One optimizer step on a batch of normalized cubes.
    pub fn train_step(&mut self, batch: &[HyperCube], ctx: &TrainContext) -> Result<StepLosses> {
        if batch.is_empty() {
            return Err(domain_err!("empty batch"));
        }
        if let Some(c) = batch.iter().find(|c| c.domain() != Domain::Normalized) {
            return Err(domain_err!("training cubes must be normalized, got {:?}", c.domain()));
        }
        if !ctx.emulator.is_trained() {
            return Err(Error::State("the emulator must be trained before the denoiser".into()));
        }
        let step = self.step;
        let mut rng = self.rng.clone();
        let mut sums = [0.0; 4];
        let mut grads: Option<ParamSet> = None;
        for x0 in batch {
            let s = self.sample_terms(x0, ctx, &mut rng).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("step {step}: {msg}")),
                other => other,
            })?;
            for (acc, v) in sums.iter_mut().zip([s.mcd, s.pixel, s.region, s.image]) {
                *acc += v;
            }
            grads = Some(match grads {
                None => s.grads,
                Some(mut g) => {
                    for (k, v) in g.iter_mut() {
                        *v = v.zip_map(s.grads.get(k)?, |a, b| a + b)?;
                    }
                    g
                }
            });
        }
        self.rng = rng;
        let n = batch.len() as f64;
        let mut grads = grads.expect("non-empty batch");
        let mut norm_sq = 0.0;
        for (_, v) in grads.iter_mut() {
            *v = v.map(|x| x / n);
            norm_sq += v.data().iter().map(|x| x * x).sum::<f64>();
        }
        if let Some(limit) = self.config.grad_clip {
            let norm = norm_sq.sqrt();
            if norm > limit {
                let k = limit / norm;
                for (_, v) in grads.iter_mut() {
                    *v = v.map(|x| x * k);
                }
            }
        }
        let [mcd, pixel, region, image] = sums.map(|s| s / n);
        let total = mcd + pixel + region + image;
        if !total.is_finite() {
            return Err(Error::Numeric(format!("step {step}: loss is not finite")));
        }
        let lr = cosine_lr(self.config.lr, step, self.config.steps, self.config.warmup_steps());
        self.opt
            .step(self.denoiser.params_mut(), &grads, lr)
            .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
        self.step += 1;
        Ok(StepLosses {
            step,
            l_mcd: mcd,
            l_pixel: pixel,
            l_region: region,
            l_image: image,
            lr,
            l_total: total,
        })
    }
}

/// Runs `config.steps` steps on batches drawn uniformly (with replacement)
/// from `data`. `on_step` sees every step's losses as they are produced.
pub fn train(
    denoiser: Denoiser,
    data: &[HyperCube],
    config: &TrainConfig,
    ctx: &TrainContext,
    mut on_step: impl FnMut(&StepLosses),
) -> Result<(Denoiser, Vec<StepLosses>)> {
    if data.is_empty() {
        return Err(domain_err!("no training data"));
    }
    let mut trainer = Trainer::new(denoiser, config.clone())?;
    let mut picker = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut history = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let batch: Vec<HyperCube> = (0..config.batch_size)
            .map(|_| data[picker.random_range(0..data.len())].clone())
            .collect();
        let losses = trainer.train_step(&batch, ctx)?;
        on_step(&losses);
        history.push(losses);
    }
    Ok((trainer.into_denoiser(), history))
}
