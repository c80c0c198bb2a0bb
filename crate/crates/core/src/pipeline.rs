//! End-to-end drivers shared by the command line and the acceptance suite:
//! scene synthesis, model fitting, band repair and the guidance sweep.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{
    ddim_sample, train, Checkpoint, GuidanceConfig, NoiseSchedule, ScheduleConfig, StepLosses, TrainConfig,
    TrainContext,
};
use crate::emulator::{make_pairs, train_emulator, Emulator, EmulatorTraining};
use crate::error::{domain_err, Error, Result};
use crate::metrics::MetricsReport;
use crate::physops::{build_phys_target, SpectralIndex, SpectralPrior};
use crate::sensorlib::{builtin_library, mask_with_sensor, ConditionPair, MaskMode, SensorSrf};
use crate::specdata::{default_wavelengths, denormalize, generate_scene, normalize, Domain, HyperCube, ParamFields};

/// Scene seeds of the three splits never collide.
const HOLDOUT_SEED_OFFSET: u64 = 1_000_000;
const PRIOR_SEED_OFFSET: u64 = 2_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub holdout_scenes: usize,
    /// Scenes used only to estimate the spectral prior.
    pub prior_scenes: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 64,
            holdout_scenes: 10,
            prior_scenes: 32,
            height: 16,
            width: 16,
            bands: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmulatorConfig {
    pub pairs: usize,
    pub training: EmulatorTraining,
}

impl Default for EmulatorConfig {
    fn default() -> Self {
        Self {
            pairs: 4000,
            training: EmulatorTraining::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub steps: usize,
    pub guidance: GuidanceConfig,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        // Repairs observe the native band grid, so the observed entries can
        // be written back into every clean estimate.
        Self {
            steps: 50,
            guidance: GuidanceConfig {
                replace_observed: true,
                ..GuidanceConfig::default()
            },
        }
    }
}

/// Everything one experiment needs. Every field has a default and unknown
/// keys are rejected, so a typo in a weight cannot pass silently.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<String>,
    pub data: DataConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub emulator: EmulatorConfig,
    pub sampling: SamplingConfig,
    pub mask_mode: MaskMode,
    pub mask_ratios: Vec<f64>,
    pub ablation_values: Vec<f64>,
    pub ablation_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: None,
            data: DataConfig::default(),
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            // The toy network is far smaller than the one the library
            // default targets and tolerates a larger step.
            train: TrainConfig {
                lr: 1e-3,
                ..TrainConfig::default()
            },
            emulator: EmulatorConfig::default(),
            sampling: SamplingConfig::default(),
            mask_mode: MaskMode::PerBand,
            mask_ratios: vec![0.1, 0.3, 0.5],
            ablation_values: vec![0.0, 0.5, 1.0, 1.5, 2.0],
            ablation_seeds: 20,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.denoiser.check_spatial(self.data.height, self.data.width)?;
        if self.denoiser.in_bands != self.data.bands {
            return Err(domain_err!(
                "denoiser expects {} bands, data has {}",
                self.denoiser.in_bands,
                self.data.bands
            ));
        }
        if self.denoiser.timesteps != self.schedule.timesteps {
            return Err(domain_err!("denoiser and schedule disagree on the number of timesteps"));
        }
        NoiseSchedule::from_config(&self.schedule)?;
        self.train.validate()?;
        self.sampling.guidance.validate()?;
        if self.sampling.steps == 0 || self.sampling.steps > self.schedule.timesteps {
            return Err(domain_err!("sampling steps must be in [1, {}]", self.schedule.timesteps));
        }
        if self.data.train_scenes == 0 || self.data.prior_scenes == 0 {
            return Err(domain_err!("need at least one training and one prior scene"));
        }
        if let Some(r) = self.mask_ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(domain_err!("mask ratio {r} outside [0, 1)"));
        }
        if self.ablation_values.iter().any(|s| !(*s >= 0.0)) {
            return Err(domain_err!("guidance scales must be >= 0"));
        }
        Ok(())
    }

    pub fn wavelengths(&self) -> Vec<f64> {
        default_wavelengths(self.data.bands)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Holdout,
    Prior,
}

/// Physical scenes of one split, deterministic in `(cfg.seed, split, i)`.
pub fn scenes(cfg: &RunConfig, split: Split) -> Result<Vec<(HyperCube, ParamFields)>> {
    let (n, offset) = match split {
        Split::Train => (cfg.data.train_scenes, 0),
        Split::Holdout => (cfg.data.holdout_scenes, HOLDOUT_SEED_OFFSET),
        Split::Prior => (cfg.data.prior_scenes, PRIOR_SEED_OFFSET),
    };
    (0..n as u64)
        .map(|i| generate_scene(cfg.data.height, cfg.data.width, cfg.data.bands, cfg.seed + offset + i))
        .collect()
}

/// Per-pixel linear interpolation in wavelength across the observed bands;
/// bands beyond the outermost observation copy the nearest one, and pixels
/// with nothing observed get mid-range reflectance. Returns physical values.
pub fn interpolate_bands(pair: &ConditionPair) -> Result<HyperCube> {
    let (h, w, b) = (pair.height(), pair.width(), pair.bands());
    let wl = &pair.wavelengths;
    let (c, m) = (pair.c.data(), pair.m.data());
    let mut out = Vec::with_capacity(h * w * b);
    for p in 0..h * w {
        let obs: Vec<usize> = (0..b).filter(|&k| m[p * b + k] == 1.0).collect();
        let phys = |k: usize| (c[p * b + k] + 1.0) * 0.5;
        for k in 0..b {
            let v = if m[p * b + k] == 1.0 {
                phys(k)
            } else if obs.is_empty() {
                0.5
            } else {
                let hi = obs.iter().position(|&o| o > k);
                match hi {
                    Some(0) => phys(obs[0]),
                    None => phys(*obs.last().unwrap()),
                    Some(j) => {
                        let (a, z) = (obs[j - 1], obs[j]);
                        let f = (wl[k] - wl[a]) / (wl[z] - wl[a]);
                        phys(a) + f * (phys(z) - phys(a))
                    }
                }
            };
            out.push(v.clamp(0.0, 1.0));
        }
    }
    HyperCube::new(h, w, wl.clone(), out, Domain::Physical)
}

/// Trains the emulator on synthetic vegetation spectra.
pub fn fit_emulator(cfg: &RunConfig) -> Result<Emulator> {
    let pairs = make_pairs(cfg.emulator.pairs, cfg.seed, &cfg.wavelengths())?;
    train_emulator(&pairs, &cfg.emulator.training)
}

/// Emulator (trained here unless supplied), prior and denoiser, bundled as a
/// checkpoint together with the per-step losses.
pub fn fit(
    cfg: &RunConfig,
    emulator: Option<Emulator>,
    library: &[SensorSrf],
    on_step: impl FnMut(&StepLosses),
) -> Result<(Checkpoint, Vec<StepLosses>)> {
    cfg.validate()?;
    let emulator = match emulator {
        Some(e) if e.bands() == cfg.data.bands => e,
        Some(e) => return Err(domain_err!("emulator has {} bands, data has {}", e.bands(), cfg.data.bands)),
        None => fit_emulator(cfg)?,
    };
    let prior_cubes: Vec<HyperCube> = scenes(cfg, Split::Prior)?.into_iter().map(|(c, _)| c).collect();
    let prior = SpectralPrior::estimate(&prior_cubes)?;
    let data = scenes(cfg, Split::Train)?
        .iter()
        .map(|(c, _)| normalize(c))
        .collect::<Result<Vec<_>>>()?;
    let schedule = NoiseSchedule::from_config(&cfg.schedule)?;
    let ctx = TrainContext {
        schedule: &schedule,
        emulator: &emulator,
        prior: &prior,
        library,
    };
    let train_cfg = TrainConfig {
        mask_mode: cfg.mask_mode,
        ..cfg.train.clone()
    };
    let init = Denoiser::new(cfg.denoiser.clone(), cfg.seed)?;
    let (denoiser, history) = train(init, &data, &train_cfg, &ctx, on_step)?;
    let ckpt = Checkpoint {
        denoiser,
        emulator,
        schedule,
        prior,
        wavelengths: cfg.wavelengths(),
    };
    Ok((ckpt, history))
}

/// [`fit`] with the builtin sensor library.
pub fn fit_default(cfg: &RunConfig, on_step: impl FnMut(&StepLosses)) -> Result<(Checkpoint, Vec<StepLosses>)> {
    fit(cfg, None, &builtin_library(), on_step)
}

/// Native-sensor observation of `truth` with whole-band (or per-element)
/// dropout at `mask_ratio`.
pub fn observe(truth: &HyperCube, mask_ratio: f64, mode: MaskMode, seed: u64) -> Result<ConditionPair> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(domain_err!("mask ratio must be in [0, 1), got {mask_ratio}"));
    }
    let norm = normalize(truth)?;
    let sensor = SensorSrf::identity(truth.wavelengths());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mask_with_sensor(&norm, &sensor, mask_ratio, mode, &mut rng)
}

#[derive(Clone, Debug)]
pub struct Repair {
    pub pair: ConditionPair,
    /// Repaired reflectance.
    pub cube: HyperCube,
    pub l_phy: f64,
    pub metrics: MetricsReport,
}

/// Samples a repair of an already-masked observation.
pub fn repair_pair(
    ckpt: &Checkpoint,
    pair: &ConditionPair,
    steps: usize,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<(HyperCube, f64)> {
    // Cube files store wavelengths in single precision.
    let same_grid = pair.wavelengths.len() == ckpt.wavelengths.len()
        && pair.wavelengths.iter().zip(&ckpt.wavelengths).all(|(a, b)| (a - b).abs() < 1e-3);
    if !same_grid {
        return Err(domain_err!("observation grid does not match the checkpoint"));
    }
    let target = build_phys_target(pair, &ckpt.prior, &SpectralIndex::ALL)?;
    let out = ddim_sample(&ckpt.denoiser, pair, &ckpt.schedule, steps, guidance, Some(&target), seed)?;
    let norm = HyperCube::from_tensor_clamped(
        pair.height(),
        pair.width(),
        pair.wavelengths.clone(),
        &out.x0,
        Domain::Normalized,
    )?;
    let l_phy = out.l_phy.ok_or_else(|| Error::Numeric("sampler returned no guidance loss".into()))?;
    Ok((denormalize(&norm)?, l_phy))
}

/// Masks `truth`, repairs it and scores the result against `truth`.
pub fn repair(
    ckpt: &Checkpoint,
    truth: &HyperCube,
    mask_ratio: f64,
    mode: MaskMode,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<Repair> {
    let pair = observe(truth, mask_ratio, mode, seed)?;
    let (cube, l_phy) = repair_pair(ckpt, &pair, sampling.steps, &sampling.guidance, seed)?;
    let metrics = MetricsReport::evaluate(&cube, truth)?;
    Ok(Repair {
        pair,
        cube,
        l_phy,
        metrics,
    })
}

/// One repair in a guidance-scale sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub s: f64,
    pub seed: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub sam: f64,
    pub l_phy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub s: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub sam_mean: f64,
    pub sam_std: f64,
    pub l_phy_mean: f64,
    pub l_phy_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn summarize(rows: &[AblationRow], values: &[f64]) -> Vec<AblationSummary> {
    values
        .iter()
        .map(|&s| {
            let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.s == s).collect();
            let col = |f: fn(&AblationRow) -> f64| mean_std(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (psnr_mean, psnr_std) = col(|r| r.psnr);
            let (ssim_mean, ssim_std) = col(|r| r.ssim);
            let (sam_mean, sam_std) = col(|r| r.sam);
            let (l_phy_mean, l_phy_std) = col(|r| r.l_phy);
            AblationSummary {
                s,
                psnr_mean,
                psnr_std,
                ssim_mean,
                ssim_std,
                sam_mean,
                sam_std,
                l_phy_mean,
                l_phy_std,
            }
        })
        .collect()
}

/// Repairs seed `k`'s scene (cycling through `truths`) at every scale in
/// `values`. The mask and the starting noise depend only on the seed, so rows
/// with the same seed are paired.
pub fn ablate_s(
    ckpt: &Checkpoint,
    truths: &[HyperCube],
    values: &[f64],
    seeds: usize,
    mask_ratio: f64,
    mode: MaskMode,
    base: &SamplingConfig,
) -> Result<Vec<AblationRow>> {
    if truths.is_empty() || values.is_empty() || seeds == 0 {
        return Err(domain_err!("ablation needs scenes, scales and seeds"));
    }
    let mut rows = Vec::with_capacity(values.len() * seeds);
    for &s in values {
        for k in 0..seeds {
            let seed = k as u64;
            let sampling = SamplingConfig {
                guidance: GuidanceConfig { scale: s, ..base.guidance },
                ..base.clone()
            };
            let r = repair(ckpt, &truths[k % truths.len()], mask_ratio, mode, &sampling, seed)?;
            rows.push(AblationRow {
                s,
                seed,
                psnr: r.metrics.psnr_db,
                ssim: r.metrics.ssim,
                sam: r.metrics.sam_radians,
                l_phy: r.l_phy,
            });
        }
    }
    Ok(rows)
}
