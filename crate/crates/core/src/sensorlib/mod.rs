//! Sensor simulation and dual stochastic masking.
//!
//! A [`SensorSrf`] describes each band of a real or synthetic instrument as a
//! sampled spectral response. Resampling onto the native grid uses a natural
//! cubic spline; negative overshoot is clamped and the weights renormalized.
//! [`dsm_mask`] draws one sensor from a library, simulates its observation,
//! then drops bands (or individual values) with probability `p_drop`.

mod library;
mod spline;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Error, Result};
use crate::gradcore::Tensor;
use crate::physops::band_select;
use crate::specdata::{strictly_increasing, Domain, HyperCube};

pub use library::builtin_library;
pub use spline::NaturalSpline;

/// Range that per-sample drop probabilities are drawn from during training.
pub const P_DROP_RANGE: (f64, f64) = (0.1, 0.7);

/// One sensor band: response sampled at `grid_nm`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrfBand {
    pub grid_nm: Vec<f64>,
    pub response: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSrf {
    pub name: String,
    pub bands: Vec<SrfBand>,
}

impl SrfBand {
    /// A Gaussian response sampled every `step` nm over `mean ± 4 sigma`.
    pub fn gaussian(mean: f64, sigma: f64, step: f64) -> Self {
        let half = (4.0 * sigma / step).ceil() as i64;
        let grid_nm: Vec<f64> = (-half..=half).map(|k| mean + k as f64 * step).collect();
        let response = grid_nm
            .iter()
            .map(|x| (-(x - mean).powi(2) / (2.0 * sigma * sigma)).exp())
            .collect();
        Self { grid_nm, response }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_nm.len() < 2 || self.grid_nm.len() != self.response.len() {
            return Err(domain_err!(
                "band needs >= 2 samples and matching lengths, got {} and {}",
                self.grid_nm.len(),
                self.response.len()
            ));
        }
        if !strictly_increasing(&self.grid_nm) {
            return Err(domain_err!("band grid must be strictly increasing"));
        }
        if self.response.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(domain_err!("band response must be finite and non-negative"));
        }
        if !self.response.iter().any(|r| *r > 0.0) {
            return Err(domain_err!("band response is identically zero"));
        }
        Ok(())
    }
}

impl SensorSrf {
    pub fn validate(&self) -> Result<()> {
        if self.bands.is_empty() {
            return Err(domain_err!("sensor {} has no bands", self.name));
        }
        for (i, b) in self.bands.iter().enumerate() {
            b.validate()
                .map_err(|e| domain_err!("sensor {} band {i}: {e}", self.name))?;
        }
        Ok(())
    }

    /// One narrow triangular band per wavelength; [`apply_srf`] with this
    /// sensor reproduces the cube exactly.
    pub fn identity(wavelengths: &[f64]) -> Self {
        let bands = wavelengths
            .iter()
            .map(|&c| SrfBand {
                grid_nm: vec![c - 0.5, c, c + 0.5],
                response: vec![0.0, 1.0, 0.0],
            })
            .collect();
        Self {
            name: "identity".into(),
            bands,
        }
    }
}

/// Spline-resampled weights of one band on a target grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Resampled {
    /// Non-negative, summing to one (all zero if the band misses the grid).
    pub weights: Vec<f64>,
    /// Sum of the raw spline values before clamping.
    pub raw_total: f64,
}

/// Resamples `band` onto `targets`. Targets outside the band's knot range get
/// weight zero.
pub fn resample_band(band: &SrfBand, targets: &[f64]) -> Result<Resampled> {
    band.validate()?;
    let spline = NaturalSpline::new(&band.grid_nm, &band.response)?;
    let raw: Vec<f64> = targets.iter().map(|t| spline.eval(*t).unwrap_or(0.0)).collect();
    let raw_total = raw.iter().sum();
    let mut weights: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        weights.iter_mut().for_each(|w| *w /= total);
    }
    Ok(Resampled { weights, raw_total })
}

/// A cube as seen by a sensor, placed back on the native band slots.
#[derive(Clone, Debug)]
pub struct SensorObservation {
    /// Physical-domain cube; unoccupied slots are zero.
    pub cube: HyperCube,
    /// Which native slots received a sensor band.
    pub occupied: Vec<bool>,
    pub warnings: Vec<String>,
}

impl SensorObservation {
    /// The sensor mask as an `[H, W, B]` binary tensor.
    pub fn mask(&self) -> Tensor {
        let (h, w) = (self.cube.height(), self.cube.width());
        let per_pixel: Vec<f64> = self.occupied.iter().map(|o| f64::from(u8::from(*o))).collect();
        let data = (0..h * w).flat_map(|_| per_pixel.iter().copied()).collect();
        Tensor::new(vec![h, w, per_pixel.len()], data).expect("mask shape")
    }
}

/// Simulates `sensor` observing a physical cube. Each sensor band lands in
/// the native slot nearest its response-weighted centre; when two bands
/// collide the one with the larger raw spline response wins.
pub fn apply_srf(cube: &HyperCube, sensor: &SensorSrf) -> Result<SensorObservation> {
    if cube.domain() != Domain::Physical {
        return Err(domain_err!("apply_srf expects a physical cube"));
    }
    sensor.validate()?;
    let wl = cube.wavelengths();
    let nb = wl.len();
    let mut warnings = Vec::new();
    let mut slots: Vec<Option<(usize, Resampled)>> = vec![None; nb];
    for (k, band) in sensor.bands.iter().enumerate() {
        let r = resample_band(band, wl)?;
        if r.weights.iter().all(|w| *w == 0.0) {
            let msg = format!("sensor {} band {k} does not overlap the native grid", sensor.name);
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let centre: f64 = r.weights.iter().zip(wl).map(|(w, l)| w * l).sum();
        let slot = band_select(wl, centre)?;
        match &slots[slot] {
            Some((other, prev)) => {
                let msg = format!(
                    "sensor {} bands {other} and {k} both map to native band {slot}",
                    sensor.name
                );
                log::warn!("{msg}");
                warnings.push(msg);
                if r.raw_total > prev.raw_total {
                    slots[slot] = Some((k, r));
                }
            }
            None => slots[slot] = Some((k, r)),
        }
    }
    let mut data = vec![0.0; cube.data().len()];
    for p in 0..cube.pixels() {
        let px = cube.pixel(p);
        for (slot, entry) in slots.iter().enumerate() {
            if let Some((_, r)) = entry {
                data[p * nb + slot] = r.weights.iter().zip(px).map(|(w, v)| w * v).sum();
            }
        }
    }
    let out = HyperCube::new(
        cube.height(),
        cube.width(),
        wl.to_vec(),
        data,
        Domain::Physical,
    )?;
    Ok(SensorObservation {
        cube: out,
        occupied: slots.iter().map(Option::is_some).collect(),
        warnings,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// One Bernoulli draw per band, shared by every pixel.
    #[default]
    PerBand,
    /// An independent draw per pixel and band.
    PerElement,
}

/// Conditioning input for the denoiser: masked observation `c` (normalized
/// domain, zero where unobserved) and binary mask `m`, both `[H, W, B]`.
#[derive(Clone, Debug)]
pub struct ConditionPair {
    pub c: Tensor,
    pub m: Tensor,
    pub wavelengths: Vec<f64>,
    pub sensor: String,
    pub p_drop: f64,
    pub warnings: Vec<String>,
}

impl ConditionPair {
    pub fn height(&self) -> usize {
        self.c.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.c.shape()[1]
    }

    pub fn bands(&self) -> usize {
        self.c.shape()[2]
    }

    /// Fraction of entries with `m = 1`.
    pub fn observed_fraction(&self) -> f64 {
        self.m.sum() / self.m.numel() as f64
    }

    /// Builds a pair directly from a normalized cube and a mask.
    pub fn from_mask(cube: &HyperCube, m: Tensor) -> Result<Self> {
        if cube.domain() != Domain::Normalized {
            return Err(domain_err!("condition pairs are built from normalized cubes"));
        }
        let x = cube.to_tensor();
        if m.shape() != x.shape() {
            return Err(shape_err!("mask {:?} vs cube {:?}", m.shape(), x.shape()));
        }
        if m.data().iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(domain_err!("mask entries must be 0 or 1"));
        }
        let c = x.zip_map(&m, |a, b| a * b)?;
        Ok(Self {
            c,
            m,
            wavelengths: cube.wavelengths().to_vec(),
            sensor: "custom".into(),
            p_drop: 0.0,
            warnings: Vec::new(),
        })
    }
}

/// Draws a training drop probability uniformly from [`P_DROP_RANGE`].
pub fn sample_p_drop<R: Rng>(rng: &mut R) -> f64 {
    rng.random_range(P_DROP_RANGE.0..=P_DROP_RANGE.1)
}

/// Dual stochastic masking of a normalized cube. Deterministic in `seed`.
pub fn dsm_mask(
    cube: &HyperCube,
    library: &[SensorSrf],
    p_drop: f64,
    mode: MaskMode,
    seed: u64,
) -> Result<ConditionPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = if library.is_empty() {
        return Err(domain_err!("sensor library is empty"));
    } else {
        rng.random_range(0..library.len())
    };
    mask_with_sensor(cube, &library[k], p_drop, mode, &mut rng)
}

/// Dual stochastic masking with a fixed sensor.
pub fn mask_with_sensor<R: Rng>(
    cube: &HyperCube,
    sensor: &SensorSrf,
    p_drop: f64,
    mode: MaskMode,
    rng: &mut R,
) -> Result<ConditionPair> {
    if cube.domain() != Domain::Normalized {
        return Err(domain_err!("dsm_mask expects a normalized cube"));
    }
    if !(0.0..1.0).contains(&p_drop) {
        return Err(domain_err!("p_drop must lie in [0, 1), got {p_drop}"));
    }
    let physical = crate::specdata::denormalize(cube)?;
    let obs = apply_srf(&physical, sensor)?;
    let nb = cube.bands();
    let n = cube.pixels();
    let mut m = obs.mask().into_data();
    match mode {
        MaskMode::PerBand => {
            let keep: Vec<bool> = (0..nb).map(|_| !rng.random_bool(p_drop)).collect();
            for (i, v) in m.iter_mut().enumerate() {
                if !keep[i % nb] {
                    *v = 0.0;
                }
            }
        }
        MaskMode::PerElement => {
            for v in m.iter_mut() {
                if rng.random_bool(p_drop) {
                    *v = 0.0;
                }
            }
        }
    }
    let c: Vec<f64> = obs
        .cube
        .data()
        .iter()
        .zip(&m)
        .map(|(x, keep)| if *keep == 1.0 { 2.0 * x - 1.0 } else { 0.0 })
        .collect();
    let shape = vec![cube.height(), cube.width(), nb];
    debug_assert_eq!(c.len(), n * nb);
    Ok(ConditionPair {
        c: Tensor::new(shape.clone(), c)?,
        m: Tensor::new(shape, m)?,
        wavelengths: cube.wavelengths().to_vec(),
        sensor: sensor.name.clone(),
        p_drop,
        warnings: obs.warnings,
    })
}

pub fn library_from_json(text: &str) -> Result<Vec<SensorSrf>> {
    let lib: Vec<SensorSrf> = serde_json::from_str(text)?;
    for s in &lib {
        s.validate()?;
    }
    Ok(lib)
}

pub fn library_to_json(library: &[SensorSrf]) -> Result<String> {
    Ok(serde_json::to_string_pretty(library)?)
}

pub fn load_library(path: &Path) -> Result<Vec<SensorSrf>> {
    library_from_json(&std::fs::read_to_string(path)?)
}

pub fn save_library(library: &[SensorSrf], path: &Path) -> Result<()> {
    std::fs::write(path, library_to_json(library)?).map_err(Error::from)
}

#[cfg(test)]
mod tests;
