//! Differentiable spectral indices and physical losses.
//!
//! Everything here works on `[N, B]` pixel matrices recorded on a [`Tape`].
//! Indices and the region/image losses take physical reflectance; the
//! correlation loss is invariant to the affine normalization and accepts
//! either domain.

use serde::{Deserialize, Serialize};

use crate::emulator::Emulator;
use crate::error::{domain_err, shape_err, Result};
use crate::gradcore::{Tape, Tensor, Var};
use crate::sensorlib::ConditionPair;
use crate::specdata::{Domain, HyperCube};

mod kde;

pub use kde::{kde, kde_grid, kl_divergence, silverman_bandwidth, KDE_FLOOR, KDE_GRID_POINTS};

/// Added to numerator and denominator of normalized-difference indices.
pub const INDEX_EPS: f64 = 1e-6;
/// Added to each band variance before normalizing a covariance.
pub const CORR_VAR_GUARD: f64 = 1e-8;

pub const RED_NM: f64 = 665.0;
pub const NIR_NM: f64 = 842.0;
pub const GREEN_NM: f64 = 560.0;

/// Index of the wavelength closest to `target_nm`; ties go to the lower band.
pub fn band_select(wavelengths: &[f64], target_nm: f64) -> Result<usize> {
    if wavelengths.is_empty() {
        return Err(domain_err!("no wavelengths to select from"));
    }
    let mut best = 0;
    for (i, w) in wavelengths.iter().enumerate() {
        if (w - target_nm).abs() < (wavelengths[best] - target_nm).abs() {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectralIndex {
    /// `(NIR - Red) / (NIR + Red)`.
    Ndvi,
    /// `(Green - NIR) / (Green + NIR)`.
    Ndwi,
}

impl SpectralIndex {
    pub const ALL: [SpectralIndex; 2] = [SpectralIndex::Ndvi, SpectralIndex::Ndwi];

    pub fn name(self) -> &'static str {
        match self {
            SpectralIndex::Ndvi => "ndvi",
            SpectralIndex::Ndwi => "ndwi",
        }
    }

    /// Nominal centres of the `(positive, negative)` bands.
    pub fn centres(self) -> (f64, f64) {
        match self {
            SpectralIndex::Ndvi => (NIR_NM, RED_NM),
            SpectralIndex::Ndwi => (GREEN_NM, NIR_NM),
        }
    }

    /// Native band indices of the `(positive, negative)` bands.
    pub fn bands(self, wavelengths: &[f64]) -> Result<(usize, usize)> {
        let (p, n) = self.centres();
        let (bp, bn) = (band_select(wavelengths, p)?, band_select(wavelengths, n)?);
        if bp == bn {
            return Err(domain_err!(
                "{} needs two distinct bands but both map to {bp}",
                self.name()
            ));
        }
        Ok((bp, bn))
    }

    /// Index value from the two band reflectances.
    pub fn from_pair(pos: f64, neg: f64) -> f64 {
        (pos - neg + INDEX_EPS) / (pos + neg + INDEX_EPS)
    }

    pub fn of_spectrum(self, spectrum: &[f64], wavelengths: &[f64]) -> Result<f64> {
        if spectrum.len() != wavelengths.len() {
            return Err(shape_err!(
                "{} values for {} wavelengths",
                spectrum.len(),
                wavelengths.len()
            ));
        }
        let (p, n) = self.bands(wavelengths)?;
        Ok(Self::from_pair(spectrum[p], spectrum[n]))
    }
}

pub fn ndvi_of_spectrum(spectrum: &[f64], wavelengths: &[f64]) -> f64 {
    SpectralIndex::Ndvi
        .of_spectrum(spectrum, wavelengths)
        .expect("spectrum matches its wavelength grid")
}

pub fn ndwi_of_spectrum(spectrum: &[f64], wavelengths: &[f64]) -> f64 {
    SpectralIndex::Ndwi
        .of_spectrum(spectrum, wavelengths)
        .expect("spectrum matches its wavelength grid")
}

fn check_matrix(tape: &Tape, x: Var, what: &str) -> Result<(usize, usize)> {
    match tape.shape(x) {
        [n, b] => Ok((*n, *b)),
        s => Err(shape_err!("{what} expects an [N, B] matrix, got {s:?}")),
    }
}

/// Per-pixel index of a physical `[N, B]` matrix, as an `[N]` vector.
pub fn spectral_index(
    tape: &mut Tape,
    x: Var,
    index: SpectralIndex,
    wavelengths: &[f64],
) -> Result<Var> {
    let (_, b) = check_matrix(tape, x, "spectral_index")?;
    if b != wavelengths.len() {
        return Err(shape_err!("{b} bands but {} wavelengths", wavelengths.len()));
    }
    let (bp, bn) = index.bands(wavelengths)?;
    let pos = tape.slice(x, 1, bp, 1)?;
    let neg = tape.slice(x, 1, bn, 1)?;
    let diff = tape.sub(pos, neg)?;
    let num = tape.add_scalar(diff, INDEX_EPS)?;
    let total = tape.add(pos, neg)?;
    let den = tape.add_scalar(total, INDEX_EPS)?;
    let ratio = tape.div(num, den)?;
    let n = tape.shape(x)[0];
    tape.reshape(ratio, &[n])
}

/// Index map of a physical cube, one value per pixel.
pub fn index_map(cube: &HyperCube, index: SpectralIndex) -> Result<Vec<f64>> {
    if cube.domain() != Domain::Physical {
        return Err(domain_err!("index maps need a physical cube"));
    }
    let (p, n) = index.bands(cube.wavelengths())?;
    Ok((0..cube.pixels())
        .map(|i| {
            let px = cube.pixel(i);
            SpectralIndex::from_pair(px[p], px[n])
        })
        .collect())
}

/// Guarded Pearson correlation between the columns of an `[N, B]` matrix.
pub fn corr_var(tape: &mut Tape, x: Var) -> Result<Var> {
    let (n, b) = check_matrix(tape, x, "corr_var")?;
    if n < 2 {
        return Err(domain_err!("correlation needs at least 2 pixels, got {n}"));
    }
    let xt = tape.transpose(x)?;
    let mean = tape.mean_inner(xt)?;
    let mean_rows = tape.expand_rows(mean, n)?;
    let xc = tape.sub(x, mean_rows)?;
    let xct = tape.transpose(xc)?;
    let cov_sum = tape.matmul(xct, xc)?;
    let cov = tape.scale(cov_sum, 1.0 / n as f64)?;
    let sq = tape.square(xct)?;
    let var = tape.mean_inner(sq)?;
    let guarded = tape.add_scalar(var, CORR_VAR_GUARD)?;
    let std = tape.sqrt(guarded)?;
    let col = tape.reshape(std, &[b, 1])?;
    let row = tape.reshape(std, &[1, b])?;
    let denom = tape.matmul(col, row)?;
    tape.div(cov, denom)
}

/// Band correlation matrix of a cube for reporting: entries clamped to
/// `[-1, 1]` and a unit diagonal.
pub fn corr_matrix(cube: &HyperCube) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(cube.to_matrix());
    let r = corr_var(&mut tape, x)?;
    let b = cube.bands();
    let mut out = tape.value(r).map(|v| v.clamp(-1.0, 1.0));
    for i in 0..b {
        out.data_mut()[i * b + i] = 1.0;
    }
    Ok(out)
}

/// Expected band-correlation structure `S`: symmetric, unit diagonal,
/// entries in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralPrior {
    matrix: Tensor,
}

impl SpectralPrior {
    pub fn new(matrix: Tensor) -> Result<Self> {
        let b = match matrix.shape() {
            [r, c] if r == c => *r,
            s => return Err(shape_err!("prior must be square, got {s:?}")),
        };
        let d = matrix.data();
        for i in 0..b {
            if (d[i * b + i] - 1.0).abs() > 1e-9 {
                return Err(domain_err!("prior diagonal entry {i} is {}", d[i * b + i]));
            }
            for j in 0..b {
                let v = d[i * b + j];
                if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&v) {
                    return Err(domain_err!("prior entry ({i}, {j}) = {v} outside [-1, 1]"));
                }
                if (v - d[j * b + i]).abs() > 1e-9 {
                    return Err(domain_err!("prior is not symmetric at ({i}, {j})"));
                }
            }
        }
        Ok(Self { matrix })
    }

    /// Correlation of all pixels of `cubes` pooled together.
    pub fn estimate(cubes: &[HyperCube]) -> Result<Self> {
        let first = cubes
            .first()
            .ok_or_else(|| domain_err!("prior estimation needs at least one cube"))?;
        let b = first.bands();
        let mut data = Vec::new();
        for cube in cubes {
            if cube.bands() != b {
                return Err(shape_err!("cubes with {} and {b} bands", cube.bands()));
            }
            data.extend_from_slice(cube.data());
        }
        let n = data.len() / b;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![n, b], data)?);
        let r = corr_var(&mut tape, x)?;
        let mut m = tape.value(r).map(|v| v.clamp(-1.0, 1.0));
        // Symmetrize exactly; the matmul can leave rounding-level asymmetry.
        for i in 0..b {
            for j in 0..i {
                let v = 0.5 * (m.data()[i * b + j] + m.data()[j * b + i]);
                m.data_mut()[i * b + j] = v;
                m.data_mut()[j * b + i] = v;
            }
            m.data_mut()[i * b + i] = 1.0;
        }
        Self::new(m)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn bands(&self) -> usize {
        self.matrix.shape()[0]
    }
}

/// Squared Frobenius distance between the band correlation of `x` and `S`.
pub fn loss_pixel(tape: &mut Tape, x: Var, prior: &SpectralPrior) -> Result<Var> {
    let (_, b) = check_matrix(tape, x, "loss_pixel")?;
    if b != prior.bands() {
        return Err(shape_err!("{b} bands against a {}-band prior", prior.bands()));
    }
    let r = corr_var(tape, x)?;
    let s = tape.constant(prior.matrix.clone());
    let d = tape.sub(r, s)?;
    let sq = tape.square(d)?;
    tape.sum(sq)
}

/// Mean over cubes and indices of `KL(kde(real) || kde(gen))`. `real` and
/// `gen` are physical `[N, B]` matrices; the bandwidth, when not given, is
/// Silverman's rule on the real index values and is held fixed.
pub fn loss_region(
    tape: &mut Tape,
    real: &[Tensor],
    gen: &[Var],
    indices: &[SpectralIndex],
    wavelengths: &[f64],
    bandwidth: Option<f64>,
) -> Result<Var> {
    if real.len() != gen.len() {
        return Err(shape_err!("{} real cubes but {} generated", real.len(), gen.len()));
    }
    if real.is_empty() || indices.is_empty() {
        return Err(domain_err!("loss_region needs at least one cube and one index"));
    }
    let grid = kde_grid();
    let mut terms = Vec::new();
    for (r, &g) in real.iter().zip(gen) {
        if r.shape() != tape.shape(g) {
            return Err(shape_err!("real {:?} vs generated {:?}", r.shape(), tape.shape(g)));
        }
        let rv = tape.constant(r.clone());
        for &index in indices {
            let ri = spectral_index(tape, rv, index, wavelengths)?;
            let h = match bandwidth {
                Some(h) => h,
                None => silverman_bandwidth(tape.value(ri).data()),
            };
            let gi = spectral_index(tape, g, index, wavelengths)?;
            let p = kde(tape, ri, &grid, h)?;
            let q = kde(tape, gi, &grid, h)?;
            terms.push(kl_divergence(tape, p, q)?);
        }
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = tape.add(total, *t)?;
    }
    tape.scale(total, 1.0 / real.len() as f64)
}

/// Mean squared difference between emulator round trips of `xhat` and `x0`
/// (both physical `[N, B]`). The emulator is frozen.
pub fn loss_image(tape: &mut Tape, xhat: Var, x0: &Tensor, emulator: &Emulator) -> Result<Var> {
    if tape.shape(xhat) != x0.shape() {
        return Err(shape_err!("{:?} vs {:?}", tape.shape(xhat), x0.shape()));
    }
    let gen = emulator.round_trip_on(tape, xhat)?;
    let real = emulator.round_trip(x0)?;
    let rv = tape.constant(real);
    let d = tape.sub(gen, rv)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

/// Observed index values at pixels where both contributing bands survive the
/// mask.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexTarget {
    pub index: SpectralIndex,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl IndexTarget {
    pub fn count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Observation-derived targets for physics-guided sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct PhysTarget {
    pub indices: Vec<IndexTarget>,
    pub prior: SpectralPrior,
    pub wavelengths: Vec<f64>,
    pub pixels: usize,
}

pub fn build_phys_target(
    pair: &ConditionPair,
    prior: &SpectralPrior,
    indices: &[SpectralIndex],
) -> Result<PhysTarget> {
    let b = pair.bands();
    if b != prior.bands() || b != pair.wavelengths.len() {
        return Err(shape_err!(
            "pair has {b} bands, prior {}, grid {}",
            prior.bands(),
            pair.wavelengths.len()
        ));
    }
    let n = pair.height() * pair.width();
    let (c, m) = (pair.c.data(), pair.m.data());
    let mut out = Vec::new();
    for &index in indices {
        let (bp, bn) = index.bands(&pair.wavelengths)?;
        let mut values = vec![0.0; n];
        let mut valid = vec![false; n];
        for p in 0..n {
            if m[p * b + bp] == 1.0 && m[p * b + bn] == 1.0 {
                let phys = |v: f64| ((v + 1.0) * 0.5).clamp(0.0, 1.0);
                values[p] = SpectralIndex::from_pair(phys(c[p * b + bp]), phys(c[p * b + bn]));
                valid[p] = true;
            }
        }
        out.push(IndexTarget {
            index,
            values,
            valid,
        });
    }
    Ok(PhysTarget {
        indices: out,
        prior: prior.clone(),
        wavelengths: pair.wavelengths.clone(),
        pixels: n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysWeights {
    pub index: f64,
    pub prior: f64,
    pub range: f64,
}

impl Default for PhysWeights {
    fn default() -> Self {
        Self {
            index: 1.0,
            prior: 1.0,
            range: 1.0,
        }
    }
}

/// The three terms of the guidance loss and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct PhysTerms {
    pub index: Var,
    pub prior: Var,
    pub range: Var,
    pub total: Var,
}

/// Guidance loss on a normalized `[N, B]` estimate: masked index MSE against
/// the observation, correlation distance to the prior, and a squared hinge
/// on physical values outside `[0, 1]`. Indices are read from the estimate
/// clipped to `[0, 1]` so out-of-range values are left to the hinge.
pub fn loss_phy_terms(
    tape: &mut Tape,
    xhat0: Var,
    target: &PhysTarget,
    weights: &PhysWeights,
) -> Result<PhysTerms> {
    let (n, b) = check_matrix(tape, xhat0, "loss_phy")?;
    if n != target.pixels || b != target.wavelengths.len() {
        return Err(shape_err!(
            "estimate [{n}, {b}] vs target with {} pixels and {} bands",
            target.pixels,
            target.wavelengths.len()
        ));
    }
    let half = tape.scale(xhat0, 0.5)?;
    let phys = tape.add_scalar(half, 0.5)?;
    let clipped = tape.clamp(phys, 0.0, 1.0)?;

    let mut index = tape.constant(Tensor::scalar(0.0));
    for t in &target.indices {
        let count = t.count();
        if count == 0 {
            continue;
        }
        let est = spectral_index(tape, clipped, t.index, &target.wavelengths)?;
        let obs = tape.constant(Tensor::from_vec(t.values.clone()));
        let mask = tape.constant(Tensor::from_vec(
            t.valid.iter().map(|v| f64::from(u8::from(*v))).collect(),
        ));
        let d = tape.sub(est, obs)?;
        let sq = tape.square(d)?;
        let masked = tape.mul(sq, mask)?;
        let s = tape.sum(masked)?;
        let term = tape.scale(s, 1.0 / count as f64)?;
        index = tape.add(index, term)?;
    }

    let prior = loss_pixel(tape, xhat0, &target.prior)?;

    let above = tape.add_scalar(phys, -1.0)?;
    let above = tape.relu(above)?;
    let below = tape.scale(phys, -1.0)?;
    let below = tape.relu(below)?;
    let above_sq = tape.square(above)?;
    let below_sq = tape.square(below)?;
    let both = tape.add(above_sq, below_sq)?;
    let range = tape.mean(both)?;

    let wi = tape.scale(index, weights.index)?;
    let wp = tape.scale(prior, weights.prior)?;
    let wr = tape.scale(range, weights.range)?;
    let partial = tape.add(wi, wp)?;
    let total = tape.add(partial, wr)?;
    Ok(PhysTerms {
        index,
        prior,
        range,
        total,
    })
}

pub fn loss_phy(
    tape: &mut Tape,
    xhat0: Var,
    target: &PhysTarget,
    weights: &PhysWeights,
) -> Result<Var> {
    Ok(loss_phy_terms(tape, xhat0, target, weights)?.total)
}

/// Value of the guidance loss for a normalized `[N, B]` (or `[H, W, B]`)
/// estimate.
pub fn eval_loss_phy(xhat0: &Tensor, target: &PhysTarget, weights: &PhysWeights) -> Result<f64> {
    let b = target.wavelengths.len();
    if xhat0.numel() != target.pixels * b {
        return Err(shape_err!("{} values for {} pixels", xhat0.numel(), target.pixels));
    }
    let mut tape = Tape::new();
    let x = tape.constant(xhat0.clone().reshape(&[target.pixels, b])?);
    let l = loss_phy(&mut tape, x, target, weights)?;
    tape.value(l).item()
}

#[cfg(test)]
mod tests;
