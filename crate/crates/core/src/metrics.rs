//! Reconstruction metrics on physical reflectance (peak 1).

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Result};
use crate::physops::{index_map, SpectralIndex};
use crate::specdata::{Domain, HyperCube};

/// Reported in place of `+inf` when the cubes are identical.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SAM_NORM_FLOOR: f64 = 1e-8;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
/// Per-sample variance below which a map counts as constant.
const FLAT_VARIANCE: f64 = 1e-18;

fn check_pair(x: &HyperCube, y: &HyperCube) -> Result<()> {
    if x.domain() != Domain::Physical || y.domain() != Domain::Physical {
        return Err(domain_err!("metrics are defined on physical cubes"));
    }
    if !x.same_geometry(y) {
        return Err(shape_err!(
            "{}x{}x{} vs {}x{}x{}",
            x.height(),
            x.width(),
            x.bands(),
            y.height(),
            y.width(),
            y.bands()
        ));
    }
    Ok(())
}

fn mse(x: &HyperCube, y: &HyperCube) -> f64 {
    let n = x.data().len() as f64;
    x.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n
}

pub fn rmse(x: &HyperCube, y: &HyperCube) -> Result<f64> {
    check_pair(x, y)?;
    Ok(mse(x, y).sqrt())
}

pub fn psnr(x: &HyperCube, y: &HyperCube) -> Result<f64> {
    check_pair(x, y)?;
    let e = mse(x, y);
    if e == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / e).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region filter of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..k).map(|j| g[j] * plane[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|i| g[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM over bands, each band averaged over the valid window positions.
pub fn ssim(x: &HyperCube, y: &HyperCube) -> Result<f64> {
    check_pair(x, y)?;
    let (h, w) = (x.height(), x.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(shape_err!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"));
    }
    let g = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for b in 0..x.bands() {
        let xb = x.band(b);
        let yb = y.band(b);
        let prod = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(&xb, h, w, &g);
        let my = filter_valid(&yb, h, w, &g);
        let sxx = filter_valid(&prod(&xb, &xb), h, w, &g);
        let syy = filter_valid(&prod(&yb, &yb), h, w, &g);
        let sxy = filter_valid(&prod(&xb, &yb), h, w, &g);
        let n = mx.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / n as f64;
    }
    Ok((total / x.bands() as f64).clamp(-1.0, 1.0))
}

/// Mean per-pixel spectral angle in radians.
pub fn sam(x: &HyperCube, y: &HyperCube) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.pixels();
    let mut total = 0.0;
    for p in 0..n {
        let (a, b) = (x.pixel(p), y.pixel(p));
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(SAM_NORM_FLOOR);
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(SAM_NORM_FLOOR);
        // Same angle as acos of the clamped cosine, but without the loss of
        // precision acos has near 0: 2 atan2(|u - v|, |u + v|) on unit vectors.
        let (mut d, mut s) = (0.0, 0.0);
        for (u, v) in a.iter().zip(b) {
            let (u, v) = (u / na, v / nb);
            d += (u - v) * (u - v);
            s += (u + v) * (u + v);
        }
        total += 2.0 * d.sqrt().atan2(s.sqrt());
    }
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexScore {
    pub cc: f64,
    pub rmse: f64,
    /// Set when either map has zero variance; `cc` is then 0.
    pub degenerate: bool,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<(f64, bool)> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(shape_err!("pearson needs two equal series of length >= 2"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (u, v) in a.iter().zip(b) {
        let (du, dv) = (u - ma, v - mb);
        sab += du * dv;
        saa += du * du;
        sbb += dv * dv;
    }
    if saa / n < FLAT_VARIANCE || sbb / n < FLAT_VARIANCE {
        return Ok((0.0, true));
    }
    Ok(((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0), false))
}

/// CC and RMSE between the index maps of `x` and `y`.
pub fn index_consistency(x: &HyperCube, y: &HyperCube, index: SpectralIndex) -> Result<IndexScore> {
    check_pair(x, y)?;
    let a = index_map(x, index)?;
    let b = index_map(y, index)?;
    let (cc, degenerate) = pearson(&a, &b)?;
    let rmse = (a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
    Ok(IndexScore { cc, rmse, degenerate })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub rmse: f64,
    pub sam_radians: f64,
    pub ndvi: IndexScore,
    pub ndwi: IndexScore,
}

impl MetricsReport {
    /// Scores `estimate` against `truth`.
    pub fn evaluate(estimate: &HyperCube, truth: &HyperCube) -> Result<Self> {
        Ok(Self {
            psnr_db: psnr(estimate, truth)?,
            ssim: ssim(estimate, truth)?,
            rmse: rmse(estimate, truth)?,
            sam_radians: sam(estimate, truth)?,
            ndvi: index_consistency(estimate, truth, SpectralIndex::Ndvi)?,
            ndwi: index_consistency(estimate, truth, SpectralIndex::Ndwi)?,
        })
    }

    pub fn index(&self, index: SpectralIndex) -> IndexScore {
        match index {
            SpectralIndex::Ndvi => self.ndvi,
            SpectralIndex::Ndwi => self.ndwi,
        }
    }
}

/// One line of the evaluation CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub mask_ratio: Option<f64>,
    pub seed: Option<u64>,
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    pub sam: f64,
    pub ndvi_cc: f64,
    pub ndvi_rmse: f64,
    pub ndwi_cc: f64,
    pub ndwi_rmse: f64,
}

impl ReportRow {
    pub fn new(method: impl Into<String>, mask_ratio: Option<f64>, seed: Option<u64>, m: &MetricsReport) -> Self {
        Self {
            method: method.into(),
            mask_ratio,
            seed,
            psnr: m.psnr_db,
            ssim: m.ssim,
            rmse: m.rmse,
            sam: m.sam_radians,
            ndvi_cc: m.ndvi.cc,
            ndvi_rmse: m.ndvi.rmse,
            ndwi_cc: m.ndwi.cc,
            ndwi_rmse: m.ndwi.rmse,
        }
    }
}
