//! Synthetic hyperspectral scenes.
//!
//! Ground truth comes from a closed-form canopy model: a Beer–Lambert mix of
//! a linear soil line and a leaf curve with a green peak and a logistic red
//! edge, plus an exponentially decaying water curve. Scene parameters are
//! smooth random fields so neighbouring pixels share land cover and canopy
//! state.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Error, Result};
use crate::gradcore::{sigmoid, Tensor};

pub const LAI_RANGE: (f64, f64) = (0.0, 6.0);
pub const CAB_RANGE: (f64, f64) = (0.0, 1.0);
pub const MOISTURE_RANGE: (f64, f64) = (0.0, 1.0);
/// Canopy extinction coefficient.
pub const EXTINCTION: f64 = 0.5;
pub const DEFAULT_BANDS: usize = 12;
pub const SPECTRAL_RANGE_NM: (f64, f64) = (450.0, 950.0);

const DOMAIN_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Reflectance in `[0, 1]`.
    Physical,
    /// `2x - 1`, in `[-1, 1]`.
    Normalized,
}

impl Domain {
    fn bounds(self) -> (f64, f64) {
        match self {
            Domain::Physical => (0.0, 1.0),
            Domain::Normalized => (-1.0, 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LandClass {
    Vegetation,
    Soil,
    Water,
}

/// `H x W x B` cube stored pixel-major, band-minor.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperCube {
    height: usize,
    width: usize,
    wavelengths: Vec<f64>,
    data: Vec<f64>,
    domain: Domain,
}

impl HyperCube {
    pub fn new(
        height: usize,
        width: usize,
        wavelengths: Vec<f64>,
        data: Vec<f64>,
        domain: Domain,
    ) -> Result<Self> {
        let bands = wavelengths.len();
        if bands < 4 {
            return Err(domain_err!("a cube needs at least 4 bands, got {bands}"));
        }
        if !strictly_increasing(&wavelengths) {
            return Err(domain_err!("wavelengths must be strictly increasing"));
        }
        if data.len() != height * width * bands {
            return Err(shape_err!(
                "{height}x{width}x{bands} cube given {} values",
                data.len()
            ));
        }
        let (lo, hi) = domain.bounds();
        if let Some(v) = data
            .iter()
            .find(|v| !(**v >= lo - DOMAIN_SLACK && **v <= hi + DOMAIN_SLACK))
        {
            return Err(domain_err!("value {v} outside {domain:?} range [{lo}, {hi}]"));
        }
        Ok(Self {
            height,
            width,
            wavelengths,
            data,
            domain,
        })
    }

    /// Builds a cube from an `[H*W, B]` or `[H, W, B]` tensor, clamping into
    /// the domain range.
    pub fn from_tensor_clamped(
        height: usize,
        width: usize,
        wavelengths: Vec<f64>,
        values: &Tensor,
        domain: Domain,
    ) -> Result<Self> {
        let (lo, hi) = domain.bounds();
        let data = values.data().iter().map(|v| v.clamp(lo, hi)).collect();
        Self::new(height, width, wavelengths, data, domain)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, band: usize) -> f64 {
        self.data[(row * self.width + col) * self.bands() + band]
    }

    /// Spectrum of flat pixel index `p`.
    pub fn pixel(&self, p: usize) -> &[f64] {
        let b = self.bands();
        &self.data[p * b..(p + 1) * b]
    }

    pub fn band(&self, band: usize) -> Vec<f64> {
        self.data
            .chunks(self.bands())
            .map(|px| px[band])
            .collect()
    }

    /// The cube as an `[H*W, B]` matrix.
    pub fn to_matrix(&self) -> Tensor {
        Tensor::new(vec![self.pixels(), self.bands()], self.data.clone())
            .expect("cube data length matches its shape")
    }

    /// The cube as an `[H, W, B]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, self.bands()], self.data.clone())
            .expect("cube data length matches its shape")
    }

    pub fn same_geometry(&self, other: &HyperCube) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.wavelengths == other.wavelengths
    }

    fn with_data(&self, data: Vec<f64>, domain: Domain) -> Self {
        Self {
            height: self.height,
            width: self.width,
            wavelengths: self.wavelengths.clone(),
            data,
            domain,
        }
    }
}

/// Biophysical parameter maps behind a generated scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamFields {
    pub height: usize,
    pub width: usize,
    pub lai: Vec<f64>,
    pub cab: Vec<f64>,
    pub moisture: Vec<f64>,
    pub class_map: Vec<LandClass>,
}

pub fn strictly_increasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] < w[1])
}

/// `bands` centres spread uniformly over 450–950 nm.
pub fn default_wavelengths(bands: usize) -> Vec<f64> {
    let (lo, hi) = SPECTRAL_RANGE_NM;
    if bands == 1 {
        return vec![lo];
    }
    (0..bands)
        .map(|i| lo + (hi - lo) * i as f64 / (bands - 1) as f64)
        .collect()
}

fn check_range(name: &str, v: f64, (lo, hi): (f64, f64)) -> Result<()> {
    if !(v >= lo && v <= hi) {
        return Err(domain_err!("{name} = {v} outside [{lo}, {hi}]"));
    }
    Ok(())
}

pub fn soil_reflectance(nm: f64) -> f64 {
    0.15 + 0.0003 * (nm - 450.0)
}

pub fn leaf_reflectance(nm: f64, cab: f64) -> f64 {
    let nir_amplitude = 0.3 + 0.2 * cab;
    let green = (-(nm - 550.0).powi(2) / (2.0 * 30.0 * 30.0)).exp();
    0.04 + nir_amplitude * sigmoid((nm - 720.0) / 15.0) + 0.12 * (1.0 - 0.5 * cab) * green
}

pub fn water_reflectance(nm: f64, moisture: f64) -> f64 {
    0.08 * (-(nm - 450.0) / 150.0).exp() * (1.0 - 0.5 * moisture)
}

/// Closed-form toy canopy reflectance at each wavelength.
pub fn toy_rtm(
    lai: f64,
    cab: f64,
    moisture: f64,
    class: LandClass,
    wavelengths: &[f64],
) -> Result<Vec<f64>> {
    check_range("lai", lai, LAI_RANGE)?;
    check_range("cab", cab, CAB_RANGE)?;
    check_range("moisture", moisture, MOISTURE_RANGE)?;
    let cover = 1.0 - (-EXTINCTION * lai).exp();
    Ok(wavelengths
        .iter()
        .map(|&nm| match class {
            LandClass::Vegetation => {
                soil_reflectance(nm) * (1.0 - cover) + leaf_reflectance(nm, cab) * cover
            }
            LandClass::Soil => soil_reflectance(nm),
            LandClass::Water => water_reflectance(nm, moisture),
        })
        .collect())
}

fn box_blur(field: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let norm = (2 * radius + 1) as f64;
    let mut tmp = vec![0.0; field.len()];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = (-r..=r)
                .map(|d| field[i * w + clamp(j as isize + d, w)])
                .sum::<f64>()
                / norm;
        }
    }
    let mut out = vec![0.0; field.len()];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = (-r..=r)
                .map(|d| tmp[clamp(i as isize + d, h) * w + j])
                .sum::<f64>()
                / norm;
        }
    }
    out
}

fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let noise: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
    let once = box_blur(&noise, h, w, 3);
    box_blur(&once, h, w, 3)
}

fn rescale(field: &[f64], (lo, hi): (f64, f64)) -> Vec<f64> {
    let min = field.iter().copied().fold(f64::INFINITY, f64::min);
    let max = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    field
        .iter()
        .map(|v| {
            if span < 1e-12 {
                0.5 * (lo + hi)
            } else {
                (lo + (v - min) / span * (hi - lo)).clamp(lo, hi)
            }
        })
        .collect()
}

fn tercile_classes(field: &[f64]) -> Vec<LandClass> {
    let mut sorted = field.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let (t1, t2) = (sorted[n / 3], sorted[2 * n / 3]);
    field
        .iter()
        .map(|&v| {
            if v < t1 {
                LandClass::Water
            } else if v < t2 {
                LandClass::Soil
            } else {
                LandClass::Vegetation
            }
        })
        .collect()
}

/// Renders a smooth random scene through [`toy_rtm`]. Deterministic in `seed`.
pub fn generate_scene(
    height: usize,
    width: usize,
    bands: usize,
    seed: u64,
) -> Result<(HyperCube, ParamFields)> {
    if height < 8 || width < 8 {
        return Err(domain_err!("scenes must be at least 8x8, got {height}x{width}"));
    }
    if bands < 4 {
        return Err(domain_err!("scenes need at least 4 bands, got {bands}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lai = rescale(&smooth_field(&mut rng, height, width), LAI_RANGE);
    let cab = rescale(&smooth_field(&mut rng, height, width), CAB_RANGE);
    let moisture = rescale(&smooth_field(&mut rng, height, width), MOISTURE_RANGE);
    let class_map = tercile_classes(&smooth_field(&mut rng, height, width));

    let wavelengths = default_wavelengths(bands);
    let mut data = Vec::with_capacity(height * width * bands);
    for p in 0..height * width {
        data.extend(toy_rtm(lai[p], cab[p], moisture[p], class_map[p], &wavelengths)?);
    }
    let cube = HyperCube::new(height, width, wavelengths, data, Domain::Physical)?;
    let params = ParamFields {
        height,
        width,
        lai,
        cab,
        moisture,
        class_map,
    };
    Ok((cube, params))
}

/// Maps physical reflectance `x` to `2x - 1`.
pub fn normalize(cube: &HyperCube) -> Result<HyperCube> {
    if cube.domain != Domain::Physical {
        return Err(domain_err!("normalize expects a physical cube"));
    }
    let data = cube.data.iter().map(|v| 2.0 * v - 1.0).collect();
    Ok(cube.with_data(data, Domain::Normalized))
}

pub fn denormalize(cube: &HyperCube) -> Result<HyperCube> {
    if cube.domain != Domain::Normalized {
        return Err(domain_err!("denormalize expects a normalized cube"));
    }
    let data = cube.data.iter().map(|v| (v + 1.0) * 0.5).collect();
    Ok(cube.with_data(data, Domain::Physical))
}

/// Sliding `size x size` windows in row-major order; partial windows at the
/// right and bottom edges are dropped.
pub fn patchify(cube: &HyperCube, size: usize, stride: usize) -> Result<Vec<HyperCube>> {
    if size == 0 || size > cube.height || size > cube.width {
        return Err(shape_err!(
            "patch size {size} does not fit a {}x{} cube",
            cube.height,
            cube.width
        ));
    }
    if stride == 0 {
        return Err(shape_err!("patch stride must be at least 1"));
    }
    let b = cube.bands();
    let mut patches = Vec::new();
    for top in (0..=cube.height - size).step_by(stride) {
        for left in (0..=cube.width - size).step_by(stride) {
            let mut data = Vec::with_capacity(size * size * b);
            for r in top..top + size {
                let start = (r * cube.width + left) * b;
                data.extend_from_slice(&cube.data[start..start + size * b]);
            }
            patches.push(HyperCube {
                height: size,
                width: size,
                wavelengths: cube.wavelengths.clone(),
                data,
                domain: cube.domain,
            });
        }
    }
    Ok(patches)
}

const HSC1_MAGIC: &[u8; 4] = b"HSC1";

/// Writes a physical cube as `HSC1`: magic, `u32` H, W, B, `f32` wavelengths,
/// then `f32` values pixel-major, band-minor. All little-endian.
pub fn write_hsc1<W: Write>(cube: &HyperCube, mut out: W) -> Result<()> {
    if cube.domain != Domain::Physical {
        return Err(domain_err!("HSC1 stores physical reflectance"));
    }
    out.write_all(HSC1_MAGIC)?;
    for dim in [cube.height, cube.width, cube.bands()] {
        out.write_all(&(dim as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 * (cube.bands() + cube.data.len()));
    for v in cube.wavelengths.iter().chain(&cube.data) {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_hsc1<R: Read>(mut input: R) -> Result<HyperCube> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != HSC1_MAGIC {
        return Err(Error::Format("not an HSC1 cube".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, b) = (dim(0), dim(1), dim(2));
    let expected = 16 + 4 * (b + h * w * b);
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "HSC1 {h}x{w}x{b} needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let floats: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let (wavelengths, data) = floats.split_at(b);
    HyperCube::new(h, w, wavelengths.to_vec(), data.to_vec(), Domain::Physical)
}

pub fn save_hsc1(cube: &HyperCube, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_hsc1(cube, std::io::BufWriter::new(file))
}

pub fn load_hsc1(path: &Path) -> Result<HyperCube> {
    read_hsc1(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physops::{ndvi_of_spectrum, ndwi_of_spectrum};

    fn grid() -> Vec<f64> {
        default_wavelengths(DEFAULT_BANDS)
    }

    #[test]
    fn bare_canopy_is_soil() {
        let wl = grid();
        let s = toy_rtm(0.0, 0.7, 0.3, LandClass::Vegetation, &wl).unwrap();
        for (v, nm) in s.iter().zip(&wl) {
            assert_eq!(*v, soil_reflectance(*nm));
        }
    }

    #[test]
    fn dense_canopy_approaches_leaf() {
        let wl = grid();
        let s = toy_rtm(6.0, 0.4, 0.0, LandClass::Vegetation, &wl).unwrap();
        for (v, nm) in s.iter().zip(&wl) {
            assert!((v - leaf_reflectance(*nm, 0.4)).abs() < 0.06);
        }
    }

    #[test]
    fn ndvi_increases_with_lai() {
        let wl = grid();
        let ndvi = |lai| ndvi_of_spectrum(&toy_rtm(lai, 0.5, 0.5, LandClass::Vegetation, &wl).unwrap(), &wl);
        assert!(ndvi(4.0) > ndvi(1.0));
        let lais: Vec<f64> = (0..20).map(|i| 6.0 * i as f64 / 19.0).collect();
        for cab in [0.0, 0.5, 1.0] {
            let series: Vec<f64> = lais
                .iter()
                .map(|&l| ndvi_of_spectrum(&toy_rtm(l, cab, 0.5, LandClass::Vegetation, &wl).unwrap(), &wl))
                .collect();
            assert!(series.windows(2).all(|w| w[1] > w[0]), "cab {cab}: {series:?}");
        }
    }

    #[test]
    fn water_is_dark_in_nir() {
        let wl = grid();
        for m in [0.0, 0.5, 1.0] {
            let s = toy_rtm(0.0, 0.0, m, LandClass::Water, &[842.0]).unwrap();
            assert!(s[0] < 0.05);
            let full = toy_rtm(0.0, 0.0, m, LandClass::Water, &wl).unwrap();
            assert!(ndwi_of_spectrum(&full, &wl) > 0.0);
        }
    }

    #[test]
    fn out_of_range_parameters_are_rejected() {
        let wl = grid();
        assert!(matches!(toy_rtm(6.5, 0.5, 0.5, LandClass::Vegetation, &wl), Err(Error::Domain(_))));
        assert!(matches!(toy_rtm(1.0, -0.1, 0.5, LandClass::Soil, &wl), Err(Error::Domain(_))));
        assert!(matches!(toy_rtm(1.0, 0.5, 1.2, LandClass::Water, &wl), Err(Error::Domain(_))));
    }

    #[test]
    fn scenes_are_deterministic() {
        let (a, pa) = generate_scene(16, 16, 12, 9).unwrap();
        let (b, pb) = generate_scene(16, 16, 12, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        let (c, _) = generate_scene(16, 16, 12, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn scene_covers_all_classes_in_range() {
        let (cube, params) = generate_scene(16, 16, 12, 1).unwrap();
        assert!(cube.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for class in [LandClass::Vegetation, LandClass::Soil, LandClass::Water] {
            let n = params.class_map.iter().filter(|c| **c == class).count();
            assert!(n > 0, "{class:?} missing");
        }
        assert!(params.lai.iter().all(|v| (0.0..=6.0).contains(v)));
        let wl = cube.wavelengths().to_vec();
        for p in 0..cube.pixels() {
            if params.class_map[p] == LandClass::Water {
                assert!(ndwi_of_spectrum(cube.pixel(p), &wl) > 0.0);
            }
        }
    }

    #[test]
    fn tiny_scenes_are_rejected() {
        assert!(generate_scene(4, 16, 12, 0).is_err());
        assert!(generate_scene(16, 16, 3, 0).is_err());
    }

    #[test]
    fn normalization_endpoints_and_round_trip() {
        let cube = HyperCube::new(1, 1, grid()[..4].to_vec(), vec![0.0, 0.5, 1.0, 0.25], Domain::Physical).unwrap();
        let n = normalize(&cube).unwrap();
        assert_eq!(n.data(), &[-1.0, 0.0, 1.0, -0.5]);
        assert!(matches!(normalize(&n), Err(Error::Domain(_))));
        assert!(matches!(denormalize(&cube), Err(Error::Domain(_))));

        let (scene, _) = generate_scene(12, 10, 12, 3).unwrap();
        let back = denormalize(&normalize(&scene).unwrap()).unwrap();
        let err = back
            .data()
            .iter()
            .zip(scene.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    fn blank(h: usize, w: usize) -> HyperCube {
        HyperCube::new(h, w, grid()[..4].to_vec(), vec![0.5; h * w * 4], Domain::Physical).unwrap()
    }

    #[test]
    fn patch_counts() {
        assert_eq!(patchify(&blank(64, 64), 64, 32).unwrap().len(), 1);
        assert_eq!(patchify(&blank(96, 96), 64, 32).unwrap().len(), 4);
        assert_eq!(patchify(&blank(610, 340), 64, 32).unwrap().len(), 18 * 9);
        assert!(matches!(patchify(&blank(32, 80), 64, 32), Err(Error::Shape(_))));
    }

    #[test]
    fn patches_are_row_major_windows() {
        let (scene, _) = generate_scene(12, 12, 4, 5).unwrap();
        let patches = patchify(&scene, 8, 4).unwrap();
        assert_eq!(patches.len(), 4);
        // second patch starts at column 4 of row 0
        assert_eq!(patches[1].get(0, 0, 2), scene.get(0, 4, 2));
        assert_eq!(patches[2].get(3, 1, 1), scene.get(7, 1, 1));
    }

    #[test]
    fn hsc1_layout_and_round_trip() {
        let (scene, _) = generate_scene(8, 9, 5, 2).unwrap();
        let mut bytes = Vec::new();
        write_hsc1(&scene, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"HSC1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 9);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 5);
        assert_eq!(bytes.len(), 16 + 4 * (5 + 8 * 9 * 5));
        let first = f32::from_le_bytes(bytes[16 + 20..16 + 24].try_into().unwrap());
        assert_eq!(first, scene.get(0, 0, 0) as f32);

        let back = read_hsc1(&bytes[..]).unwrap();
        for (a, b) in back.data().iter().zip(scene.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert!(matches!(read_hsc1(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        assert!(matches!(read_hsc1(&b"XXXX0000000000000000"[..]), Err(Error::Format(_))));
    }
}
