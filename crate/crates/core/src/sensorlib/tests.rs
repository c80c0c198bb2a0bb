use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::specdata::{default_wavelengths, generate_scene, normalize, DEFAULT_BANDS};

fn scene(seed: u64) -> HyperCube {
    generate_scene(8, 8, DEFAULT_BANDS, seed).unwrap().0
}

#[test]
fn identity_sensor_reproduces_the_cube() {
    let cube = scene(1);
    let obs = apply_srf(&cube, &SensorSrf::identity(cube.wavelengths())).unwrap();
    assert!(obs.occupied.iter().all(|o| *o));
    assert!(obs.warnings.is_empty());
    for (a, b) in obs.cube.data().iter().zip(cube.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn gaussian_resampling_matches_analytic_weights() {
    let grid = default_wavelengths(DEFAULT_BANDS);
    let (mu, sigma) = (665.0, 20.0);
    let knots: Vec<f64> = (0..=40).map(|k| 565.0 + 5.0 * k as f64).collect();
    let band = SrfBand {
        response: knots
            .iter()
            .map(|x| (-(x - mu) * (x - mu) / (2.0 * sigma * sigma)).exp())
            .collect(),
        grid_nm: knots,
    };
    let r = resample_band(&band, &grid).unwrap();
    let analytic: Vec<f64> = grid
        .iter()
        .map(|x| (-(x - mu) * (x - mu) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = analytic.iter().sum();
    for (w, a) in r.weights.iter().zip(&analytic) {
        assert!((w - a / total).abs() < 1e-3, "{w} vs {}", a / total);
    }
}

#[test]
fn targets_outside_the_knot_range_get_zero_weight() {
    let band = SrfBand {
        grid_nm: vec![600.0, 650.0, 700.0],
        response: vec![0.2, 1.0, 0.3],
    };
    let r = resample_band(&band, &[550.0, 640.0, 690.0, 750.0]).unwrap();
    assert_eq!(r.weights[0], 0.0);
    assert_eq!(r.weights[3], 0.0);
    assert!((r.weights[1] + r.weights[2] - 1.0).abs() < 1e-12);
}

#[test]
fn colliding_bands_keep_the_stronger_response() {
    let cube = scene(2);
    let weak = SrfBand::gaussian(670.0, 4.0, 1.0);
    let strong = SrfBand::gaussian(675.0, 12.0, 1.0);
    let sensor = SensorSrf {
        name: "pair".into(),
        bands: vec![weak.clone(), strong.clone()],
    };
    let obs = apply_srf(&cube, &sensor).unwrap();
    assert_eq!(obs.warnings.len(), 1);
    assert_eq!(obs.occupied.iter().filter(|o| **o).count(), 1);
    let r_strong = resample_band(&strong, cube.wavelengths()).unwrap();
    let r_weak = resample_band(&weak, cube.wavelengths()).unwrap();
    assert!(r_strong.raw_total > r_weak.raw_total);
    let px = cube.pixel(0);
    let expect: f64 = r_strong.weights.iter().zip(px).map(|(w, v)| w * v).sum();
    assert!((obs.cube.pixel(0)[5] - expect).abs() < 1e-12);
}

#[test]
fn builtin_library_is_valid_and_varied() {
    let lib = builtin_library();
    assert_eq!(lib.len(), 15);
    let counts: Vec<usize> = lib.iter().map(|s| s.bands.len()).collect();
    assert_eq!(counts.iter().min(), Some(&1));
    assert_eq!(counts.iter().max(), Some(&12));
    let cube = scene(3);
    for s in &lib {
        s.validate().unwrap();
        let obs = apply_srf(&cube, s).unwrap();
        assert!(obs.occupied.iter().any(|o| *o), "{} observes nothing", s.name);
    }
}

#[test]
fn library_json_round_trips_and_is_strict() {
    let lib = builtin_library();
    let text = library_to_json(&lib).unwrap();
    assert_eq!(library_from_json(&text).unwrap(), lib);
    let bad = r#"[{"name":"x","bands":[{"grid_nm":[1,2],"response":[0,1],"gain":2}]}]"#;
    assert!(library_from_json(bad).is_err());
    let negative = r#"[{"name":"x","bands":[{"grid_nm":[1,2],"response":[-1,1]}]}]"#;
    assert!(library_from_json(negative).is_err());
}

#[test]
fn zero_drop_with_identity_sensor_keeps_everything() {
    let cube = normalize(&scene(4)).unwrap();
    let lib = vec![SensorSrf::identity(cube.wavelengths())];
    let pair = dsm_mask(&cube, &lib, 0.0, MaskMode::PerBand, 9).unwrap();
    assert!(pair.m.data().iter().all(|v| *v == 1.0));
    for (a, b) in pair.c.data().iter().zip(cube.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn per_band_drop_rate_matches_p() {
    let cube = normalize(&generate_scene(8, 8, DEFAULT_BANDS, 5).unwrap().0).unwrap();
    let sensor = SensorSrf::identity(cube.wavelengths());
    let nb = cube.bands();
    let p = 0.3;
    let runs = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut dropped = 0usize;
    for _ in 0..runs {
        let pair = mask_with_sensor(&cube, &sensor, p, MaskMode::PerBand, &mut rng).unwrap();
        let m = pair.m.data();
        for b in 0..nb {
            // Per-band masks are spatially uniform.
            assert!(m.chunks(nb).all(|px| px[b] == m[b]));
            dropped += usize::from(m[b] == 0.0);
        }
    }
    let n = (runs * nb) as f64;
    let sigma = (p * (1.0 - p) / n).sqrt();
    assert!((dropped as f64 / n - p).abs() < 3.0 * sigma);
}

#[test]
fn per_element_drop_rate_matches_p() {
    let cube = normalize(&scene(6)).unwrap();
    let sensor = SensorSrf::identity(cube.wavelengths());
    let p = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut dropped = 0usize;
    let mut total = 0usize;
    for _ in 0..200 {
        let pair = mask_with_sensor(&cube, &sensor, p, MaskMode::PerElement, &mut rng).unwrap();
        dropped += pair.m.data().iter().filter(|v| **v == 0.0).count();
        total += pair.m.numel();
    }
    let sigma = (p * (1.0 - p) / total as f64).sqrt();
    assert!((dropped as f64 / total as f64 - p).abs() < 3.0 * sigma);
}

#[test]
fn masking_rejects_bad_inputs() {
    let phys = scene(7);
    let lib = builtin_library();
    assert!(dsm_mask(&phys, &lib, 0.3, MaskMode::PerBand, 0).is_err());
    let cube = normalize(&phys).unwrap();
    assert!(matches!(
        dsm_mask(&cube, &lib, 1.0, MaskMode::PerBand, 0),
        Err(Error::Domain(_))
    ));
    assert!(dsm_mask(&cube, &[], 0.3, MaskMode::PerBand, 0).is_err());
}

#[test]
fn sampled_drop_probabilities_stay_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let p = sample_p_drop(&mut rng);
        assert!((P_DROP_RANGE.0..=P_DROP_RANGE.1).contains(&p));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn resampled_weights_are_a_distribution(
        mu in 460.0f64..940.0,
        sigma in 3.0f64..80.0,
    ) {
        let grid = default_wavelengths(DEFAULT_BANDS);
        let r = resample_band(&SrfBand::gaussian(mu, sigma, 2.0), &grid).unwrap();
        prop_assert!(r.weights.iter().all(|w| *w >= 0.0));
        let total: f64 = r.weights.iter().sum();
        prop_assert!(total == 0.0 || (total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn condition_pairs_are_consistent(seed in 0u64..1000, p in 0.0f64..0.95, per_element: bool) {
        let cube = normalize(&scene(seed % 7)).unwrap();
        let mode = if per_element { MaskMode::PerElement } else { MaskMode::PerBand };
        let pair = dsm_mask(&cube, &builtin_library(), p, mode, seed).unwrap();
        let again = dsm_mask(&cube, &builtin_library(), p, mode, seed).unwrap();
        prop_assert!(pair.c.bit_eq(&again.c) && pair.m.bit_eq(&again.m));
        for (c, m) in pair.c.data().iter().zip(pair.m.data()) {
            prop_assert!(*m == 0.0 || *m == 1.0);
            prop_assert!(*m == 1.0 || *c == 0.0);
            prop_assert!((-1.0..=1.0).contains(c));
        }
    }
}
