use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcore::grad_check;
use crate::specdata::{default_wavelengths, generate_scene, normalize, DEFAULT_BANDS};

fn grid() -> Vec<f64> {
    default_wavelengths(DEFAULT_BANDS)
}

fn random_matrix(n: usize, b: usize, lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, b], |_| rng.random_range(lo..hi))
}

/// Guarded Pearson correlation by explicit loops.
fn corr_oracle(x: &Tensor) -> Vec<f64> {
    let (n, b) = (x.shape()[0], x.shape()[1]);
    let col = |j: usize| -> Vec<f64> { (0..n).map(|i| x.data()[i * b + j]).collect() };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut out = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            let (a, c) = (col(i), col(j));
            let (ma, mc) = (mean(&a), mean(&c));
            let cov = a.iter().zip(&c).map(|(u, v)| (u - ma) * (v - mc)).sum::<f64>() / n as f64;
            let va = a.iter().map(|u| (u - ma).powi(2)).sum::<f64>() / n as f64;
            let vc = c.iter().map(|v| (v - mc).powi(2)).sum::<f64>() / n as f64;
            out[i * b + j] = cov / ((va + CORR_VAR_GUARD).sqrt() * (vc + CORR_VAR_GUARD).sqrt());
        }
    }
    out
}

#[test]
fn band_selection_uses_nearest_centre() {
    let wl = grid();
    assert_eq!(band_select(&wl, RED_NM).unwrap(), 5);
    assert_eq!(band_select(&wl, NIR_NM).unwrap(), 9);
    assert_eq!(band_select(&wl, GREEN_NM).unwrap(), 2);
    assert_eq!(band_select(&[500.0, 600.0], 550.0).unwrap(), 0);
    assert!(band_select(&[], 550.0).is_err());
    assert!(SpectralIndex::Ndvi.bands(&[600.0, 610.0, 620.0, 630.0]).is_err());
}

#[test]
fn index_matches_closed_form() {
    let wl = grid();
    let x = random_matrix(20, 12, 0.0, 1.0, 1);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let ndvi = spectral_index(&mut tape, v, SpectralIndex::Ndvi, &wl).unwrap();
    let ndwi = spectral_index(&mut tape, v, SpectralIndex::Ndwi, &wl).unwrap();
    for p in 0..20 {
        let px = &x.data()[p * 12..(p + 1) * 12];
        let (nir, red, green) = (px[9], px[5], px[2]);
        let e1 = (nir - red + 1e-6) / (nir + red + 1e-6);
        let e2 = (green - nir + 1e-6) / (green + nir + 1e-6);
        assert!((tape.value(ndvi).data()[p] - e1).abs() < 1e-14);
        assert!((tape.value(ndwi).data()[p] - e2).abs() < 1e-14);
    }
}

#[test]
fn index_gradients_pass_grad_check() {
    let wl = grid();
    for seed in 0..5 {
        let x = random_matrix(6, 12, 0.05, 0.9, seed);
        let err = grad_check(
            |t, v| {
                let i = spectral_index(t, v, SpectralIndex::Ndvi, &wl)?;
                let j = spectral_index(t, v, SpectralIndex::Ndwi, &wl)?;
                let s = t.add(i, j)?;
                let sq = t.square(s)?;
                t.sum(sq)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "seed {seed}: {err:e}");
    }
}

#[test]
fn correlation_matches_pairwise_oracle() {
    for seed in 0..5 {
        let x = random_matrix(30, 6, -1.0, 1.0, seed);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let r = corr_var(&mut tape, v).unwrap();
        for (a, b) in tape.value(r).data().iter().zip(corr_oracle(&x)) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn duplicated_band_correlates_to_one() {
    // Spread the band over ~[0, 20] so the variance guard (1e-8 / var) is
    // far below the tolerance.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 50;
    let mut data = Vec::new();
    for _ in 0..n {
        let v: f64 = rng.random_range(0.0..20.0);
        data.extend([v, v, rng.random_range(0.0..1.0)]);
    }
    let x = Tensor::new(vec![n, 3], data).unwrap();
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let r = corr_var(&mut tape, v).unwrap();
    assert!((tape.value(r).data()[1] - 1.0).abs() < 1e-9);
}

#[test]
fn correlation_gradient_passes_grad_check() {
    for seed in 0..5 {
        let x = random_matrix(8, 4, -1.0, 1.0, seed);
        let target = random_matrix(4, 4, -0.5, 0.5, seed + 100);
        let err = grad_check(
            |t, v| {
                let r = corr_var(t, v)?;
                let c = t.constant(target.clone());
                let w = t.mul(r, c)?;
                t.sum(w)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "seed {seed}: {err:e}");
    }
}

#[test]
fn prior_validation_and_estimation() {
    assert!(SpectralPrior::new(Tensor::identity(4)).is_ok());
    let mut bad = Tensor::identity(3);
    bad.data_mut()[1] = 0.5;
    assert!(SpectralPrior::new(bad).is_err());
    let cubes: Vec<HyperCube> = (0..3)
        .map(|s| generate_scene(16, 16, DEFAULT_BANDS, s).unwrap().0)
        .collect();
    let prior = SpectralPrior::estimate(&cubes).unwrap();
    assert_eq!(prior.bands(), 12);
    // A cube scored against a prior built from itself is essentially at zero.
    let own = SpectralPrior::estimate(&cubes[..1]).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(cubes[0].to_matrix());
    let l = loss_pixel(&mut tape, x, &own).unwrap();
    assert!(tape.value(l).item().unwrap() < 1e-10);
}

#[test]
fn kde_is_a_distribution_and_kl_behaves() {
    let grid = kde_grid();
    assert_eq!(grid.len(), 64);
    assert!((grid[0] + 1.05).abs() < 1e-15 && (grid[63] - 1.05).abs() < 1e-15);
    let cube = generate_scene(16, 16, DEFAULT_BANDS, 3).unwrap().0;
    let real = index_map(&cube, SpectralIndex::Ndvi).unwrap();
    let h = silverman_bandwidth(&real);
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::from_vec(real));
    let p = kde(&mut tape, s, &grid, h).unwrap();
    let total = tape.value(p).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert!(tape.value(p).data().iter().all(|v| *v > 0.0));
    let kl = kl_divergence(&mut tape, p, p).unwrap();
    assert_eq!(tape.value(kl).item().unwrap(), 0.0);
    let raw = tape.constant(Tensor::from_vec(vec![0.5; 64]));
    assert!(kl_divergence(&mut tape, p, raw).is_err());
    assert!(kde(&mut tape, s, &grid, 0.0).is_err());
}

#[test]
fn silverman_has_a_floor() {
    assert_eq!(silverman_bandwidth(&[0.3; 10]), 1e-3);
    assert_eq!(silverman_bandwidth(&[0.3]), 1e-3);
    let h = silverman_bandwidth(&[0.0, 1.0, 2.0, 3.0]);
    let expect = 1.06 * (5.0f64 / 3.0).sqrt() * 4f64.powf(-0.2);
    assert!((h - expect).abs() < 1e-12);
}

#[test]
fn region_loss_detects_a_shifted_index() {
    let wl = grid();
    let cube = generate_scene(16, 16, DEFAULT_BANDS, 8).unwrap().0;
    let real = cube.to_matrix();
    let mut shifted = real.clone();
    for p in 0..cube.pixels() {
        shifted.data_mut()[p * 12 + 9] *= 0.5;
    }
    let mut tape = Tape::new();
    let same = tape.constant(real.clone());
    let l0 = loss_region(&mut tape, &[real.clone()], &[same], &SpectralIndex::ALL, &wl, None).unwrap();
    assert!(tape.value(l0).item().unwrap().abs() < 1e-12);
    let gen = tape.constant(shifted);
    let l1 = loss_region(&mut tape, &[real.clone()], &[gen], &SpectralIndex::ALL, &wl, None).unwrap();
    assert!(tape.value(l1).item().unwrap() > 0.0);
    assert!(loss_region(&mut tape, &[real.clone(), real], &[gen], &SpectralIndex::ALL, &wl, None).is_err());
}

#[test]
fn region_loss_gradient_passes_grad_check() {
    let wl = grid();
    let real = random_matrix(10, 12, 0.1, 0.8, 1);
    for seed in 0..3 {
        let x = random_matrix(10, 12, 0.1, 0.8, 10 + seed);
        let err = grad_check(
            |t, v| loss_region(t, &[real.clone()], &[v], &[SpectralIndex::Ndvi], &wl, Some(0.2)),
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "seed {seed}: {err:e}");
    }
}

fn full_pair(cube: &HyperCube) -> ConditionPair {
    let n = normalize(cube).unwrap();
    let m = Tensor::full(&[cube.height(), cube.width(), cube.bands()], 1.0);
    ConditionPair::from_mask(&n, m).unwrap()
}

#[test]
fn targets_respect_the_mask() {
    let cube = generate_scene(8, 8, DEFAULT_BANDS, 2).unwrap().0;
    let prior = SpectralPrior::new(Tensor::identity(12)).unwrap();
    let full = build_phys_target(&full_pair(&cube), &prior, &SpectralIndex::ALL).unwrap();
    assert_eq!(full.indices[0].count(), 64);
    let expect = index_map(&cube, SpectralIndex::Ndvi).unwrap();
    for (a, b) in full.indices[0].values.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
    // Dropping the red band removes every NDVI target but keeps NDWI.
    let n = normalize(&cube).unwrap();
    let m = Tensor::from_fn(&[8, 8, 12], |k| if k % 12 == 5 { 0.0 } else { 1.0 });
    let pair = ConditionPair::from_mask(&n, m).unwrap();
    let t = build_phys_target(&pair, &prior, &SpectralIndex::ALL).unwrap();
    assert_eq!(t.indices[0].count(), 0);
    assert_eq!(t.indices[1].count(), 64);
}

#[test]
fn range_hinge_matches_hand_value() {
    let cube = generate_scene(8, 8, DEFAULT_BANDS, 2).unwrap().0;
    let prior = SpectralPrior::new(Tensor::identity(12)).unwrap();
    let target = build_phys_target(&full_pair(&cube), &prior, &SpectralIndex::ALL).unwrap();
    let mut x = normalize(&cube).unwrap().to_matrix();
    // Physical 1.2 is normalized 1.4.
    x.data_mut()[17] = 1.4;
    let w = PhysWeights {
        index: 0.0,
        prior: 0.0,
        range: 1.0,
    };
    let l = eval_loss_phy(&x, &target, &w).unwrap();
    assert!((l - 0.04 / (64.0 * 12.0)).abs() < 1e-12, "{l}");
    let clean = normalize(&cube).unwrap().to_matrix();
    let only_index = PhysWeights {
        index: 1.0,
        prior: 0.0,
        range: 1.0,
    };
    assert!(eval_loss_phy(&clean, &target, &only_index).unwrap() < 1e-20);
}

#[test]
fn guidance_loss_gradient_passes_grad_check() {
    let cube = generate_scene(8, 8, DEFAULT_BANDS, 5).unwrap().0;
    let prior = SpectralPrior::estimate(&[generate_scene(8, 8, DEFAULT_BANDS, 6).unwrap().0]).unwrap();
    let target = build_phys_target(&full_pair(&cube), &prior, &SpectralIndex::ALL).unwrap();
    for seed in 0..3 {
        // Interior points only: the clip and hinge have kinks at the bounds.
        let x = random_matrix(64, 12, -0.8, 0.8, seed);
        let err = grad_check(
            |t, v| loss_phy(t, v, &target, &PhysWeights::default()),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}

#[test]
fn index_hand_values() {
    let eps = INDEX_EPS;
    assert!((SpectralIndex::from_pair(0.3, 0.3) - eps / (0.6 + eps)).abs() < 1e-18);
    assert!((SpectralIndex::from_pair(0.5, 0.1) - 0.6667).abs() < 1e-4);
}

#[test]
fn anti_correlated_band_gives_minus_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data: Vec<f64> = (0..40)
        .flat_map(|_| {
            let v: f64 = rng.random_range(0.0..20.0);
            [v, 3.0 - v]
        })
        .collect();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![40, 2], data).unwrap());
    let r = corr_var(&mut tape, x).unwrap();
    assert!((tape.value(r).data()[1] + 1.0).abs() < 1e-9);
}

#[test]
fn identical_bands_against_identity_prior() {
    // Bands 0 and 1 equal and wide-ranged, band 2 independent of both.
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let data: Vec<f64> = (0..64)
        .flat_map(|_| {
            let v: f64 = rng.random_range(0.0..20.0);
            [v, v, rng.random_range(0.0..20.0)]
        })
        .collect();
    let x = Tensor::new(vec![64, 3], data).unwrap();
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let r = corr_var(&mut tape, v).unwrap();
    let rv = tape.value(r).clone();
    let l = loss_pixel(&mut tape, v, &SpectralPrior::new(Tensor::identity(3)).unwrap()).unwrap();
    let total = tape.value(l).item().unwrap();
    // Everything except the (0,1) pair, by brute force.
    let rest: f64 = (0..3)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .filter(|(i, j)| !((*i == 0 && *j == 1) || (*i == 1 && *j == 0)))
        .map(|(i, j)| {
            let s = if i == j { 1.0 } else { 0.0 };
            (rv.data()[i * 3 + j] - s).powi(2)
        })
        .sum();
    assert!((total - rest - 2.0).abs() < 1e-8, "{}", total - rest);
}

#[test]
fn loss_pixel_gradient_on_small_cube() {
    let prior = SpectralPrior::estimate(&[generate_scene(8, 8, 5, 1).unwrap().0]).unwrap();
    for seed in 0..10 {
        let x = random_matrix(16, 5, -1.0, 1.0, seed);
        let err = grad_check(|t, v| loss_pixel(t, v, &prior), &x, 1e-5).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}

#[test]
fn kde_concentrates_and_is_symmetric() {
    let grid = kde_grid();
    let mut tape = Tape::new();
    let one = tape.constant(Tensor::from_vec(vec![grid[20]]));
    let p = kde(&mut tape, one, &grid, 1e-3).unwrap();
    let d = tape.value(p).data().to_vec();
    let argmax = (0..64).max_by(|a, b| d[*a].total_cmp(&d[*b])).unwrap();
    assert_eq!(argmax, 20);
    let sym = tape.constant(Tensor::from_vec(vec![-0.4, -0.1, 0.1, 0.4]));
    let q = kde(&mut tape, sym, &grid, 0.15).unwrap();
    let d = tape.value(q).data();
    for i in 0..32 {
        assert!((d[i] - d[63 - i]).abs() < 1e-9);
    }
}

#[test]
fn kl_hand_value() {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::from_vec(vec![0.5, 0.5]));
    let q = tape.constant(Tensor::from_vec(vec![0.9, 0.1]));
    let kl = kl_divergence(&mut tape, p, q).unwrap();
    let expect = 0.5 * (5.0f64 / 9.0).ln() + 0.5 * 5f64.ln();
    assert!((tape.value(kl).item().unwrap() - expect).abs() < 1e-12);
    assert!((expect - 0.5108).abs() < 1e-4);
}

#[test]
fn half_band_dropout_targets_follow_availability() {
    let cube = generate_scene(8, 8, DEFAULT_BANDS, 12).unwrap().0;
    let prior = SpectralPrior::new(Tensor::identity(12)).unwrap();
    let n = normalize(&cube).unwrap();
    // Keep red (5) and NIR (9); drop green (2) and three others.
    let dropped = [0usize, 2, 4, 7, 10, 11];
    let m = Tensor::from_fn(&[8, 8, 12], |k| if dropped.contains(&(k % 12)) { 0.0 } else { 1.0 });
    let pair = ConditionPair::from_mask(&n, m).unwrap();
    let t = build_phys_target(&pair, &prior, &SpectralIndex::ALL).unwrap();
    assert_eq!(t.indices[0].count(), 64);
    assert_eq!(t.indices[1].count(), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn correlation_report_is_well_formed(seed in 0u64..10_000) {
        let cube = generate_scene(8, 8, DEFAULT_BANDS, seed).unwrap().0;
        let r = corr_matrix(&cube).unwrap();
        let d = r.data();
        for i in 0..12 {
            prop_assert_eq!(d[i * 12 + i], 1.0);
            for j in 0..12 {
                prop_assert!((-1.0..=1.0).contains(&d[i * 12 + j]));
                prop_assert!((d[i * 12 + j] - d[j * 12 + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kl_is_non_negative(a in 0u64..1000, b in 0u64..1000, h in 0.01f64..0.5) {
        let grid = kde_grid();
        let mut tape = Tape::new();
        let s1 = tape.constant(random_matrix(1, 30, -1.0, 1.0, a).reshape(&[30]).unwrap());
        let s2 = tape.constant(random_matrix(1, 30, -1.0, 1.0, b).reshape(&[30]).unwrap());
        let p = kde(&mut tape, s1, &grid, h).unwrap();
        let q = kde(&mut tape, s2, &grid, h).unwrap();
        let kl = kl_divergence(&mut tape, p, q).unwrap();
        prop_assert!(tape.value(kl).item().unwrap() >= -1e-12);
    }

    #[test]
    fn indices_stay_in_unit_interval(seed in 0u64..10_000) {
        let cube = generate_scene(8, 8, DEFAULT_BANDS, seed).unwrap().0;
        for idx in SpectralIndex::ALL {
            for v in index_map(&cube, idx).unwrap() {
                prop_assert!((-1.0..=1.0).contains(&v));
            }
        }
    }
}
