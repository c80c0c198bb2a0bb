use super::*;
use crate::denoiser::{Denoiser, DenoiserConfig, Prediction};
use crate::emulator::Emulator;
use crate::physops::{build_phys_target, eval_loss_phy, PhysTarget, PhysWeights, SpectralIndex, SpectralPrior};
use crate::sensorlib::{builtin_library, mask_with_sensor, ConditionPair, MaskMode, SensorSrf};
use crate::specdata::{generate_scene, normalize, HyperCube};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sched() -> NoiseSchedule {
    NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap()
}

fn toy_config() -> DenoiserConfig {
    DenoiserConfig {
        base_width: 8,
        h_dim: 8,
        encoder_widths: [8, 8],
        ..DenoiserConfig::default()
    }
}

fn scene(seed: u64) -> HyperCube {
    normalize(&generate_scene(8, 8, 12, seed).unwrap().0).unwrap()
}

fn pair_for(cube: &HyperCube, seed: u64) -> ConditionPair {
    let sensor = SensorSrf::identity(cube.wavelengths());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mask_with_sensor(cube, &sensor, 0.4, MaskMode::PerBand, &mut rng).unwrap()
}

fn target_for(pair: &ConditionPair) -> PhysTarget {
    build_phys_target(pair, &SpectralPrior::new(Tensor::identity(12)).unwrap(), &SpectralIndex::ALL).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn schedule_endpoints_and_products() {
    let s = sched();
    assert_eq!(s.len(), 1000);
    assert!((s.beta()[0] - 1e-4).abs() < 1e-15);
    assert!((s.beta()[999] - 0.02).abs() < 1e-15);
    // Brute-force product against the cumulative scan.
    for t in [0, 1, 10, 250, 500, 999] {
        let prod: f64 = (0..=t).map(|i| 1.0 - s.beta()[i]).product();
        assert!((s.alpha_bar()[t] - prod).abs() < 1e-12 * prod.max(1e-300), "t={t}");
    }
    assert!((s.alpha_bar()[0] - 0.9999).abs() < 1e-15);
    // Known value of the standard linear schedule at the last step.
    assert!((s.alpha_bar()[999] - 4.036e-5).abs() < 1e-7);
    assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
    for t in [0, 400, 999] {
        let (a, b) = s.coefficients(t).unwrap();
        assert!((a * a + b * b - 1.0).abs() < 1e-12);
    }
    assert!(s.coefficients(1000).is_err());
    assert!(NoiseSchedule::linear(1, 1e-4, 0.02).is_err());
    assert!(NoiseSchedule::linear(10, 0.02, 1e-4).is_err());
}

#[test]
fn forward_variance_matches_schedule() {
    let s = sched();
    let t = 300;
    let n = 20000;
    let x0 = Tensor::full(&[n], 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Tensor::from_fn(&[n], |_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng));
    let xt = forward_diffuse(&x0, t, &noise, &s).unwrap();
    let mean = xt.sum() / n as f64;
    let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let ab = s.alpha_bar()[t];
    let se_mean = ((1.0 - ab) / n as f64).sqrt();
    assert!((mean - ab.sqrt() * 0.5).abs() < 4.0 * se_mean);
    assert!((var - (1.0 - ab)).abs() < 4.0 * (1.0 - ab) * (2.0 / n as f64).sqrt());
}

proptest! {
    #[test]
    fn tweedie_inverts_forward(t in 0usize..1000, seed in 0u64..1000) {
        let s = sched();
        let x0 = random(&[4, 3], seed);
        let e = random(&[4, 3], seed + 7);
        let xt = forward_diffuse(&x0, t, &e, &s).unwrap();
        let back = tweedie_x0(&xt, &e, t, &s).unwrap();
        let tol = 1e-9 / s.alpha_bar()[t].sqrt();
        for (a, b) in back.data().iter().zip(x0.data()) {
            prop_assert!((a - b).abs() < tol);
        }
    }

    #[test]
    fn timesteps_descend_to_zero(steps in 2usize..200) {
        let ts = ddim_timesteps(1000, steps).unwrap();
        prop_assert_eq!(ts.len(), steps);
        prop_assert_eq!(ts[0], 999);
        prop_assert_eq!(*ts.last().unwrap(), 0);
        prop_assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }
}

#[test]
fn timestep_edge_cases() {
    assert_eq!(ddim_timesteps(1000, 1).unwrap(), vec![999]);
    assert_eq!(ddim_timesteps(1000, 1000).unwrap(), (0..1000).rev().collect::<Vec<_>>());
    assert!(ddim_timesteps(1000, 0).is_err());
    assert!(ddim_timesteps(10, 11).is_err());
}

#[test]
fn tweedie_tape_matches_closed_form() {
    let s = sched();
    let xt = random(&[2, 2, 3], 1);
    let e = random(&[2, 2, 3], 2);
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(xt.clone()), tape.constant(e.clone()));
    let v = tweedie_on(&mut tape, a, b, 417, &s).unwrap();
    let want = tweedie_x0(&xt, &e, 417, &s).unwrap();
    for (x, y) in tape.value(v).data().iter().zip(want.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn zero_scale_guidance_is_bitwise_identity() {
    let s = sched();
    let cube = scene(1);
    let pair = pair_for(&cube, 2);
    let target = target_for(&pair);
    let eps = random(&[8, 8, 12], 4);
    let xt = random(&[8, 8, 12], 5);
    let out = pgs_inject(&eps, &xt, 500, &target, &s, &GuidanceConfig::unguided(), None).unwrap();
    assert!(out.bit_eq(&eps));

    let net = Denoiser::new(toy_config(), 0).unwrap();
    let a = ddim_sample(&net, &pair, &s, 4, &GuidanceConfig::unguided(), Some(&target), 9).unwrap();
    let b = ddim_sample(&net, &pair, &s, 4, &GuidanceConfig::unguided(), None, 9).unwrap();
    assert!(a.x0.bit_eq(&b.x0));
    assert!(a.l_phy.is_some() && b.l_phy.is_none());
}

#[test]
fn guidance_gradient_matches_finite_differences() {
    let s = sched();
    let cube = scene(3);
    let pair = pair_for(&cube, 4);
    let target = target_for(&pair);
    let eps = random(&[8, 8, 12], 6).map(|v| 0.3 * v);
    let t = 50;
    let xt = forward_diffuse(&cube.to_tensor(), t, &eps, &s).unwrap();
    let cfg = GuidanceConfig::default();
    let g = pgs_gradient(&eps, &xt, t, &target, &s, &cfg, None).unwrap();
    // Central differences of the scalar loss along a handful of coordinates.
    let loss_at = |x: &Tensor| {
        let x0 = tweedie_x0(x, &eps, t, &s).unwrap();
        eval_loss_phy(&x0, &target, &cfg.weights).unwrap()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in [0, 13, 100, 377, 500, 767] {
        let mut up = xt.clone();
        up.data_mut()[i] += h;
        let mut dn = xt.clone();
        dn.data_mut()[i] -= h;
        let num = (loss_at(&up) - loss_at(&dn)) / (2.0 * h);
        let ana = g.data()[i];
        worst = worst.max((ana - num).abs() / num.abs().max(1e-6));
    }
    assert!(worst < 1e-4, "relative error {worst}");
}

#[test]
fn guidance_gradient_full_route_is_checked() {
    let s = sched();
    // Scenes pulled off the dark end of the range: the anchored estimate sits
    // close to the filled condition, and near-zero reflectances give the
    // index ratios a curvature that swamps central differences.
    let interior = |seed: u64| {
        let c = scene(seed);
        let data = c.data().iter().map(|v| 0.8 * v).collect();
        HyperCube::new(8, 8, c.wavelengths().to_vec(), data, c.domain()).unwrap()
    };
    let pair = pair_for(&interior(5), 6);
    let target = target_for(&pair);
    let net = Denoiser::new(toy_config(), 1).unwrap();
    let xt = forward_diffuse(&interior(9).to_tensor(), 20, &random(&[8, 8, 12], 8), &s).unwrap();
    let eps = predict_noise(&net, &xt, 20, &pair, &s).unwrap();
    let cfg = GuidanceConfig {
        route: GradientRoute::FullBackprop,
        ..GuidanceConfig::default()
    };
    assert!(pgs_gradient(&eps, &xt, 20, &target, &s, &cfg, None).is_err());
    let g = pgs_gradient(&eps, &xt, 20, &target, &s, &cfg, Some((&net, &pair))).unwrap();
    assert!(g.is_finite());
    // Fourth-order central differences of the loss with eps recomputed at
    // every probe; the two-point stencil cannot resolve the smallest entries.
    let loss_at = |i: usize, k: f64| {
        let mut x = xt.clone();
        x.data_mut()[i] += k * 1e-4;
        let e = predict_noise(&net, &x, 20, &pair, &s).unwrap();
        eval_loss_phy(&tweedie_x0(&x, &e, 20, &s).unwrap(), &target, &cfg.weights).unwrap()
    };
    let mut worst: f64 = 0.0;
    for i in 0..xt.numel() {
        let num = (8.0 * (loss_at(i, 1.0) - loss_at(i, -1.0)) - (loss_at(i, 2.0) - loss_at(i, -2.0))) / 12e-4;
        worst = worst.max((g.data()[i] - num).abs() / num.abs().max(1e-12));
    }
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn small_guidance_step_lowers_the_loss() {
    let s = sched();
    let cube = scene(7);
    let pair = pair_for(&cube, 8);
    let target = target_for(&pair);
    let t = 100;
    let eps_true = random(&[8, 8, 12], 9);
    let xt = forward_diffuse(&cube.to_tensor(), t, &eps_true, &s).unwrap();
    // A poor noise estimate so the implied clean image has slack to improve.
    let eps_hat = eps_true.map(|v| 0.5 * v);
    let before = eval_loss_phy(&tweedie_x0(&xt, &eps_hat, t, &s).unwrap(), &target, &PhysWeights::default()).unwrap();
    let cfg = GuidanceConfig {
        scale: 1e-3,
        ..GuidanceConfig::default()
    };
    let eps = pgs_inject(&eps_hat, &xt, t, &target, &s, &cfg, None).unwrap();
    let after = eval_loss_phy(&tweedie_x0(&xt, &eps, t, &s).unwrap(), &target, &PhysWeights::default()).unwrap();
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn sampling_is_deterministic_in_seed() {
    let s = sched();
    let cube = scene(11);
    let pair = pair_for(&cube, 12);
    let target = target_for(&pair);
    let net = Denoiser::new(toy_config(), 2).unwrap();
    let g = GuidanceConfig::default();
    let a = ddim_sample(&net, &pair, &s, 3, &g, Some(&target), 1).unwrap();
    let b = ddim_sample(&net, &pair, &s, 3, &g, Some(&target), 1).unwrap();
    let c = ddim_sample(&net, &pair, &s, 3, &g, Some(&target), 2).unwrap();
    assert!(a.x0.bit_eq(&b.x0));
    assert!(!a.x0.bit_eq(&c.x0));
    assert!(a.x0.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(ddim_sample(&net, &pair, &s, 3, &g, None, 1).is_err());
    let neg = GuidanceConfig {
        scale: -1.0,
        ..g
    };
    assert!(ddim_sample(&net, &pair, &s, 3, &neg, Some(&target), 1).is_err());
}

fn toy_checkpoint() -> Checkpoint {
    Checkpoint {
        denoiser: Denoiser::new(toy_config(), 3).unwrap(),
        emulator: Emulator::from_params(Emulator::untrained(12, 4).unwrap().params().clone()).unwrap(),
        schedule: sched(),
        prior: SpectralPrior::estimate(&[generate_scene(8, 8, 12, 1).unwrap().0]).unwrap(),
        wavelengths: crate::specdata::default_wavelengths(12),
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.abd1");
    let ck = toy_checkpoint();
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.denoiser.params().fingerprint(), ck.denoiser.params().fingerprint());
    assert_eq!(back.emulator.params().fingerprint(), ck.emulator.params().fingerprint());
    assert_eq!(back.denoiser.config(), ck.denoiser.config());
    assert_eq!(back.schedule, ck.schedule);
    assert!(back.prior.matrix().bit_eq(ck.prior.matrix()));
    assert_eq!(back.wavelengths, ck.wavelengths);

    let path2 = dir.path().join("again.abd1");
    save_checkpoint(&back, &path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn abd1_rejects_damage() {
    let mut set = crate::gradcore::ParamSet::new();
    set.insert("a", random(&[2, 3], 1));
    set.insert("b/c", Tensor::scalar(4.5));
    let mut bytes = Vec::new();
    write_abd1(&set, &mut bytes).unwrap();
    assert_eq!(&bytes[..4], b"ABD1");
    let back = read_abd1(bytes.as_slice()).unwrap();
    assert!(back.get("a").unwrap().bit_eq(set.get("a").unwrap()));
    assert_eq!(back.get("b/c").unwrap().shape(), &[] as &[usize]);

    for cut in [0, 3, 7, 10, bytes.len() - 1] {
        assert!(matches!(read_abd1(&bytes[..cut]), Err(crate::error::Error::Format(_))), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(read_abd1(bad.as_slice()), Err(crate::error::Error::Format(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(read_abd1(long.as_slice()).is_err());

    let full = toy_checkpoint().to_tensors().unwrap();
    let mut stripped = crate::gradcore::ParamSet::new();
    for (k, v) in full.iter().filter(|(k, _)| k.as_str() != "prior/s") {
        stripped.insert(k.clone(), v.clone());
    }
    assert!(matches!(Checkpoint::from_tensors(&stripped), Err(crate::error::Error::Format(_))));
}

fn toy_trainer_inputs() -> (Vec<HyperCube>, Emulator, SpectralPrior, Vec<SensorSrf>) {
    let data: Vec<HyperCube> = (0..3).map(|i| scene(100 + i)).collect();
    let emulator = Emulator::from_params(Emulator::untrained(12, 4).unwrap().params().clone()).unwrap();
    let prior = SpectralPrior::estimate(&[generate_scene(8, 8, 12, 99).unwrap().0]).unwrap();
    (data, emulator, prior, builtin_library())
}

#[test]
fn zero_physics_weights_leave_only_the_denoising_loss() {
    let s = sched();
    let (data, emulator, prior, library) = toy_trainer_inputs();
    let ctx = TrainContext {
        schedule: &s,
        emulator: &emulator,
        prior: &prior,
        library: &library,
    };
    let cfg = TrainConfig {
        lambda_px: 0.0,
        lambda_reg: 0.0,
        lambda_img: 0.0,
        steps: 2,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let (_, hist) = train(Denoiser::new(toy_config(), 0).unwrap(), &data, &cfg, &ctx, |_| {}).unwrap();
    for h in &hist {
        assert_eq!(h.l_total, h.l_mcd);
        assert_eq!((h.l_pixel, h.l_region, h.l_image), (0.0, 0.0, 0.0));
    }
}

#[test]
fn training_is_reproducible_and_moves_weights() {
    let s = sched();
    let (data, emulator, prior, library) = toy_trainer_inputs();
    let ctx = TrainContext {
        schedule: &s,
        emulator: &emulator,
        prior: &prior,
        library: &library,
    };
    let cfg = TrainConfig {
        steps: 3,
        batch_size: 2,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let init = Denoiser::new(toy_config(), 0).unwrap();
    let (a, ha) = train(init.clone(), &data, &cfg, &ctx, |_| {}).unwrap();
    let (b, hb) = train(init.clone(), &data, &cfg, &ctx, |_| {}).unwrap();
    assert_eq!(a.params().fingerprint(), b.params().fingerprint());
    assert_eq!(ha, hb);
    assert_ne!(a.params().fingerprint(), init.params().fingerprint());
    for h in &ha {
        let sum = h.l_mcd + h.l_pixel + h.l_region + h.l_image;
        assert!((h.l_total - sum).abs() < 1e-12);
        assert!(h.l_total.is_finite());
    }
    // Warmup starts below the base rate.
    assert!(ha[0].lr <= cfg.lr);
}

#[test]
fn trainer_rejects_bad_inputs() {
    let s = sched();
    let (data, _, prior, library) = toy_trainer_inputs();
    let raw = Emulator::untrained(12, 0).unwrap();
    let ctx = TrainContext {
        schedule: &s,
        emulator: &raw,
        prior: &prior,
        library: &library,
    };
    let mut tr = Trainer::new(Denoiser::new(toy_config(), 0).unwrap(), TrainConfig::default()).unwrap();
    assert!(matches!(tr.train_step(&data[..1], &ctx), Err(crate::error::Error::State(_))));
    let phys = crate::specdata::denormalize(&data[0]).unwrap();
    assert!(tr.train_step(&[phys], &ctx).is_err());
    assert!(tr.train_step(&[], &ctx).is_err());
    let bad = TrainConfig {
        lambda_px: -1.0,
        ..TrainConfig::default()
    };
    assert!(Trainer::new(Denoiser::new(toy_config(), 0).unwrap(), bad).is_err());
}

#[test]
fn velocity_head_maps_to_noise() {
    // If the head output were the true v, the noise estimate would be exact.
    let s = sched();
    let x0 = random(&[8, 8, 12], 11);
    let eps = random(&[8, 8, 12], 12);
    for t in [0, 250, 999] {
        let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
        let (a, b) = s.coefficients(t).unwrap();
        let v = eps.zip_map(&x0, |e, u| a * e - b * u).unwrap();
        let back = v.zip_map(&xt, |v, x| a * v + b * x).unwrap();
        assert!(back.zip_map(&eps, |p, q| (p - q).abs()).unwrap().max_abs() < 1e-12);
    }
    let cube = scene(3);
    let pair = pair_for(&cube, 4);
    let xt = random(&[8, 8, 12], 13);
    let fill = crate::denoiser::fill_missing(&pair.c, &pair.m).unwrap();
    for prediction in [Prediction::Epsilon, Prediction::Velocity, Prediction::Anchored] {
        let net = Denoiser::new(DenoiserConfig { prediction, ..toy_config() }, 2).unwrap();
        let raw = net.predict(&xt, 300, &pair).unwrap();
        let eps = predict_noise(&net, &xt, 300, &pair, &s).unwrap();
        let (a, b) = s.coefficients(300).unwrap();
        let want = match prediction {
            Prediction::Epsilon => raw.clone(),
            Prediction::Velocity => raw.zip_map(&xt, |v, x| a * v + b * x).unwrap(),
            Prediction::Anchored => {
                // Direct form: x0_hat from the preconditioned head, then eps.
                let sigma = b / a;
                let sd = net.config().sigma_data;
                let skip = sd * sd / (sigma * sigma + sd * sd);
                let cout = sigma * sd / (sigma * sigma + sd * sd).sqrt();
                let x0 = Tensor::from_fn(&[8, 8, 12], |i| {
                    let f = fill.data()[i];
                    f + skip * (xt.data()[i] / a - f) + cout * raw.data()[i]
                });
                xt.zip_map(&x0, |x, u| (x - a * u) / b).unwrap()
            }
        };
        assert!(eps.zip_map(&want, |p, q| (p - q).abs()).unwrap().max_abs() < 1e-9);
        let mut tape = Tape::new();
        let bound = net.params().bind(&mut tape, false);
        let x = tape.constant(xt.clone());
        let c = tape.constant(pair.c.clone());
        let m = tape.constant(pair.m.clone());
        let e = noise_on(&mut tape, &net, &bound, x, 300, c, m, &s).unwrap();
        assert!(tape.value(e).zip_map(&eps, |p, q| (p - q).abs()).unwrap().max_abs() < 1e-12);
    }
}
