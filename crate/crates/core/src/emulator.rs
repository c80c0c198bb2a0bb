//! MLP surrogate of the canopy model.
//!
//! The forward net maps `(lai, cab, moisture)` to a spectrum; the inverse net
//! maps a spectrum back to parameters through a sigmoid scaled to the
//! parameter ranges. `forward(inverse(x))` projects a spectrum onto the
//! manifold the canopy model can produce, which is what the image-level loss
//! compares. Once trained, the weights never change.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Error, Result};
use crate::gradcore::{AdamW, AdamWConfig, Bound, ParamSet, Tape, Tensor, Var};
use crate::specdata::{toy_rtm, LandClass, CAB_RANGE, LAI_RANGE, MOISTURE_RANGE};

pub const HIDDEN: usize = 64;
pub const N_PARAMS: usize = 3;
const RANGES: [(f64, f64); N_PARAMS] = [LAI_RANGE, CAB_RANGE, MOISTURE_RANGE];

/// One `(parameters, spectrum)` training example.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralPair {
    pub params: [f64; N_PARAMS],
    pub spectrum: Vec<f64>,
}

/// Uniform parameter draws rendered through the toy model (vegetation class).
pub fn make_pairs(n: usize, seed: u64, wavelengths: &[f64]) -> Result<Vec<SpectralPair>> {
    if n < 100 {
        return Err(domain_err!("make_pairs needs n >= 100, got {n}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let params = RANGES.map(|(lo, hi)| rng.random_range(lo..=hi));
            let spectrum = toy_rtm(params[0], params[1], params[2], LandClass::Vegetation, wavelengths)?;
            Ok(SpectralPair { params, spectrum })
        })
        .collect()
}

fn to_unit(params: &[f64; N_PARAMS]) -> [f64; N_PARAMS] {
    let mut u = [0.0; N_PARAMS];
    for k in 0..N_PARAMS {
        let (lo, hi) = RANGES[k];
        u[k] = (params[k] - lo) / (hi - lo);
    }
    u
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmulatorTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EmulatorTraining {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 2e-3,
            batch_size: 128,
            seed: 0,
        }
    }
}

/// Forward and inverse nets plus training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Emulator {
    params: ParamSet,
    bands: usize,
    trained: bool,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
    /// Round-trip RMSE on the held-out split after training.
    pub holdout_rmse: Option<f64>,
}

fn layer_sizes(net: &str, bands: usize) -> [usize; 4] {
    match net {
        "forward" => [N_PARAMS, HIDDEN, HIDDEN, bands],
        _ => [bands, HIDDEN, HIDDEN, N_PARAMS],
    }
}

impl Emulator {
    /// Freshly initialized, untrained nets.
    pub fn untrained(bands: usize, seed: u64) -> Result<Self> {
        if bands == 0 {
            return Err(domain_err!("emulator needs at least one band"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for net in ["forward", "inverse"] {
            let sizes = layer_sizes(net, bands);
            for l in 0..3 {
                let (i, o) = (sizes[l], sizes[l + 1]);
                params.insert_normal(&format!("{net}/{l}/w"), &[i, o], (1.0 / i as f64).sqrt(), &mut rng);
                params.insert(format!("{net}/{l}/b"), Tensor::zeros(&[o]));
            }
        }
        Ok(Self {
            params,
            bands,
            trained: false,
            loss_history: Vec::new(),
            holdout_rmse: None,
        })
    }

    /// Rebuilds a trained emulator from stored parameters.
    pub fn from_params(params: ParamSet) -> Result<Self> {
        let bands = params.get("forward/2/b")?.numel();
        let reference = Self::untrained(bands, 0)?;
        for (k, v) in reference.params.iter() {
            if params.get(k)?.shape() != v.shape() {
                return Err(shape_err!("emulator parameter {k} has shape {:?}", params.get(k)?.shape()));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Format("unexpected emulator parameters".into()));
        }
        Ok(Self {
            params,
            bands,
            trained: true,
            loss_history: Vec::new(),
            holdout_rmse: None,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn fingerprint(&self) -> u64 {
        self.params.fingerprint()
    }

    fn require_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::State("emulator has not been trained".into()))
        }
    }

    fn mlp(tape: &mut Tape, bound: &Bound, net: &str, x: Var) -> Result<Var> {
        let n = tape.shape(x)[0];
        let mut h = x;
        for l in 0..3 {
            let w = bound.var(&format!("{net}/{l}/w"))?;
            let b = bound.var(&format!("{net}/{l}/b"))?;
            let z = tape.matmul(h, w)?;
            let bias = tape.expand_rows(b, n)?;
            h = tape.add(z, bias)?;
            if l < 2 {
                h = tape.silu(h)?;
            }
        }
        Ok(h)
    }

    /// Spectrum from unit-scaled parameters `[N, 3]`.
    fn forward_unit(tape: &mut Tape, bound: &Bound, u: Var) -> Result<Var> {
        let centred = tape.scale(u, 2.0)?;
        let centred = tape.add_scalar(centred, -1.0)?;
        Self::mlp(tape, bound, "forward", centred)
    }

    /// Unit-scaled parameters from a physical spectrum `[N, B]`.
    fn inverse_unit(tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let centred = tape.scale(x, 2.0)?;
        let centred = tape.add_scalar(centred, -1.0)?;
        let logits = Self::mlp(tape, bound, "inverse", centred)?;
        tape.sigmoid(logits)
    }

    fn check_spectra(&self, shape: &[usize]) -> Result<usize> {
        match shape {
            [n, b] if *b == self.bands => Ok(*n),
            s => Err(shape_err!("emulator expects [N, {}] spectra, got {s:?}", self.bands)),
        }
    }

    /// `forward(inverse(x))` recorded on `tape` with frozen weights.
    pub fn round_trip_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.require_trained()?;
        self.check_spectra(tape.shape(x))?;
        let bound = self.params.bind(tape, false);
        let u = Self::inverse_unit(tape, &bound, x)?;
        Self::forward_unit(tape, &bound, u)
    }

    /// `forward(inverse(x))` for physical spectra `[N, B]`.
    pub fn round_trip(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let r = self.round_trip_on(&mut tape, v)?;
        Ok(tape.value(r).clone())
    }

    /// Spectra for parameters in physical units, `[N, 3]`.
    pub fn forward(&self, params: &Tensor) -> Result<Tensor> {
        self.require_trained()?;
        let n = match params.shape() {
            [n, 3] => *n,
            s => return Err(shape_err!("expected [N, 3] parameters, got {s:?}")),
        };
        let mut unit = Vec::with_capacity(n * 3);
        for row in params.data().chunks(3) {
            unit.extend(to_unit(&[row[0], row[1], row[2]]));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let u = tape.constant(Tensor::new(vec![n, 3], unit)?);
        let y = Self::forward_unit(&mut tape, &bound, u)?;
        Ok(tape.value(y).clone())
    }

    /// Parameter estimates in physical units, `[N, 3]`.
    pub fn inverse(&self, x: &Tensor) -> Result<Tensor> {
        self.require_trained()?;
        self.check_spectra(x.shape())?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let v = tape.constant(x.clone());
        let u = Self::inverse_unit(&mut tape, &bound, v)?;
        let mut out = tape.value(u).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let (lo, hi) = RANGES[i % 3];
            *v = lo + *v * (hi - lo);
        }
        Ok(out)
    }

    /// Mean squared round-trip error per spectrum.
    pub fn round_trip_errors(&self, x: &Tensor) -> Result<Vec<f64>> {
        let r = self.round_trip(x)?;
        let b = self.bands;
        Ok(x
            .data()
            .chunks(b)
            .zip(r.data().chunks(b))
            .map(|(a, c)| a.iter().zip(c).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / b as f64)
            .collect())
    }
}

fn batch_tensors(pairs: &[&SpectralPair], bands: usize) -> Result<(Tensor, Tensor)> {
    let n = pairs.len();
    let mut u = Vec::with_capacity(n * 3);
    let mut x = Vec::with_capacity(n * bands);
    for p in pairs {
        if p.spectrum.len() != bands {
            return Err(shape_err!("spectrum with {} bands, expected {bands}", p.spectrum.len()));
        }
        u.extend(to_unit(&p.params));
        x.extend(&p.spectrum);
    }
    Ok((Tensor::new(vec![n, 3], u)?, Tensor::new(vec![n, bands], x)?))
}

fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

/// Trains both nets jointly on a 90% split: forward-spectrum MSE, inverse
/// parameter MSE and round-trip spectrum MSE. Adam with a cosine schedule.
pub fn train_emulator(pairs: &[SpectralPair], cfg: &EmulatorTraining) -> Result<Emulator> {
    let first = pairs
        .first()
        .ok_or_else(|| domain_err!("train_emulator needs at least one pair"))?;
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(domain_err!("epochs and batch size must be positive"));
    }
    let bands = first.spectrum.len();
    let mut emu = Emulator::untrained(bands, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = if pairs.len() >= 10 { pairs.len() / 10 } else { 0 };
    let (hold, train) = order.split_at(n_hold);
    let mut train = train.to_vec();

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let mut acc = 0.0;
        for chunk in train.chunks(cfg.batch_size) {
            let batch: Vec<&SpectralPair> = chunk.iter().map(|i| &pairs[*i]).collect();
            let (u, x) = batch_tensors(&batch, bands)?;
            let mut tape = Tape::new();
            let bound = emu.params.bind(&mut tape, true);
            let uv = tape.constant(u);
            let xv = tape.constant(x);
            let xf = Emulator::forward_unit(&mut tape, &bound, uv)?;
            let l_fwd = mse(&mut tape, xf, xv)?;
            let ui = Emulator::inverse_unit(&mut tape, &bound, xv)?;
            let l_inv = mse(&mut tape, ui, uv)?;
            let xr = Emulator::forward_unit(&mut tape, &bound, ui)?;
            let l_rt = mse(&mut tape, xr, xv)?;
            let partial = tape.add(l_fwd, l_inv)?;
            let loss = tape.add(partial, l_rt)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("emulator loss diverged in epoch {epoch}")));
            }
            acc += value * chunk.len() as f64;
            let grads = bound.grads(&tape.backward(loss)?)?;
            let lr = crate::gradcore::cosine_lr(cfg.lr, step, total, 0);
            opt.step(&mut emu.params, &grads, lr)?;
            step += 1;
        }
        emu.loss_history.push(acc / train.len() as f64);
    }
    emu.trained = true;
    if !hold.is_empty() {
        let held: Vec<&SpectralPair> = hold.iter().map(|i| &pairs[*i]).collect();
        let (_, x) = batch_tensors(&held, bands)?;
        let errs = emu.round_trip_errors(&x)?;
        emu.holdout_rmse = Some((errs.iter().sum::<f64>() / errs.len() as f64).sqrt());
    }
    log::info!(
        "emulator trained: final loss {:.3e}, held-out rmse {:?}",
        emu.loss_history.last().copied().unwrap_or(f64::NAN),
        emu.holdout_rmse
    );
    Ok(emu)
}
