//! Conditional noise predictor `eps(x_t, t, c, m)`.
//!
//! A micro U-Net over `[C, H, W]` feature maps. Every group normalization is
//! followed by conditional adaptive modulation (CAM): a per-site linear map
//! of the global condition vector `h` gives `(dgamma, beta)` and the output
//! is `(1 + dgamma) * norm(f) + beta`. The projections start at zero, so an
//! untrained network modulates nothing.
//!
//! Beyond the global vector `h`, the input convolution also sees `c` and `m`
//! stacked with `x_t`, which gives the network the per-pixel observations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Error, Result};
use crate::gradcore::{Bound, ParamSet, Tape, Tensor, Var};
use crate::sensorlib::ConditionPair;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub in_bands: usize,
    pub base_width: usize,
    pub channel_multipliers: Vec<usize>,
    pub groups: usize,
    pub h_dim: usize,
    pub encoder_widths: [usize; 2],
    /// Number of diffusion steps `T`; valid timesteps are `0..timesteps`.
    pub timesteps: usize,
    /// Modulate normalized features with the condition vector.
    pub cam: bool,
    /// Stack `c` and `m` onto the network input.
    pub spatial_condition: bool,
    /// What the output head regresses; the diffusion layer turns it into a
    /// noise estimate.
    pub prediction: Prediction,
    /// Spread of the clean signal around the filled condition; only used by
    /// [`Prediction::Anchored`].
    pub sigma_data: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    /// The head output is the noise estimate itself.
    Epsilon,
    /// The head output is `v = sqrt(abar) eps - sqrt(1 - abar) x0`, from
    /// which `eps = sqrt(abar) v + sqrt(1 - abar) x_t`. At high noise the
    /// head then only has to produce `-x0`, which the condition pins down.
    Velocity,
    /// Preconditioned clean estimate around the condition with its gaps
    /// filled ([`fill_missing`]):
    /// `x0_hat = fill + c_skip (x_t / sqrt(abar) - fill) + c_out F`, where
    /// `sigma = sqrt(1 - abar) / sqrt(abar)`,
    /// `c_skip = sd^2 / (sigma^2 + sd^2)` and
    /// `c_out = sigma sd / sqrt(sigma^2 + sd^2)` with `sd = sigma_data`.
    /// A zero head gives the Gaussian posterior mean around the fill at
    /// every noise level, so the network only learns corrections.
    #[default]
    Anchored,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            in_bands: 12,
            base_width: 32,
            channel_multipliers: vec![1, 2],
            groups: 8,
            h_dim: 64,
            encoder_widths: [32, 64],
            timesteps: 1000,
            cam: true,
            spatial_condition: true,
            prediction: Prediction::Anchored,
            sigma_data: 0.00625,
        }
    }
}

fn effective_groups(channels: usize, groups: usize) -> Result<usize> {
    let g = groups.min(channels).max(1);
    if channels % g != 0 {
        return Err(shape_err!("{channels} channels are not divisible into {g} groups"));
    }
    Ok(g)
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return Err(domain_err!("channel multipliers must be non-empty and positive"));
        }
        if self.in_bands == 0 || self.base_width == 0 || self.h_dim == 0 || self.groups == 0 {
            return Err(domain_err!("bands, widths, h_dim and groups must be positive"));
        }
        if self.base_width % 2 != 0 {
            return Err(shape_err!("base width {} must be even for the time embedding", self.base_width));
        }
        if self.timesteps == 0 {
            return Err(domain_err!("timesteps must be positive"));
        }
        if !(self.sigma_data > 0.0) || !self.sigma_data.is_finite() {
            return Err(domain_err!("sigma_data must be positive, got {}", self.sigma_data));
        }
        for c in self.block_channels() {
            effective_groups(c, self.groups)?;
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        self.channel_multipliers.iter().map(|m| m * self.base_width).collect()
    }

    fn time_dim(&self) -> usize {
        4 * self.base_width
    }

    /// Every channel count that passes through a normalization.
    fn block_channels(&self) -> Vec<usize> {
        self.blocks().iter().flat_map(|(_, i, o)| [*i, *o]).collect()
    }

    /// `(name, in, out)` of every residual block in evaluation order.
    fn blocks(&self) -> Vec<(String, usize, usize)> {
        let w = self.widths();
        let mut out = Vec::new();
        let mut c = w[0];
        for (l, wl) in w.iter().enumerate() {
            out.push((format!("down{l}.0"), c, *wl));
            out.push((format!("down{l}.1"), *wl, *wl));
            c = *wl;
        }
        for l in (0..w.len() - 1).rev() {
            out.push((format!("up{l}.0"), c + w[l], w[l]));
            out.push((format!("up{l}.1"), w[l], w[l]));
            c = w[l];
        }
        out
    }

    /// Spatial sizes must survive one halving per extra level.
    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << (self.channel_multipliers.len() - 1).max(1);
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(shape_err!("spatial size {h}x{w} must be a positive multiple of {f}"));
        }
        Ok(())
    }
}

/// Sinusoidal embedding: pairs `(sin, cos)` of `t / 10000^(2i/dim)`.
pub fn time_embed(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 || dim == 0 {
        return Err(shape_err!("time embedding dimension must be even, got {dim}"));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}

/// `(1 + dgamma) * groupnorm(f) + beta` with `(dgamma, beta) = h W + b`.
/// `f` is `[C, H, W]`, `h` is `[D]`, `w` is `[D, 2C]`, `b` is `[2C]`.
pub fn cam_modulate(tape: &mut Tape, f: Var, h: Var, w: Var, b: Var, groups: usize) -> Result<Var> {
    let c = tape.shape(f)[0];
    let d = tape.shape(h)[0];
    if tape.shape(w) != [d, 2 * c] || tape.shape(b) != [2 * c] {
        return Err(shape_err!(
            "CAM site {:?}/{:?} does not match {c} channels and h of {d}",
            tape.shape(w),
            tape.shape(b)
        ));
    }
    let normed = tape.groupnorm(f, effective_groups(c, groups)?)?;
    let row = tape.reshape(h, &[1, d])?;
    let proj = tape.matmul(row, w)?;
    let proj = tape.reshape(proj, &[2 * c])?;
    let proj = tape.add(proj, b)?;
    let dgamma = tape.slice(proj, 0, 0, c)?;
    let beta = tape.slice(proj, 0, c, c)?;
    let gamma = tape.add_scalar(dgamma, 1.0)?;
    tape.affine(normed, gamma, beta)
}

/// `[H, W, C]` to `[C, H, W]`.
fn to_channels(tape: &mut Tape, x: Var) -> Result<Var> {
    let [h, w, c] = match tape.shape(x) {
        [h, w, c] => [*h, *w, *c],
        s => return Err(shape_err!("expected [H, W, C], got {s:?}")),
    };
    let flat = tape.reshape(x, &[h * w, c])?;
    let t = tape.transpose(flat)?;
    tape.reshape(t, &[c, h, w])
}

/// `[C, H, W]` to `[H, W, C]`.
fn to_pixels(tape: &mut Tape, x: Var) -> Result<Var> {
    let [c, h, w] = match tape.shape(x) {
        [c, h, w] => [*c, *h, *w],
        s => return Err(shape_err!("expected [C, H, W], got {s:?}")),
    };
    let flat = tape.reshape(x, &[c, h * w])?;
    let t = tape.transpose(flat)?;
    tape.reshape(t, &[h, w, c])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamSet,
}

struct Ctx<'a> {
    bound: &'a Bound,
    h: Var,
    temb: Var,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let conv = |p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize| {
            p.insert_normal(&format!("{name}/w"), &[cout, cin, 3, 3], (1.0 / (9 * cin) as f64).sqrt(), rng);
            p.insert(format!("{name}/b"), Tensor::zeros(&[cout]));
        };
        let linear = |p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize| {
            p.insert_normal(&format!("{name}/w"), &[i, o], (1.0 / i as f64).sqrt(), rng);
            p.insert(format!("{name}/b"), Tensor::zeros(&[o]));
        };
        let cam = |p: &mut ParamSet, name: &str, c: usize, d: usize| {
            p.insert(format!("{name}/w"), Tensor::zeros(&[d, 2 * c]));
            p.insert(format!("{name}/b"), Tensor::zeros(&[2 * c]));
        };
        let b = config.in_bands;
        let [e1, e2] = config.encoder_widths;
        let d = config.h_dim;
        let td = config.time_dim();
        linear(&mut p, &mut rng, "time", config.base_width, td);
        conv(&mut p, &mut rng, "enc/conv1", 2 * b, e1);
        conv(&mut p, &mut rng, "enc/conv2", e1, e2);
        linear(&mut p, &mut rng, "enc/proj", e2, d);
        let cin = if config.spatial_condition { 3 * b } else { b };
        let w0 = config.widths()[0];
        conv(&mut p, &mut rng, "in", cin, w0);
        for (name, i, o) in config.blocks() {
            cam(&mut p, &format!("{name}/cam1"), i, d);
            conv(&mut p, &mut rng, &format!("{name}/conv1"), i, o);
            linear(&mut p, &mut rng, &format!("{name}/temb"), td, o);
            cam(&mut p, &format!("{name}/cam2"), o, d);
            conv(&mut p, &mut rng, &format!("{name}/conv2"), o, o);
            if i != o {
                linear(&mut p, &mut rng, &format!("{name}/skip"), i, o);
            }
        }
        cam(&mut p, "out/cam", w0, d);
        conv(&mut p, &mut rng, "out", w0, b);
        Ok(Self { config, params: p })
    }

    /// Rebuilds a denoiser from stored parameters, checking every shape.
    pub fn from_params(config: DenoiserConfig, params: ParamSet) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        if params.len() != reference.params.len() {
            return Err(Error::Format(format!(
                "expected {} denoiser tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (k, v) in reference.params.iter() {
            let got = params.get(k)?;
            if got.shape() != v.shape() {
                return Err(shape_err!("{k}: stored {:?}, expected {:?}", got.shape(), v.shape()));
            }
            if !got.is_finite() {
                return Err(Error::Numeric(format!("{k} holds non-finite values")));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn conv(&self, tape: &mut Tape, bound: &Bound, name: &str, x: Var) -> Result<Var> {
        let w = bound.var(&format!("{name}/w"))?;
        let b = bound.var(&format!("{name}/b"))?;
        let y = tape.conv3x3(x, w)?;
        tape.channel_add(y, b)
    }

    fn norm(&self, tape: &mut Tape, ctx: &Ctx, site: &str, f: Var) -> Result<Var> {
        if self.config.cam {
            let w = ctx.bound.var(&format!("{site}/w"))?;
            let b = ctx.bound.var(&format!("{site}/b"))?;
            cam_modulate(tape, f, ctx.h, w, b, self.config.groups)
        } else {
            let c = tape.shape(f)[0];
            tape.groupnorm(f, effective_groups(c, self.config.groups)?)
        }
    }

    fn linear(&self, tape: &mut Tape, bound: &Bound, name: &str, x: Var) -> Result<Var> {
        let w = bound.var(&format!("{name}/w"))?;
        let b = bound.var(&format!("{name}/b"))?;
        let n = tape.shape(w)[0];
        let row = tape.reshape(x, &[1, n])?;
        let y = tape.matmul(row, w)?;
        let o = tape.shape(y)[1];
        let y = tape.reshape(y, &[o])?;
        tape.add(y, b)
    }

    fn res_block(&self, tape: &mut Tape, ctx: &Ctx, name: &str, x: Var) -> Result<Var> {
        let a = self.norm(tape, ctx, &format!("{name}/cam1"), x)?;
        let a = tape.silu(a)?;
        let a = self.conv(tape, ctx.bound, &format!("{name}/conv1"), a)?;
        let t = self.linear(tape, ctx.bound, &format!("{name}/temb"), ctx.temb)?;
        let a = tape.channel_add(a, t)?;
        let a = self.norm(tape, ctx, &format!("{name}/cam2"), a)?;
        let a = tape.silu(a)?;
        let a = self.conv(tape, ctx.bound, &format!("{name}/conv2"), a)?;
        let (cin, cout) = (tape.shape(x)[0], tape.shape(a)[0]);
        let skip = if cin == cout {
            x
        } else {
            // 1x1 projection as a matmul over the flattened map.
            let [h, w] = [tape.shape(x)[1], tape.shape(x)[2]];
            let flat = tape.reshape(x, &[cin, h * w])?;
            let ft = tape.transpose(flat)?;
            let wv = ctx.bound.var(&format!("{name}/skip/w"))?;
            let y = tape.matmul(ft, wv)?;
            let y = tape.transpose(y)?;
            let y = tape.reshape(y, &[cout, h, w])?;
            let b = ctx.bound.var(&format!("{name}/skip/b"))?;
            tape.channel_add(y, b)?
        };
        tape.add(a, skip)
    }

    /// Global condition vector `h` from `c`, `m` (`[H, W, B]` each).
    pub fn encode_condition(&self, tape: &mut Tape, bound: &Bound, c: Var, m: Var) -> Result<Var> {
        if tape.shape(c) != tape.shape(m) {
            return Err(shape_err!("c {:?} vs m {:?}", tape.shape(c), tape.shape(m)));
        }
        let cm = tape.concat(&[c, m], 2)?;
        let x = to_channels(tape, cm)?;
        let a = self.conv(tape, bound, "enc/conv1", x)?;
        let a = tape.silu(a)?;
        let a = tape.avgpool2(a)?;
        let a = self.conv(tape, bound, "enc/conv2", a)?;
        let a = tape.silu(a)?;
        let [ch, h, w] = [tape.shape(a)[0], tape.shape(a)[1], tape.shape(a)[2]];
        let flat = tape.reshape(a, &[ch, h * w])?;
        let pooled = tape.mean_inner(flat)?;
        self.linear(tape, bound, "enc/proj", pooled)
    }

    /// Records the full network on `tape`. Inputs are `[H, W, B]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x_t: Var,
        t: usize,
        c: Var,
        m: Var,
    ) -> Result<Var> {
        let cfg = &self.config;
        let shape = tape.shape(x_t).to_vec();
        if shape.len() != 3 || shape[2] != cfg.in_bands {
            return Err(shape_err!("x_t {shape:?} does not have {} bands", cfg.in_bands));
        }
        if tape.shape(c) != shape.as_slice() || tape.shape(m) != shape.as_slice() {
            return Err(shape_err!("condition shapes differ from x_t {shape:?}"));
        }
        cfg.check_spatial(shape[0], shape[1])?;
        if t >= cfg.timesteps {
            return Err(domain_err!("timestep {t} outside [0, {})", cfg.timesteps));
        }
        let h = self.encode_condition(tape, bound, c, m)?;
        let emb = tape.constant(Tensor::from_vec(time_embed(t, cfg.base_width)?));
        let temb = self.linear(tape, bound, "time", emb)?;
        let temb = tape.silu(temb)?;
        let ctx = Ctx { bound, h, temb };

        let input = if cfg.spatial_condition {
            let filled = fill_missing(tape.value(c), tape.value(m))?;
            let c = tape.constant(filled);
            tape.concat(&[x_t, c, m], 2)?
        } else {
            x_t
        };
        let input = to_channels(tape, input)?;
        let mut f = self.conv(tape, bound, "in", input)?;
        let levels = cfg.channel_multipliers.len();
        let mut skips = Vec::new();
        for l in 0..levels {
            f = self.res_block(tape, &ctx, &format!("down{l}.0"), f)?;
            f = self.res_block(tape, &ctx, &format!("down{l}.1"), f)?;
            if l + 1 < levels {
                skips.push(f);
                f = tape.avgpool2(f)?;
            }
        }
        for l in (0..levels - 1).rev() {
            f = tape.upsample_nearest2(f)?;
            let skip = skips.pop().expect("one skip per pooled level");
            f = tape.concat(&[f, skip], 0)?;
            f = self.res_block(tape, &ctx, &format!("up{l}.0"), f)?;
            f = self.res_block(tape, &ctx, &format!("up{l}.1"), f)?;
        }
        let f = self.norm(tape, &ctx, "out/cam", f)?;
        let f = tape.silu(f)?;
        let out = self.conv(tape, bound, "out", f)?;
        to_pixels(tape, out)
    }

    /// Head output for `x_t` (`[H, W, B]`, normalized) at step `t`; see
    /// [`Prediction`] for its meaning.
    pub fn predict(&self, x_t: &Tensor, t: usize, pair: &ConditionPair) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(x_t.clone());
        let c = tape.constant(pair.c.clone());
        let m = tape.constant(pair.m.clone());
        let y = self.forward(&mut tape, &bound, x, t, c, m)?;
        Ok(tape.value(y).clone())
    }
}

/// Fills unobserved entries of each pixel's spectrum by linear interpolation
/// along the band axis, holding the nearest observed value past either end.
/// Pixels with nothing observed stay at zero. Inputs are `[H, W, B]`.
pub fn fill_missing(c: &Tensor, m: &Tensor) -> Result<Tensor> {
    if c.shape() != m.shape() || c.shape().len() != 3 {
        return Err(shape_err!("fill: c {:?} vs m {:?}", c.shape(), m.shape()));
    }
    let b = c.shape()[2];
    let mut out = c.data().to_vec();
    let mask = m.data();
    let mut seen = Vec::with_capacity(b);
    for (px, spec) in out.chunks_mut(b).enumerate() {
        let mk = &mask[px * b..(px + 1) * b];
        seen.clear();
        seen.extend((0..b).filter(|&k| mk[k] == 1.0));
        let (Some(&first), Some(&last)) = (seen.first(), seen.last()) else {
            continue;
        };
        for k in 0..b {
            if mk[k] == 1.0 {
                continue;
            }
            spec[k] = if k < first {
                spec[first]
            } else if k > last {
                spec[last]
            } else {
                let j = seen.partition_point(|&o| o < k);
                let (lo, hi) = (seen[j - 1], seen[j]);
                let w = (k - lo) as f64 / (hi - lo) as f64;
                (1.0 - w) * spec[lo] + w * spec[hi]
            };
        }
    }
    Tensor::new(c.shape().to_vec(), out)
}
