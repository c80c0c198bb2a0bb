//! `hsdiff`: synthesize scenes, train, repair, sweep the guidance scale and
//! score cubes. Exit codes: 0 ok, 2 usage or domain error, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use hsdiff::diffusion::{load_checkpoint, save_checkpoint, read_abd1, write_abd1, GuidanceConfig, StepLosses};
use hsdiff::emulator::Emulator;
use hsdiff::metrics::{MetricsReport, ReportRow};
use hsdiff::pipeline::{self, RunConfig, SamplingConfig, Split};
use hsdiff::sensorlib::{builtin_library, load_library, MaskMode};
use hsdiff::specdata::{generate_scene, load_hsc1, save_hsc1, HyperCube};

#[derive(Parser)]
#[command(name = "hsdiff", version, about = "Hyperspectral band repair with physics-guided diffusion")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic scenes, their parameter fields and a hash manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        scenes: usize,
        #[arg(long, default_value_t = 16)]
        h: usize,
        #[arg(long, default_value_t = 16)]
        w: usize,
        #[arg(long, default_value_t = 12)]
        bands: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the emulator (unless OUT already holds one) and the denoiser.
    Train {
        /// JSON run config; defaults are used for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// SRF library JSON replacing the builtin sensors.
        #[arg(long)]
        library: Option<PathBuf>,
    },
    /// Mask a cube, repair it and score the repair against the original.
    Repair {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Ground-truth cube (HSC1).
        #[arg(long)]
        cube: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        mask_ratio: f64,
        #[arg(long, value_enum, default_value_t = Mode::PerBand)]
        mode: Mode,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        s: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Guidance-scale sweep at 50% band masking on held-out scenes.
    AblateS {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "0,0.5,1.0,1.5,2.0")]
        values: String,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 10)]
        scenes: usize,
        #[arg(long, default_value_t = 16)]
        h: usize,
        #[arg(long, default_value_t = 16)]
        w: usize,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a predicted cube against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Mode {
    PerBand,
    PerElement,
}

impl From<Mode> for MaskMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::PerBand => MaskMode::PerBand,
            Mode::PerElement => MaskMode::PerElement,
        }
    }
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }
}

impl From<hsdiff::Error> for Failure {
    fn from(e: hsdiff::Error) -> Self {
        let code = if matches!(e, hsdiff::Error::Numeric(_)) { 3 } else { 2 };
        Self { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::usage(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn sha256_file(path: &Path) -> CliResult<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ManifestEntry {
    cube: String,
    cube_sha256: String,
    params: String,
    params_sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    seed: u64,
    height: usize,
    width: usize,
    bands: usize,
    scenes: Vec<ManifestEntry>,
}

fn cmd_synth(out: &Path, n: usize, h: usize, w: usize, bands: usize, seed: u64) -> CliResult {
    // Validate before touching the filesystem.
    generate_scene(h, w, bands, seed)?;
    fs::create_dir_all(out)?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let (cube, params) = generate_scene(h, w, bands, seed + i)?;
        let cube_name = format!("scene_{i:04}.hsc1");
        let params_name = format!("scene_{i:04}.params.json");
        save_hsc1(&cube, &out.join(&cube_name))?;
        fs::write(out.join(&params_name), serde_json::to_vec_pretty(&params)?)?;
        entries.push(ManifestEntry {
            cube_sha256: sha256_file(&out.join(&cube_name))?,
            params_sha256: sha256_file(&out.join(&params_name))?,
            cube: cube_name,
            params: params_name,
        });
    }
    let manifest = Manifest {
        seed,
        height: h,
        width: w,
        bands,
        scenes: entries,
    };
    fs::write(out.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    println!("wrote {n} scenes to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    l_mcd: f64,
    l_pixel: f64,
    l_region: f64,
    l_image: f64,
    lr: f64,
    l_total: f64,
}

impl From<&StepLosses> for LossRow {
    fn from(l: &StepLosses) -> Self {
        Self {
            step: l.step,
            l_mcd: l.l_mcd,
            l_pixel: l.l_pixel,
            l_region: l.l_region,
            l_image: l.l_image,
            lr: l.lr,
            l_total: l.l_total,
        }
    }
}

fn cmd_train(config: Option<&Path>, out: &Path, library: Option<&Path>) -> CliResult {
    let mut cfg = match config {
        Some(p) => RunConfig::from_json(&fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    cfg.out_dir = Some(out.display().to_string());
    cfg.validate()?;
    fs::create_dir_all(out)?;
    // Echo the effective config; training from it reproduces this run.
    fs::write(out.join("config.json"), cfg.to_json()?)?;
    let library = match library {
        Some(p) => load_library(p)?,
        None => builtin_library(),
    };

    let emu_path = out.join("emulator.abd1");
    let emulator = if emu_path.exists() {
        log::info!("reusing {}", emu_path.display());
        Some(Emulator::from_params(read_abd1(fs::File::open(&emu_path)?)?)?)
    } else {
        let e = pipeline::fit_emulator(&cfg)?;
        write_abd1(e.params(), fs::File::create(&emu_path)?)?;
        if let Some(r) = e.holdout_rmse {
            println!("emulator held-out round-trip rmse {r:.5}");
        }
        Some(e)
    };

    let loss_path = out.join("loss.csv");
    let mut writer = csv::Writer::from_path(&loss_path)?;
    let mut last_good: Option<usize> = None;
    let mut write_err: Option<csv::Error> = None;
    let result = pipeline::fit(&cfg, emulator, &library, |l| {
        if write_err.is_none() {
            if let Err(e) = writer.serialize(LossRow::from(l)) {
                write_err = Some(e);
            }
        }
        last_good = Some(l.step);
    });
    writer.flush()?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let (ckpt, history) = result.map_err(|e| {
        let mut f = Failure::from(e);
        let last = last_good.map_or("none".to_string(), |s| s.to_string());
        f.msg = format!("{} (last good step: {last})", f.msg);
        f
    })?;
    save_checkpoint(&ckpt, &out.join("model.abd1"))?;
    if let Some(l) = history.last() {
        println!("trained {} steps, final l_mcd {:.5}", history.len(), l.l_mcd);
    }
    Ok(())
}

/// A [`ReportRow`] plus the guidance settings; csv cannot flatten.
#[derive(Serialize)]
struct RepairRow {
    method: String,
    mask_ratio: Option<f64>,
    seed: Option<u64>,
    psnr: f64,
    ssim: f64,
    rmse: f64,
    sam: f64,
    ndvi_cc: f64,
    ndvi_rmse: f64,
    ndwi_cc: f64,
    ndwi_rmse: f64,
    s: f64,
    l_phy: f64,
}

impl RepairRow {
    fn new(r: ReportRow, s: f64, l_phy: f64) -> Self {
        Self {
            method: r.method,
            mask_ratio: r.mask_ratio,
            seed: r.seed,
            psnr: r.psnr,
            ssim: r.ssim,
            rmse: r.rmse,
            sam: r.sam,
            ndvi_cc: r.ndvi_cc,
            ndvi_rmse: r.ndvi_rmse,
            ndwi_cc: r.ndwi_cc,
            ndwi_rmse: r.ndwi_rmse,
            s,
            l_phy,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_repair(
    checkpoint: &Path,
    cube: &Path,
    mask_ratio: f64,
    mode: MaskMode,
    steps: usize,
    s: f64,
    seed: u64,
    out: &Path,
) -> CliResult {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Failure::usage(format!("--mask-ratio must be in [0, 1), got {mask_ratio}")));
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let truth = load_hsc1(cube)?;
    let sampling = SamplingConfig {
        steps,
        guidance: GuidanceConfig {
            scale: s,
            ..SamplingConfig::default().guidance
        },
    };
    let r = pipeline::repair(&ckpt, &truth, mask_ratio, mode, &sampling, seed)?;
    fs::create_dir_all(out)?;
    save_hsc1(&r.cube, &out.join("repaired.hsc1"))?;
    let row = RepairRow::new(ReportRow::new("repair", Some(mask_ratio), Some(seed), &r.metrics), s, r.l_phy);
    write_csv(&out.join("report.csv"), &[row])?;
    println!(
        "psnr {:.3} dB, ssim {:.4}, sam {:.4}, l_phy {:.5}",
        r.metrics.psnr_db, r.metrics.ssim, r.metrics.sam_radians, r.l_phy
    );
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    kind: &'static str,
    s: f64,
    seed: Option<u64>,
    psnr: f64,
    ssim: f64,
    sam: f64,
    l_phy: f64,
    psnr_std: Option<f64>,
    ssim_std: Option<f64>,
    sam_std: Option<f64>,
    l_phy_std: Option<f64>,
}

fn parse_values(text: &str) -> CliResult<Vec<f64>> {
    let values = text
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Failure::usage(format!("bad guidance scale {v:?}")))
        })
        .collect::<CliResult<Vec<f64>>>()?;
    if values.is_empty() || values.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
        return Err(Failure::usage("guidance scales must be finite and >= 0"));
    }
    Ok(values)
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    checkpoint: &Path,
    values: &str,
    seeds: usize,
    steps: usize,
    n_scenes: usize,
    h: usize,
    w: usize,
    out: &Path,
) -> CliResult {
    let values = parse_values(values)?;
    if seeds == 0 || n_scenes == 0 {
        return Err(Failure::usage("--seeds and --scenes must be positive"));
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let mut cfg = RunConfig::default();
    cfg.data.height = h;
    cfg.data.width = w;
    cfg.data.bands = ckpt.wavelengths.len();
    cfg.data.holdout_scenes = n_scenes;
    let truths: Vec<HyperCube> = pipeline::scenes(&cfg, Split::Holdout)?.into_iter().map(|(c, _)| c).collect();
    let sampling = SamplingConfig {
        steps,
        ..SamplingConfig::default()
    };
    let rows = pipeline::ablate_s(&ckpt, &truths, &values, seeds, 0.5, MaskMode::PerBand, &sampling)?;
    let summary = pipeline::summarize(&rows, &values);
    let mut out_rows: Vec<SweepRow> = rows
        .iter()
        .map(|r| SweepRow {
            kind: "run",
            s: r.s,
            seed: Some(r.seed),
            psnr: r.psnr,
            ssim: r.ssim,
            sam: r.sam,
            l_phy: r.l_phy,
            psnr_std: None,
            ssim_std: None,
            sam_std: None,
            l_phy_std: None,
        })
        .collect();
    for m in &summary {
        println!(
            "s={:<4} psnr {:.3}±{:.3} ssim {:.4} sam {:.4} l_phy {:.5}±{:.5}",
            m.s, m.psnr_mean, m.psnr_std, m.ssim_mean, m.sam_mean, m.l_phy_mean, m.l_phy_std
        );
        out_rows.push(SweepRow {
            kind: "summary",
            s: m.s,
            seed: None,
            psnr: m.psnr_mean,
            ssim: m.ssim_mean,
            sam: m.sam_mean,
            l_phy: m.l_phy_mean,
            psnr_std: Some(m.psnr_std),
            ssim_std: Some(m.ssim_std),
            sam_std: Some(m.sam_std),
            l_phy_std: Some(m.l_phy_std),
        });
    }
    write_csv(out, &out_rows)
}

fn cmd_eval(pred: &Path, truth: &Path, out: &Path) -> CliResult {
    let p = load_hsc1(pred)?;
    let t = load_hsc1(truth)?;
    let m = MetricsReport::evaluate(&p, &t)?;
    write_csv(out, &[ReportRow::new("eval", None, None, &m)])?;
    println!("psnr {:.3} dB, ssim {:.4}, rmse {:.5}, sam {:.5}", m.psnr_db, m.ssim, m.rmse, m.sam_radians);
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.cmd {
        Command::Synth {
            out,
            scenes,
            h,
            w,
            bands,
            seed,
        } => cmd_synth(&out, scenes, h, w, bands, seed),
        Command::Train { config, out, library } => cmd_train(config.as_deref(), &out, library.as_deref()),
        Command::Repair {
            checkpoint,
            cube,
            mask_ratio,
            mode,
            steps,
            s,
            seed,
            out,
        } => cmd_repair(&checkpoint, &cube, mask_ratio, mode.into(), steps, s, seed, &out),
        Command::AblateS {
            checkpoint,
            values,
            seeds,
            steps,
            scenes,
            h,
            w,
            out,
        } => cmd_ablate(&checkpoint, &values, seeds, steps, scenes, h, w, &out),
        Command::Eval { pred, truth, out } => cmd_eval(&pred, &truth, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
