use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use su11_core::estimators::oam::default_rings;
use su11_core::estimators::{
    calibrate_c_stack, fit_gain, quadrature_variance_scoped, scan_from_stack, squeezing_map, RingSamples,
};
use su11_core::interferometer::{fringe_scan, phase_grid};
use su11_core::modes::effective_mode_number;
use su11_core::sampler::{read_stack, sample_frames};
use su11_core::{Config, DetectorModel, Error, FrameStack, Interferometer, Result, RunManifest, SqueezingScope};

#[derive(Parser)]
#[command(name = "su11", version, about = "Wide-field SU(1,1) interferometer simulation and estimators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fringe scan and mean intensity rasters of the configured interferometer.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Phases of the intensity rasters, radians.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        phases: Option<Vec<f64>>,
    },
    /// Seeded single-shot frames at one or more phases.
    GenerateFrames {
        #[command(flatten)]
        common: Common,
        /// Frames per phase.
        #[arg(long)]
        frames: usize,
        /// Output frame-stack file.
        #[arg(long)]
        out: PathBuf,
        /// Phases, radians; defaults to `phi` from the config.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        phases: Option<Vec<f64>>,
        /// Block the first amplifier (calibration frames).
        #[arg(long)]
        calibration: bool,
    },
    /// OAM weights from the angular intensity covariance of a frame stack.
    EstimateOam {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stack: PathBuf,
        /// Output CSV; the summary goes to a `.json` sidecar next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrated quadrature variance from a phase scan and a calibration stack.
    EstimateSqueezing {
        #[command(flatten)]
        common: Common,
        /// Frame stack with one or more phase tags.
        #[arg(long)]
        scan: PathBuf,
        /// Frame stack recorded with the first amplifier blocked.
        #[arg(long)]
        calib: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// `full`, `pixel(x,y)` or `rect(x0,y0,x1,y1)`.
        #[arg(long, default_value = "full")]
        roi: String,
        /// Also write per-pixel squeezing and anti-squeezing maps.
        #[arg(long)]
        maps: bool,
    },
    /// Gain from the power dependence of the parametric intensity.
    FitGain {
        /// CSV with columns `power,intensity`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML or JSON config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn to_json(value: &impl serde::Serialize) -> Result<Vec<u8>> {
    serde_json::to_vec_pretty(value).map_err(|e| Error::Format(e.to_string()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::from)
}

fn simulate(common: &Common, out: &Path, phases: Option<Vec<f64>>) -> Result<RunManifest> {
    let cfg = common.load()?;
    create_dir(out)?;
    let mut manifest = RunManifest::new("simulate", Some(&cfg), Some(cfg.seed), timestamp());
    let interf = Interferometer::from_config(&cfg)?;
    let grid = *interf.grid();

    let scan = fringe_scan(&interf, &phase_grid(cfg.estimator.phase_points.max(2) - 1), false)?;
    manifest.write_output(&out.join("fringe.csv"), scan.to_csv().as_bytes())?;

    let first = interf.first_pass_spectrum()?;
    manifest.write_output(&out.join("oam_first_pass.csv"), first.to_csv(None).as_bytes())?;

    let model = interf.fringe_model(cfg.g1)?;
    let phases = phases.unwrap_or_else(|| vec![cfg.phi]);
    let mut rasters = Vec::new();
    for (k, &phi) in phases.iter().enumerate() {
        let state = model.state_at(phi);
        let image: Vec<f32> = state.intensity_profile().iter().map(|&v| v.max(0.0) as f32).collect();
        let mut raster = FrameStack::new(grid.n_q, grid.n_theta, vec![phi], image)?;
        raster.filter = cfg.detector.filter;
        raster.config_hash = Some(cfg.hash());
        let path = out.join(format!("profile_phi{k}.f32"));
        manifest.write_output(&path, &raster.to_bytes()?)?;
        // No spectrum exists without light, e.g. with both gains at zero.
        let oam_number = state.oam_spectrum().and_then(|sp| effective_mode_number(&sp)).ok();
        let sidecar = json!({
            "phase": phi,
            "total_photons": state.total_photons(),
            "oam_effective_number": oam_number,
            "q_max_mrad": grid.q_max,
            "config_hash": cfg.hash(),
        });
        manifest.write_output(&with_suffix(&path, ".json"), &to_json(&sidecar)?)?;
        rasters.push(sidecar);
    }
    let max = scan.totals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = scan.totals.iter().copied().fold(f64::INFINITY, f64::min);
    manifest.results = json!({
        "modes": interf.n_modes(),
        "first_pass_oam_number": effective_mode_number(&first).ok(),
        "fringe_max": max,
        "fringe_min": min,
        "profiles": rasters,
    });
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}

fn generate_frames(
    common: &Common,
    frames: usize,
    out: &Path,
    phases: Option<Vec<f64>>,
    calibration: bool,
) -> Result<RunManifest> {
    let cfg = common.load()?;
    let interf = Interferometer::from_config(&cfg)?;
    let detector = DetectorModel::from_config(&cfg.detector)?;
    let phases = phases.unwrap_or_else(|| vec![cfg.phi]);
    let grid = *interf.grid();
    let mut data = Vec::with_capacity(frames * phases.len() * grid.n_q * grid.n_theta);
    let mut tags = Vec::with_capacity(frames * phases.len());
    let model = if calibration { None } else { Some(interf.fringe_model(cfg.g1)?) };
    let vacuum = if calibration { Some(interf.with_g1(0.0).propagate(0.0, 0.0)?) } else { None };
    for &phi in &phases {
        let state = match &model {
            Some(m) => m.state_at(phi),
            None => vacuum.clone().expect("calibration state"),
        };
        // Same seed at every phase: common random numbers across the scan.
        let stack = sample_frames(&state, phi, frames, cfg.seed, &detector, cfg.detector.filter)?;
        data.extend_from_slice(&stack.data);
        tags.extend_from_slice(&stack.phases);
    }
    let mut stack = FrameStack::new(grid.n_q, grid.n_theta, tags, data)?;
    stack.filter = cfg.detector.filter;
    stack.calibration = calibration;

    let mut manifest = RunManifest::new("generate-frames", Some(&cfg), Some(cfg.seed), timestamp());
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    manifest.write_output(out, &stack.to_bytes()?)?;
    let sidecar = json!({
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "filter": cfg.detector.filter,
        "calibration": calibration,
        "frames_per_phase": frames,
        "phases": phases,
        "q_max_mrad": grid.q_max,
    });
    manifest.write_output(&with_suffix(out, ".json"), &to_json(&sidecar)?)?;
    manifest.save(&with_suffix(out, ".manifest.json"))?;
    Ok(manifest)
}

fn check_raster(stack: &FrameStack, cfg: &Config) -> Result<()> {
    if stack.height != cfg.grid.n_q || stack.width != cfg.grid.n_theta {
        return Err(Error::Format(format!(
            "stack raster is {}x{} but the config grid is {}x{} (n_q x n_theta)",
            stack.height, stack.width, cfg.grid.n_q, cfg.grid.n_theta
        )));
    }
    Ok(())
}

fn estimate_oam(common: &Common, stack_path: &Path, out: &Path) -> Result<RunManifest> {
    let cfg = common.load()?;
    let stack = read_stack(stack_path)?;
    check_raster(&stack, &cfg)?;
    let grid = cfg.grid.to_grid()?;
    let est = &cfg.estimator;
    let mut csv = String::from("phase,l,weight,error\n");
    let mut per_phase = Vec::new();
    let mut spectra = Vec::new();
    for (phase, frames) in stack.split_by_phase() {
        let sub = stack.subset(&frames);
        let rings = if est.rings_mrad.is_empty() {
            default_rings(&sub.mean_image(), &grid, est.ring_floor)
        } else {
            est.rings_mrad.clone()
        };
        let samples = RingSamples::from_stack(&sub, &grid, &rings, est.ring_halfwidth)?;
        let (cov, errors) = samples.bootstrap(est.bootstrap, cfg.seed, est.ring_combine, est.clamp_sigma)?;
        let result = su11_core::estimators::oam_weights_from_covariance(&cov, est.ring_combine, est.clamp_sigma)?;
        for w in &result.warnings {
            log::warn!("phase {phase:.4}: {w}");
        }
        let s = &result.spectrum;
        for (i, w) in s.weights.iter().enumerate() {
            let err = errors.get(i).copied().unwrap_or(f64::NAN);
            csv.push_str(&format!("{phase:.12e},{},{w:.12e},{err:.12e}\n", s.l_min + i as i32));
        }
        per_phase.push(json!({
            "phase": phase,
            "frames": frames.len(),
            "rings_mrad": rings,
            "effective_number": result.effective_number,
            "clamped_fraction": result.clamped_fraction,
            "warnings": result.warnings,
        }));
        spectra.push(result.spectrum);
    }
    let mut max_diff: f64 = 0.0;
    for a in 0..spectra.len() {
        for b in a + 1..spectra.len() {
            max_diff = max_diff.max(spectra[a].max_abs_difference(&spectra[b]));
        }
    }
    let mut manifest = RunManifest::new("estimate-oam", Some(&cfg), Some(cfg.seed), timestamp());
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    manifest.write_output(out, csv.as_bytes())?;
    let summary = json!({
        "stack": stack_path,
        "ring_combine": est.ring_combine,
        "bootstrap": est.bootstrap,
        "phases": per_phase,
        "max_pairwise_weight_difference": max_diff,
    });
    manifest.write_output(&out.with_extension("json"), &to_json(&summary)?)?;
    manifest.results = summary;
    manifest.save(&with_suffix(out, ".manifest.json"))?;
    Ok(manifest)
}

fn estimate_squeezing(
    common: &Common,
    scan_path: &Path,
    calib_path: &Path,
    out: &Path,
    roi: &str,
    maps: bool,
) -> Result<RunManifest> {
    let cfg = common.load()?;
    let scope = SqueezingScope::parse(roi)?;
    let scan_stack = read_stack(scan_path)?;
    let calib = read_stack(calib_path)?;
    if (calib.height, calib.width) != (scan_stack.height, scan_stack.width) {
        return Err(Error::Format(format!(
            "calibration raster {}x{} differs from scan raster {}x{}",
            calib.height, calib.width, scan_stack.height, scan_stack.width
        )));
    }
    if !calib.calibration {
        log::warn!("{} is not flagged as a calibration stack", calib_path.display());
    }
    let c = calibrate_c_stack(&calib, &scope)?;
    let scan = scan_from_stack(&scan_stack)?;
    let result = quadrature_variance_scoped(&scan, c, scope, Some(scan_stack.width))?;

    create_dir(out)?;
    let mut manifest = RunManifest::new("estimate-squeezing", Some(&cfg), Some(cfg.seed), timestamp());
    manifest.write_output(&out.join("squeezing.csv"), result.to_csv().as_bytes())?;
    let summary = json!({
        "scan": scan_path,
        "calibration_stack": calib_path,
        "roi": scope,
        "calibration": c,
        "squeezing_db": result.squeezing_db,
        "anti_squeezing_db": result.anti_squeezing_db,
    });
    if maps {
        let images = scan.per_pixel.as_ref().expect("scan built from a stack has images");
        let map = squeezing_map(images, &calib.mean_image(), scan_stack.width, cfg.estimator.intensity_floor)?;
        // Rasters hold the linear variance (the intensity format is
        // nonnegative); masked pixels are 0.
        for (name, db) in [("variance_min.f32", &map.squeezing_db), ("variance_max.f32", &map.anti_squeezing_db)] {
            let values = db
                .iter()
                .zip(&map.mask)
                .map(|(&v, &used)| if used { 10f64.powf(v / 10.0) as f32 } else { 0.0 })
                .collect();
            let raster = FrameStack::new(map.height, map.width, vec![0.0], values)?;
            manifest.write_output(&out.join(name), &raster.to_bytes()?)?;
        }
        let sidecar = json!({
            "calibration": map.calibration,
            "mask": map.mask,
            "config_hash": cfg.hash(),
        });
        manifest.write_output(&out.join("maps.json"), &to_json(&sidecar)?)?;
    }
    manifest.write_output(&out.join("squeezing.json"), &to_json(&summary)?)?;
    manifest.results = summary;
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}

fn read_power_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Format(format!("{}: missing column `{name}`", path.display())))
    };
    let (ip, ii) = (column("power")?, column("intensity")?);
    let (mut powers, mut values) = (Vec::new(), Vec::new());
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let field = |i: usize| {
            rec.get(i).and_then(|s| s.trim().parse::<f64>().ok()).ok_or_else(|| {
                Error::Format(format!("{}: bad number on data line {}", path.display(), line + 1))
            })
        };
        powers.push(field(ip)?);
        values.push(field(ii)?);
    }
    Ok((powers, values))
}

fn cmd_fit_gain(input: &Path, out: &Path) -> Result<RunManifest> {
    let (powers, values) = read_power_csv(input)?;
    let fit = fit_gain(&powers, &values)?;
    let mut manifest = RunManifest::new("fit-gain", None, None, timestamp());
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    manifest.write_output(out, &to_json(&fit)?)?;
    manifest.results = json!({ "gain": fit.gain, "a": fit.a, "c": fit.c, "rms": fit.rms });
    manifest.save(&with_suffix(out, ".manifest.json"))?;
    Ok(manifest)
}

fn run(cli: Cli) -> Result<RunManifest> {
    match cli.command {
        Command::Simulate { common, out, phases } => simulate(&common, &out, phases),
        Command::GenerateFrames { common, frames, out, phases, calibration } => {
            generate_frames(&common, frames, &out, phases, calibration)
        }
        Command::EstimateOam { common, stack, out } => estimate_oam(&common, &stack, &out),
        Command::EstimateSqueezing { common, scan, calib, out, roi, maps } => {
            estimate_squeezing(&common, &scan, &calib, &out, &roi, maps)
        }
        Command::FitGain { input, out } => cmd_fit_gain(&input, &out),
    }
}

fn configure_threads() -> Result<()> {
    let Ok(text) = std::env::var("SU11_THREADS") else { return Ok(()) };
    let n: usize = text
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("SU11_THREADS must be a positive integer, got `{text}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match configure_threads().and_then(|_| run(cli)) {
        Ok(manifest) => {
            for o in &manifest.outputs {
                println!("{}  {}", o.sha256, o.path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::NonConvergence { trace, .. } = &e {
                for line in trace {
                    eprintln!("  {line}");
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
