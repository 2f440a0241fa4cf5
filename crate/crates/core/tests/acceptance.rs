//! Acceptance suite. Each test writes one `criterion N: PASS|FAIL` line to
//! stderr (outside the test harness capture) and then asserts.
//!
//! The tests share one lock so that the runtime limits are measured without
//! the other criteria competing for the cores.

use std::f64::consts::PI;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use su11_core::estimators::{
    calibrate_c, geometric_covariance, oam_weights_from_covariance, quadrature_variance_estimate,
    quadrature_variance_scoped, squeezing_map, to_db, AngularCovariance, RingCombine,
    RingSamples, SqueezingScope,
};
use su11_core::estimators::oam::default_rings;
use su11_core::interferometer::{fringe_scan, phase_grid, visibility};
use su11_core::modes::effective_mode_number;
use su11_core::sampler::{read_stack, sample_frames, write_stack};
use su11_core::tune::{first_pass_oam_number, fit_eta_int};
use su11_core::{Config, DetectorModel, FilterTag, FrameStack, GaussianState, Interferometer, OamSpectrum, OpaOperation, RunManifest};

static LOCK: Mutex<()> = Mutex::new(());

const OAM_PHASES: [f64; 3] = [0.68, 0.88, 1.08];

fn preset(name: &str) -> Config {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    Config::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Single-mode model; the oracles do not depend on the grid, so a coarse one is used.
fn single_mode(g1: f64, g2: f64) -> Config {
    let mut cfg = Config { g1, g2, pump_width: 1.0, ..Config::default() };
    cfg.grid.n_theta = 16;
    cfg.grid.n_q = 32;
    cfg.model.single_mode = true;
    cfg
}

/// Writes the criterion line, then fails the test if needed.
fn report(n: u32, pass: bool, elapsed: Duration, limit: Option<Duration>, detail: &str) {
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let verdict = if pass && in_time { "PASS" } else { "FAIL" };
    let budget = limit.map(|l| format!(" (limit {:.0} s)", l.as_secs_f64())).unwrap_or_default();
    let line = format!("criterion {n}: {verdict} | {detail} | {:.2} s{budget}\n", elapsed.as_secs_f64());
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
    assert!(in_time, "criterion {n} exceeded its runtime limit");
}

fn rel(a: f64, b: f64) -> f64 {
    if b == 0.0 { a.abs() } else { ((a - b) / b).abs() }
}

#[test]
fn criterion_01_single_mode_oracles() {
    let _g = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for g in [0.0, 1.0, 2.1, 3.3, 5.4] {
        let mut st = GaussianState::vacuum(1).unwrap();
        st.apply_opa(&OpaOperation::single(0, g, 0.0).unwrap()).unwrap();
        worst = worst.max(rel(st.mean_photons(0), g.sinh().powi(2)));
    }
    let it = Interferometer::from_config(&single_mode(2.1, 3.3)).unwrap();
    let bright = it.propagate(2.1, 0.0).unwrap().total_photons();
    let dark = it.propagate(2.1, PI).unwrap().total_photons();
    worst = worst.max(rel(bright, 5.4f64.sinh().powi(2))).max(rel(dark, 1.2f64.sinh().powi(2)));
    let pass = worst < 1e-9;
    let detail = format!("bright {bright:.4}, dark {dark:.6}, worst relative error {worst:.2e} (< 1e-9)");
    report(1, pass, t.elapsed(), Some(Duration::from_secs(1)), &detail);
}

#[test]
fn criterion_02_visibility() {
    let _g = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let phases = phase_grid(720);
    let it = Interferometer::from_config(&single_mode(2.1, 3.3)).unwrap();
    let v_single = visibility(&fringe_scan(&it, &phases, false).unwrap());
    let (b, d) = (5.4f64.sinh().powi(2), 1.2f64.sinh().powi(2));
    let oracle = (b - d) / (b + d);
    let mut cfg = preset("oam.toml");
    cfg.eta_int = 0.95;
    let multi = Interferometer::from_config(&cfg).unwrap();
    let v_multi = visibility(&fringe_scan(&multi, &phase_grid(721), false).unwrap());
    let pass = (v_single - 0.99963).abs() < 1e-4 && (v_single - oracle).abs() < 1e-12 && v_multi > 0.95;
    let detail = format!(
        "single mode {v_single:.6} (oracle {oracle:.6}, target 0.99963 +- 1e-4); multimode mismatch 1.35, eta_int 0.95: {v_multi:.4} (> 0.95)"
    );
    report(2, pass, t.elapsed(), Some(Duration::from_secs(60)), &detail);
}

#[test]
fn criterion_03_covariance_round_trip() {
    let _g = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let r: f64 = 0.7;
    let n = 128;
    let cov = AngularCovariance::from_values(geometric_covariance(r, n)).unwrap();
    let est = oam_weights_from_covariance(&cov, RingCombine::CovarianceMean, 2.0).unwrap();
    let norm = (1.0 - r) / (1.0 + r);
    let l_max = n as i32 / 2 - 1;
    let truth = OamSpectrum::from_raw(-l_max, (-l_max..=l_max).map(|l| norm * r.powi(l.abs())).collect()).unwrap();
    let err = est.spectrum.max_abs_difference(&truth);
    let k = est.effective_number;
    let pass = err < 1e-6 && (k - 10.99).abs() <= 0.01;
    let detail = format!("r = 0.7: max|dLambda| {err:.2e} (< 1e-6), effective number {k:.4} (10.99 +- 0.01)");
    report(3, pass, t.elapsed(), Some(Duration::from_secs(10)), &detail);
}

#[test]
fn criterion_04_monte_carlo_oam() {
    let _g = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let cfg = preset("oam.toml");
    let k_first = first_pass_oam_number(&cfg).unwrap();
    let it = Interferometer::from_config(&cfg).unwrap();
    let grid = *it.grid();
    let model = it.fringe_model(cfg.g1).unwrap();
    let detector = DetectorModel::from_config(&cfg.detector).unwrap();
    let mut spectra = Vec::new();
    let mut numbers = Vec::new();
    for offset in OAM_PHASES {
        let phi = PI + offset;
        // The same seed at every phase: the three estimates share their noise.
        let stack = sample_frames(&model.state_at(phi), phi, 500, cfg.seed, &detector, cfg.detector.filter).unwrap();
        let rings = default_rings(&stack.mean_image(), &grid, cfg.estimator.ring_floor);
        let samples = RingSamples::from_stack(&stack, &grid, &rings, cfg.estimator.ring_halfwidth).unwrap();
        let e = &cfg.estimator;
        let (cov, _) = samples.bootstrap(e.bootstrap, cfg.seed, e.ring_combine, e.clamp_sigma).unwrap();
        let est = oam_weights_from_covariance(&cov, e.ring_combine, e.clamp_sigma).unwrap();
        numbers.push(est.effective_number);
        spectra.push(est.spectrum);
    }
    let mut drift: f64 = 0.0;
    for a in &spectra {
        for b in &spectra {
            drift = drift.max(a.max_abs_difference(b));
        }
    }
    let pass = (k_first - 13.0).abs() <= 1.0 && numbers.iter().all(|k| (k - 7.6).abs() <= 0.5) && drift < 0.01;
    let detail = format!(
        "first pass {k_first:.2} (13 +- 1); 500 frames at pi+{{0.68,0.88,1.08}}: {:.2}, {:.2}, {:.2} (7.6 +- 0.5); drift {drift:.4} (< 0.01)",
        numbers[0], numbers[1], numbers[2]
    );
    report(4, pass, t.elapsed(), Some(Duration::from_secs(600)), &detail);
}

#[test]
fn criterion_05_homodyne_bias() {
    let _g = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let g1 = 1.0;
    let mut rows = Vec::new();
    for g2 in [2.0, 3.0, 4.0] {
        let it = Interferometer::from_config(&single_mode(g1, g2)).unwrap();
        let phases = phase_grid(721);
        let c = calibrate_c(&fringe_scan(&it.with_g1(0.0), &phases, false).unwrap()).unwrap();
        let est = quadrature_variance_estimate(&fringe_scan(&it, &phases, false).unwrap(), c).unwrap();
        // True squeezed quadrature after the first amplifier.
        let mut st = GaussianState::vacuum(1).unwrap();
        st.apply_opa(&OpaOperation::single(0, g1, 0.0).unwrap()).unwrap();
        let truth = (0..721).map(|k| st.moments(0, PI * k as f64 / 720.0).unwrap().1).fold(f64::INFINITY, f64::min);
        rows.push((g2, est.squeezing_db, to_db(truth)));
    }
    let bias: Vec<f64> = rows.iter().map(|r| (r.1 - r.2).abs()).collect();
    let pass = bias[0] > bias[1] && bias[1] > bias[2] && bias[1] < 0.15;
    let detail = rows
        .iter()
        .zip(&bias)
        .map(|(r, b)| format!("G2={}: est {:.3} dB vs true {:.3} dB (bias {b:.3})", r.0, r.1, r.2))
        .collect::<Vec<_>>()
        .join("; ");
    report(5, pass, t.elapsed(), Some(Duration::from_secs(10)), &format!("{detail}; monotone, < 0.15 dB at G2=3"));
}

#[test]
fn criterion_06_detection_loss_tolerance() {
    let _g = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let base = Interferometer::from_config(&preset("oam.toml")).unwrap();
    let phases = phase_grid(721);
    let mut curves = Vec::new();
    for eta in [1.0, 0.5, 0.1] {
        let mut it = base.clone();
        it.config.eta_det = eta;
        let c = calibrate_c(&fringe_scan(&it.with_g1(0.0), &phases, false).unwrap()).unwrap();
        curves.push(quadrature_variance_estimate(&fringe_scan(&it, &phases, false).unwrap(), c).unwrap().variance);
    }
    let dev = curves[1..]
        .iter()
        .flat_map(|c| c.iter().zip(&curves[0]).map(|(a, b)| rel(*a, *b)))
        .fold(0.0, f64::max);
    let pass = dev < 1e-9;
    let detail = format!("eta_det in {{1.0, 0.5, 0.1}}: max relative change of Var_est {dev:.2e} (< 1e-9)");
    report(6, pass, t.elapsed(), Some(Duration::from_secs(10)), &detail);
}

#[test]
fn criterion_07_operating_point() {
    let _g = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let cfg = preset("squeezing.toml");
    let (eta, sq, anti) = fit_eta_int(&cfg, -2.6).unwrap();
    let mut fitted = cfg.clone();
    fitted.eta_int = eta;
    let it = Interferometer::from_config(&fitted).unwrap();
    let phases = phase_grid(cfg.estimator.phase_points);
    let scan = fringe_scan(&it, &phases, true).unwrap();
    let cal = fringe_scan(&it.with_g1(0.0), &[0.0], true).unwrap();
    let cal_image = &cal.per_pixel.as_ref().unwrap()[0];
    // The pattern is azimuthally symmetric, so one column holds every radius.
    let width = it.grid().n_theta;
    let peak = cal_image.iter().copied().fold(0.0, f64::max);
    let mut best = (f64::INFINITY, 0);
    for y in 0..it.grid().n_q {
        let scope = SqueezingScope::Pixel { x: 0, y };
        let c = scope.reduce(cal_image, width).unwrap();
        if c < cfg.estimator.intensity_floor * peak {
            continue;
        }
        let r = quadrature_variance_scoped(&scan, c, scope, Some(width)).unwrap();
        if r.squeezing_db < best.0 {
            best = (r.squeezing_db, y);
        }
    }
    let mut manifest = RunManifest::new("operating-point", Some(&fitted), Some(fitted.seed), String::new());
    manifest.results = serde_json::json!({
        "fit": { "eta_int": eta, "target_squeezing_db": -2.6 },
        "squeezing_db": sq,
        "anti_squeezing_db": anti,
        "best_pixel": { "x": 0, "y": best.1, "squeezing_db": best.0 },
    });
    let out = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("operating_point.json");
    manifest.save(&out).unwrap();
    assert_eq!(RunManifest::load(&out).unwrap().config.unwrap().eta_int, eta);
    let documented = (eta - cfg.eta_int).abs() < 1e-3;
    let pass = (0.0..=1.0).contains(&eta)
        && eta > 0.0
        && (sq + 2.6).abs() <= 0.6
        && (anti - 13.2).abs() <= 0.5
        && best.0 <= -3.6
        && documented;
    let detail = format!(
        "fitted eta_int {eta:.4} (preset documents {:.4}); full frame {sq:.2} dB (-2.6 +- 0.6), anti {anti:.2} dB (13.2 +- 0.5); best pixel row {} {:.2} dB (<= -3.6); manifest {}",
        cfg.eta_int,
        best.1,
        best.0,
        out.display()
    );
    report(7, pass, t.elapsed(), Some(Duration::from_secs(600)), &detail);
}

#[test]
fn criterion_08_dark_fringe_mode_growth() {
    let _g = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let cfg = preset("oam.toml");
    let it = Interferometer::from_config(&cfg).unwrap();
    let model = it.fringe_model(cfg.g1).unwrap();
    let bright = effective_mode_number(&model.state_at(0.0).oam_spectrum().unwrap()).unwrap();
    let dark = effective_mode_number(&model.state_at(PI).oam_spectrum().unwrap()).unwrap();
    let growth = dark / bright - 1.0;
    let pass = (0.15..=0.25).contains(&growth);
    let detail = format!("bright {bright:.2}, dark {dark:.2}: increase {:.1}% (15-25%)", 100.0 * growth);
    report(8, pass, t.elapsed(), Some(Duration::from_secs(60)), &detail);
}

struct MapStats {
    outside_3sigma: f64,
    spread_db: f64,
    inner_db: f64,
    outer_db: f64,
}

/// Monte-Carlo squeezing map around the dark fringe, with per-pixel errors.
fn squeezing_map_statistics(cfg: &Config, frames: usize) -> MapStats {
    let it = Interferometer::from_config(cfg).unwrap();
    let grid = *it.grid();
    let model = it.fringe_model(cfg.g1).unwrap();
    let phases = phase_grid(cfg.estimator.phase_points);
    let dark = phases.iter().copied().min_by(|a, b| model.total(*a).total_cmp(&model.total(*b))).unwrap();
    let detector = DetectorModel::from_config(&cfg.detector).unwrap();
    let filter = FilterTag::Shifted;
    let mut stacks = Vec::new();
    for (k, d) in [-0.1, -0.05, 0.0, 0.05, 0.1].into_iter().enumerate() {
        let phi = dark + d;
        stacks.push(sample_frames(&model.state_at(phi), phi, frames, cfg.seed + k as u64, &detector, filter).unwrap());
    }
    let cal_out = it.with_g1(0.0).propagate(0.0, 0.0).unwrap();
    let cal = sample_frames(&cal_out, 0.0, frames, cfg.seed + 100, &detector, filter).unwrap();
    let images: Vec<Vec<f64>> = stacks.iter().map(FrameStack::mean_image).collect();
    let errors: Vec<Vec<f64>> = stacks.iter().map(FrameStack::mean_standard_error).collect();
    let (c, c_err) = (cal.mean_image(), cal.mean_standard_error());
    let map = squeezing_map(&images, &c, grid.n_theta, cfg.estimator.intensity_floor).unwrap();

    let k = 10.0 / std::f64::consts::LN_10;
    let mut db = Vec::new();
    let mut sigma = Vec::new();
    for i in 0..c.len() {
        if !map.mask[i] {
            continue;
        }
        let j = (0..images.len()).min_by(|&a, &b| (images[a][i]).total_cmp(&images[b][i])).unwrap();
        db.push(map.squeezing_db[i]);
        sigma.push(k * ((errors[j][i] / images[j][i]).powi(2) + (c_err[i] / c[i]).powi(2)).sqrt());
    }
    let wsum: f64 = sigma.iter().map(|s| s.powi(-2)).sum();
    let mean = db.iter().zip(&sigma).map(|(d, s)| d / s.powi(2)).sum::<f64>() / wsum;
    let outside = db.iter().zip(&sigma).filter(|(d, s)| (*d - mean).abs() > 3.0 * *s).count();
    let spread = db.iter().copied().fold(f64::NEG_INFINITY, f64::max) - db.iter().copied().fold(f64::INFINITY, f64::min);
    let rows: Vec<usize> = (0..grid.n_q).filter(|&r| (0..grid.n_theta).any(|x| map.mask[r * grid.n_theta + x])).collect();
    let edge = *rows.last().unwrap() + 1;
    let band = (edge as f64 * 0.2).ceil() as usize;
    MapStats {
        outside_3sigma: outside as f64 / db.len() as f64,
        spread_db: spread,
        inner_db: map.mean_squeezing_in_rows(0..band).unwrap(),
        outer_db: map.mean_squeezing_in_rows(edge - band..edge).unwrap(),
    }
}

#[test]
fn criterion_09_squeezing_map_morphology() {
    let _g = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let mut cfg = preset("squeezing.toml");
    cfg.mismatch = 1.0;
    let flat = squeezing_map_statistics(&cfg, 500);
    // Also with the remaining pass asymmetries of the model switched off.
    cfg.model.pump_ratio = 1.0;
    cfg.model.mode_phase_per_order = 0.0;
    let matched = squeezing_map_statistics(&cfg, 500);
    // Diagnostic only: with uniform per-mode gain the map is flat.
    cfg.model.gain_exponent = 0.0;
    let uniform = squeezing_map_statistics(&cfg, 500);
    let mut cfg = preset("squeezing.toml");
    cfg.mismatch = 1.35;
    let mismatched = squeezing_map_statistics(&cfg, 500);
    // A flat map leaves 0.27% of Gaussian pixels beyond 3 sigma; allow 1%.
    let pass_flat = flat.outside_3sigma <= 0.01;
    let pass_shape = mismatched.outer_db.abs() < mismatched.inner_db.abs();
    let detail = format!(
        "mismatch 1.0: {:.2}% of pixels beyond 3 sigma (<= 1%), spread {:.2} dB [identical passes: {:.2}%, spread {:.2} dB; also uniform gain: {:.2}%, spread {:.2} dB]; mismatch 1.35: inner band {:.2} dB, outer band {:.2} dB",
        100.0 * flat.outside_3sigma,
        flat.spread_db,
        100.0 * matched.outside_3sigma,
        matched.spread_db,
        100.0 * uniform.outside_3sigma,
        uniform.spread_db,
        mismatched.inner_db,
        mismatched.outer_db
    );
    report(9, pass_flat && pass_shape, t.elapsed(), Some(Duration::from_secs(600)), &detail);
}

fn stack_bytes(cfg: &Config, threads: usize) -> Vec<u8> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let it = Interferometer::from_config(cfg).unwrap();
        let out = it.run().unwrap();
        let detector = DetectorModel::from_config(&cfg.detector).unwrap();
        sample_frames(&out, cfg.phi, 40, cfg.seed, &detector, cfg.detector.filter).unwrap().to_bytes().unwrap()
    })
}

#[test]
fn criterion_10_format_and_determinism() {
    let _g = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let mut cfg = Config::default();
    cfg.grid.n_q = 48;
    cfg.grid.n_theta = 64;
    cfg.pump_width = 1.0;
    cfg.detector.read_noise = 0.5;
    let one = stack_bytes(&cfg, 1);
    let again = stack_bytes(&cfg, 1);
    let four = stack_bytes(&cfg, 4);
    let deterministic = one == again && one == four;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("frames.su11");
    let stack = FrameStack::from_bytes(&one).unwrap();
    write_stack(&stack, &path).unwrap();
    let on_disk = std::fs::read(&path).unwrap();
    let back = read_stack(&path).unwrap();
    let round_trip = on_disk == one && back.to_bytes().unwrap() == one && back == stack;
    let empty = FrameStack::new(3, 4, Vec::new(), Vec::new()).unwrap();
    let empty_ok = FrameStack::from_bytes(&empty.to_bytes().unwrap()).unwrap() == empty;
    let pass = deterministic && round_trip && empty_ok;
    let detail = format!(
        "byte-identical reruns {} (1 vs 4 threads {}), write/read round trip {}, empty stack {}",
        one == again,
        one == four,
        round_trip,
        empty_ok
    );
    report(10, pass, t.elapsed(), None, &detail);
}
