//! Fits of the free model parameters to measured summary numbers.

use crate::config::Config;
use crate::error::{Error, Result};
use crate::estimators::to_db;
use crate::interferometer::{phase_grid, Interferometer};
use crate::modes::{build_tpa, effective_mode_number, oam_marginal, schmidt_decompose, PassLabel};

/// Effective OAM number of a geometric spectrum `Lambda_l ~ r^|l|`.
pub fn geometric_effective_number(r: f64) -> f64 {
    (1.0 - r * r) / (1.0 + r * r) * ((1.0 + r) / (1.0 - r)).powi(2)
}

/// Pump width giving the requested first-pass OAM mode number for a fixed
/// phase-matching width. In the double-Gaussian model the OAM weights decay
/// as `mu^(2|l|)` with `mu = (s_k - s_p) / (s_k + s_p)`.
pub fn pump_width_for_oam_number(pm_width: f64, target: f64) -> Result<f64> {
    if !(target > 1.0) {
        return Err(Error::param("target", "OAM mode number must exceed 1"));
    }
    let (mut lo, mut hi) = (0.0, 1.0 - 1e-12);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if geometric_effective_number(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mu = (0.5 * (lo + hi)).sqrt();
    Ok(pm_width * (1.0 - mu) / (1.0 + mu))
}

/// First-pass OAM effective number computed on the grid.
pub fn first_pass_oam_number(cfg: &Config) -> Result<f64> {
    let grid = cfg.grid.to_grid()?;
    let tpa = build_tpa(cfg.pump_width, cfg.pm_width, &grid, PassLabel::First)?;
    let basis = schmidt_decompose(&tpa, cfg.model.max_modes)?;
    effective_mode_number(&oam_marginal(&basis)?)
}

/// Full-frame squeezing and anti-squeezing (dB) over a dense phase scan.
pub fn full_frame_squeezing(interf: &Interferometer, phase_points: usize) -> Result<(f64, f64)> {
    let model = interf.fringe_model(interf.config.g1)?;
    let c = interf.calibration()?.total_photons();
    if !(c > 0.0) {
        return Err(Error::Calibration("no output with vacuum input".into()));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for phi in phase_grid(phase_points) {
        let v = model.total(phi) / c;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok((to_db(lo), to_db(hi)))
}

/// Internal transmission reproducing a target full-frame squeezing level.
/// Squeezing weakens monotonically as transmission drops, so bisection applies.
pub fn fit_eta_int(cfg: &Config, target_db: f64) -> Result<(f64, f64, f64)> {
    // The mode structure does not depend on the loss, so it is built once.
    let base = Interferometer::from_config(cfg)?;
    let eval = |eta: f64| -> Result<(f64, f64)> {
        let mut interf = base.clone();
        interf.config.eta_int = eta;
        full_frame_squeezing(&interf, cfg.estimator.phase_points)
    };
    let (best, _) = eval(1.0)?;
    if best > target_db {
        return Err(Error::Calibration(format!(
            "lossless squeezing {best:.2} dB is already weaker than the target {target_db:.2} dB"
        )));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if eval(mid)?.0 > target_db {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-6 {
            break;
        }
    }
    let eta = 0.5 * (lo + hi);
    let (sq, anti) = eval(eta)?;
    Ok((eta, sq, anti))
}
