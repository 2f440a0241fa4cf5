//! Run configuration shared by every pipeline and command.
//!
//! Top-level keys are `g1, g2, phi, eta_int, eta_det, mismatch, grid.n_theta,
//! grid.n_q, grid.q_max_mrad, pump_width, pm_width, seed`. Model, detector and
//! estimator settings live in the `model`, `detector` and `estimator` tables.
//! Documents are TOML unless the path ends in `.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimators::RingCombine;
use crate::grid::TransverseGrid;
use crate::sampler::FilterTag;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub n_theta: usize,
    pub n_q: usize,
    pub q_max_mrad: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        let g = TransverseGrid::default();
        Self { n_theta: g.n_theta, n_q: g.n_q, q_max_mrad: g.q_max }
    }
}

impl GridConfig {
    pub fn to_grid(&self) -> Result<TransverseGrid> {
        TransverseGrid::new(self.n_theta, self.n_q, self.q_max_mrad)
    }
}

/// Settings of the multimode model that the measured quantities do not fix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Per-mode gain law `G_k = G * (lambda_k / lambda_max)^gain_exponent`.
    pub gain_exponent: f64,
    /// Extra phase per mode order, `kappa * (2p + |l|)`, picked up between passes.
    pub mode_phase_per_order: f64,
    /// Second-pass pump width relative to the first pass.
    pub pump_ratio: f64,
    /// Upper bound on Schmidt modes kept per pass.
    pub max_modes: usize,
    /// Modes with `G_k / G` below this are left out of the state.
    pub min_gain_fraction: f64,
    /// Replace the multimode model by its strongest mode, identical in both passes.
    pub single_mode: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            gain_exponent: 0.5,
            mode_phase_per_order: 0.0,
            pump_ratio: 1.0,
            max_modes: 1200,
            min_gain_fraction: 1e-3,
            single_mode: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub efficiency: f64,
    /// Additive Gaussian read noise, photons RMS per pixel.
    pub read_noise: f64,
    pub saturation: Option<f64>,
    pub filter: FilterTag,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { efficiency: 1.0, read_noise: 0.0, saturation: None, filter: FilterTag::Degenerate }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    /// Ring radii in mrad; empty selects every row above `ring_floor`.
    pub rings_mrad: Vec<f64>,
    /// Rows whose mean intensity is below this fraction of the peak are not used as rings.
    pub ring_floor: f64,
    /// Extra rings at `q0 +- k dq`, `k = 1..=ring_halfwidth`.
    pub ring_halfwidth: usize,
    pub ring_combine: RingCombine,
    pub bootstrap: usize,
    /// Clamp threshold for negative covariance, in bootstrap standard errors.
    pub clamp_sigma: f64,
    /// Phase points of the dense fringe grid over one period.
    pub phase_points: usize,
    /// Pixels whose calibration intensity is below this fraction of the peak are masked.
    pub intensity_floor: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            rings_mrad: Vec::new(),
            ring_floor: 0.01,
            ring_halfwidth: 1,
            ring_combine: RingCombine::CovarianceMean,
            bootstrap: 200,
            clamp_sigma: 2.0,
            phase_points: 721,
            intensity_floor: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub g1: f64,
    pub g2: f64,
    pub phi: f64,
    pub eta_int: f64,
    pub eta_det: f64,
    pub mismatch: f64,
    pub grid: GridConfig,
    /// First-pass pump width, mrad.
    pub pump_width: f64,
    /// First-pass phase-matching width, mrad.
    pub pm_width: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub detector: DetectorConfig,
    pub estimator: EstimatorConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            g1: 2.1,
            g2: 3.3,
            phi: 0.0,
            eta_int: 1.0,
            eta_det: 1.0,
            mismatch: 1.0,
            grid: GridConfig::default(),
            pump_width: 0.3,
            pm_width: 4.0,
            seed: 0,
            model: ModelConfig::default(),
            detector: DetectorConfig::default(),
            estimator: EstimatorConfig::default(),
        }
    }
}

fn check_unit(name: &'static str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::param(name, format!("must lie in [0, 1], got {v}")))
    }
}

fn check_positive(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::param(name, format!("must be positive and finite, got {v}")))
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let parsed = if is_json { Self::from_json_str(&text) } else { Self::from_toml_str(&text) };
        parsed.map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            Error::InvalidParameter { name, reason } => {
                Error::Config(format!("{}: field `{name}` {reason}", path.display()))
            }
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, g) in [("g1", self.g1), ("g2", self.g2)] {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::param(name, format!("gain must be >= 0, got {g}")));
            }
        }
        if !self.phi.is_finite() {
            return Err(Error::param("phi", "must be finite"));
        }
        check_unit("eta_int", self.eta_int)?;
        check_unit("eta_det", self.eta_det)?;
        check_positive("mismatch", self.mismatch)?;
        check_positive("pump_width", self.pump_width)?;
        check_positive("pm_width", self.pm_width)?;
        self.grid.to_grid()?;
        check_positive("model.pump_ratio", self.model.pump_ratio)?;
        if !(self.model.gain_exponent >= 0.0 && self.model.gain_exponent.is_finite()) {
            return Err(Error::param("model.gain_exponent", "must be >= 0"));
        }
        if !self.model.mode_phase_per_order.is_finite() {
            return Err(Error::param("model.mode_phase_per_order", "must be finite"));
        }
        if self.model.max_modes == 0 {
            return Err(Error::param("model.max_modes", "must be at least 1"));
        }
        check_unit("detector.efficiency", self.detector.efficiency)?;
        if !(self.detector.read_noise >= 0.0) {
            return Err(Error::param("detector.read_noise", "must be >= 0"));
        }
        if let Some(s) = self.detector.saturation {
            check_positive("detector.saturation", s)?;
        }
        if self.estimator.phase_points < 3 {
            return Err(Error::param("estimator.phase_points", "need at least 3"));
        }
        check_unit("estimator.intensity_floor", self.estimator.intensity_floor)?;
        check_unit("estimator.ring_floor", self.estimator.ring_floor)?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }
}
