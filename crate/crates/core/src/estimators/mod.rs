//! Measurement pipelines: OAM weights from intensity covariance, quadrature
//! variance from the calibrated fringe, and gain from the power dependence.

pub mod gain;
pub mod oam;
pub mod squeezing;

pub use gain::{fit_gain, GainFit};
pub use oam::{
    analytic_angular_covariance, angular_covariance, default_rings, geometric_covariance,
    oam_weights_from_covariance, AngularCovariance, OamEstimate, RingCombine, RingSamples,
};
pub use squeezing::{
    calibrate_c, calibrate_c_stack, quadrature_variance_estimate, quadrature_variance_scoped, scan_from_stack,
    squeezing_map,
    to_db, SqueezingMap, SqueezingResult, SqueezingScope,
};

use crate::config::Config;
use crate::sampler::FilterTag;

/// Switches detection to the shifted filter, which removes the signal-idler
/// cross-correlations from covariance predictions and sampled frames.
pub fn remove_cross_correlations(config: &Config) -> Config {
    let mut out = config.clone();
    out.detector.filter = FilterTag::Shifted;
    out
}
