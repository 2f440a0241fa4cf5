//! Simulation and estimation toolkit for a spatially multimode SU(1,1)
//! interferometer built from two cascaded parametric amplifiers.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`]: polar far-field raster shared by every stage.
//! * [`modes`]: double-Gaussian two-photon amplitude, sector-wise Schmidt
//!   decomposition, OAM spectra and mode counts.
//! * [`gaussian`]: multimode Gaussian states and symplectic operations.
//! * [`interferometer`]: OPA, phase, loss, OPA and detection pipeline,
//!   fringe scans and intensity profiles.
//! * [`sampler`]: seeded single-shot intensity frames and the frame-stack
//!   file format.
//! * [`estimators`]: OAM reconstruction from angular intensity covariance,
//!   optical-homodyne quadrature variance and gain fitting.

// `!(x > 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod estimators;
pub mod gaussian;
pub mod grid;
pub mod interferometer;
pub mod io;
pub mod modes;
pub mod sampler;
pub mod tune;

pub use config::{Config, DetectorConfig, EstimatorConfig, GridConfig, ModelConfig};
pub use error::{Error, Result};
pub use estimators::{
    AngularCovariance, GainFit, RingCombine, SqueezingResult, SqueezingScope,
};
pub use gaussian::{GaussianState, OpaOperation};
pub use grid::TransverseGrid;
pub use io::{OutputRecord, RunManifest};
pub use interferometer::{FringeModel, FringeScan, Interferometer, InterferometerConfig, OutputState};
pub use modes::{ModeBasis, ModeFunction, OamSpectrum, PassLabel, SchmidtMode, TwoPhotonAmplitude};
pub use sampler::{DetectorModel, FilterTag, FrameStack};
