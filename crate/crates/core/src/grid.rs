use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Polar far-field raster: `n_q` radial rows by `n_theta` azimuthal columns.
///
/// Radial samples sit at bin centres `q_i = (i + 1/2) dq`, azimuthal samples at
/// `theta_j = j dtheta`. Transverse wavevectors are expressed as external
/// emission angles in mrad.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransverseGrid {
    pub n_theta: usize,
    pub n_q: usize,
    pub q_max: f64,
}

impl Default for TransverseGrid {
    fn default() -> Self {
        Self { n_theta: 128, n_q: 128, q_max: 20.0 }
    }
}

impl TransverseGrid {
    pub fn new(n_theta: usize, n_q: usize, q_max: f64) -> Result<Self> {
        let grid = Self { n_theta, n_q, q_max };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_theta < 4 || !self.n_theta.is_multiple_of(2) {
            return Err(Error::param("n_theta", format!("must be even and >= 4, got {}", self.n_theta)));
        }
        if self.n_q == 0 {
            return Err(Error::param("n_q", "must be positive"));
        }
        if !(self.q_max > 0.0 && self.q_max.is_finite()) {
            return Err(Error::param("q_max", format!("must be positive, got {}", self.q_max)));
        }
        Ok(())
    }

    pub fn dq(&self) -> f64 {
        self.q_max / self.n_q as f64
    }

    pub fn dtheta(&self) -> f64 {
        2.0 * PI / self.n_theta as f64
    }

    pub fn q(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dq()
    }

    pub fn theta(&self, j: usize) -> f64 {
        j as f64 * self.dtheta()
    }

    pub fn radii(&self) -> Vec<f64> {
        (0..self.n_q).map(|i| self.q(i)).collect()
    }

    /// Radial quadrature weight `q dq` (the azimuthal integral is handled
    /// analytically by the Fourier sectors).
    pub fn radial_weight(&self, i: usize) -> f64 {
        self.q(i) * self.dq()
    }

    pub fn radial_weights(&self) -> Vec<f64> {
        (0..self.n_q).map(|i| self.radial_weight(i)).collect()
    }

    /// Area of the pixel in row `i`.
    pub fn pixel_area(&self, i: usize) -> f64 {
        self.radial_weight(i) * self.dtheta()
    }

    pub fn n_pixels(&self) -> usize {
        self.n_q * self.n_theta
    }

    /// Largest OAM index that can be represented without azimuthal aliasing.
    pub fn max_oam(&self) -> usize {
        self.n_theta / 2 - 1
    }

    /// Fractional row index of radius `q` (row centres are integers).
    pub fn row_position(&self, q: f64) -> f64 {
        q / self.dq() - 0.5
    }
}
