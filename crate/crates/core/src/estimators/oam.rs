//! OAM spectrum from the azimuthal intensity covariance.
//!
//! With signal-only detection the covariance of two pixels on one ring is
//! `|<a^dag(theta) a(theta')>|^2`, and the normal correlator is the Fourier
//! series of the ring's OAM weights. The weights are therefore the Fourier
//! coefficients of the square root of the covariance.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TransverseGrid;
use crate::interferometer::OutputState;
use crate::modes::{effective_mode_number, OamSpectrum};
use crate::sampler::{FilterTag, FrameStack};

/// How per-ring covariances are merged into one spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RingCombine {
    /// Average the covariance over rings, then take one square root.
    #[default]
    CovarianceMean,
    /// Square root per ring, then sum the rings weighted by their area.
    /// Equals the spectrum of the whole frame only while every per-ring
    /// kernel stays positive; outer rings whose OAM content peaks away from
    /// `l = 0` break this.
    AreaWeightedRoot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngularCovariance {
    /// Lag `theta' - theta` of each bin.
    pub dtheta: Vec<f64>,
    /// Ring radii in mrad.
    pub rings: Vec<f64>,
    /// Area weight of each ring.
    pub ring_weights: Vec<f64>,
    pub per_ring: Vec<Vec<f64>>,
    /// Bootstrap standard error of `per_ring`, when available.
    pub per_ring_se: Option<Vec<Vec<f64>>>,
    /// Covariance averaged over rings.
    pub values: Vec<f64>,
    pub n_frames: usize,
}

impl AngularCovariance {
    /// Single-ring covariance from explicit values at lags `2 pi j / n`.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        if n < 4 || !n.is_multiple_of(2) {
            return Err(Error::param("values", format!("need an even number >= 4 of lags, got {n}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("covariance values must be finite".into()));
        }
        Ok(Self {
            dtheta: (0..n).map(|j| 2.0 * PI * j as f64 / n as f64).collect(),
            rings: vec![0.0],
            ring_weights: vec![1.0],
            per_ring: vec![values.clone()],
            per_ring_se: None,
            values,
            n_frames: 0,
        })
    }

    fn from_rings(rings: Vec<f64>, weights: Vec<f64>, per_ring: Vec<Vec<f64>>, n_frames: usize) -> Self {
        let n = per_ring.first().map_or(0, |r| r.len());
        let mut values = vec![0.0; n];
        for r in &per_ring {
            for (v, x) in values.iter_mut().zip(r) {
                *v += x / per_ring.len() as f64;
            }
        }
        Self {
            dtheta: (0..n).map(|j| 2.0 * PI * j as f64 / n as f64).collect(),
            rings,
            ring_weights: weights,
            per_ring,
            per_ring_se: None,
            values,
            n_frames,
        }
    }

    /// Largest `|C(d) - C(-d)|` relative to `C(0)`.
    pub fn asymmetry(&self) -> f64 {
        let n = self.values.len();
        let scale = self.values[0].abs().max(1e-300);
        (1..n).map(|j| (self.values[j] - self.values[n - j]).abs() / scale).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dtheta,cov\n");
        for (d, v) in self.dtheta.iter().zip(&self.values) {
            out.push_str(&format!("{d:.12e},{v:.12e}\n"));
        }
        out
    }
}

/// Per-frame ring spectra from which covariances and bootstrap replicas are formed.
#[derive(Debug, Clone)]
pub struct RingSamples {
    pub rings: Vec<f64>,
    pub ring_weights: Vec<f64>,
    n_theta: usize,
    /// `[frame][ring * n_theta + k]`: DFT of the ring intensities.
    spectra: Vec<Vec<Complex64>>,
}

/// Radii of the rings actually used: each `q0` plus `q0 +- k dq` for `k <= halfwidth`.
/// Neighbours that fall off the grid are dropped; a `q0` off the grid is an error.
fn expand_rings(grid: &TransverseGrid, q0_set: &[f64], halfwidth: usize) -> Result<Vec<f64>> {
    let (lo, hi) = (grid.q(0), grid.q(grid.n_q - 1));
    let inside = |q: f64| q >= lo - 1e-12 && q <= hi + 1e-12;
    let mut out = Vec::new();
    for &q0 in q0_set {
        if !inside(q0) {
            return Err(Error::param("q0", format!("ring at {q0:.4} mrad lies outside [{lo:.4}, {hi:.4}]")));
        }
        for k in -(halfwidth as i64)..=halfwidth as i64 {
            let q = q0 + k as f64 * grid.dq();
            if inside(q) {
                out.push(q.clamp(lo, hi));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::param("q0", "no rings selected"));
    }
    Ok(out)
}

/// Row-centre radii whose mean intensity exceeds `floor` times the peak row.
pub fn default_rings(mean_image: &[f64], grid: &TransverseGrid, floor: f64) -> Vec<f64> {
    let rows: Vec<f64> = (0..grid.n_q)
        .map(|i| mean_image[i * grid.n_theta..(i + 1) * grid.n_theta].iter().sum::<f64>() / grid.n_theta as f64)
        .collect();
    let peak = rows.iter().copied().fold(0.0, f64::max);
    (0..grid.n_q).filter(|&i| peak > 0.0 && rows[i] >= floor * peak).map(|i| grid.q(i)).collect()
}

impl RingSamples {
    pub fn from_stack(stack: &FrameStack, grid: &TransverseGrid, q0_set: &[f64], halfwidth: usize) -> Result<Self> {
        if stack.height != grid.n_q || stack.width != grid.n_theta {
            return Err(Error::DimensionMismatch { expected: grid.n_pixels(), got: stack.frame_len() });
        }
        if stack.n_frames() < 2 {
            return Err(Error::Domain(format!("need at least 2 frames, got {}", stack.n_frames())));
        }
        if stack.phases.iter().any(|p| p.to_bits() != stack.phases[0].to_bits()) {
            return Err(Error::Contract("angular covariance needs frames sharing one phase tag".into()));
        }
        let rings = expand_rings(grid, q0_set, halfwidth)?;
        let n = grid.n_theta;
        let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
        let interp: Vec<(usize, usize, f64)> = rings
            .iter()
            .map(|&q| {
                let pos = grid.row_position(q).clamp(0.0, (grid.n_q - 1) as f64);
                let i0 = pos.floor() as usize;
                (i0, (i0 + 1).min(grid.n_q - 1), pos - i0 as f64)
            })
            .collect();
        let spectra = (0..stack.n_frames())
            .map(|f| {
                let frame = stack.frame(f);
                let mut out = Vec::with_capacity(rings.len() * n);
                for &(i0, i1, t) in &interp {
                    let mut line: Vec<Complex64> = (0..n)
                        .map(|j| {
                            let v = (1.0 - t) * frame[i0 * n + j] as f64 + t * frame[i1 * n + j] as f64;
                            Complex64::new(v, 0.0)
                        })
                        .collect();
                    fft.process(&mut line);
                    out.extend(line);
                }
                out
            })
            .collect();
        let ring_weights = rings.iter().map(|q| q * grid.dq()).collect();
        Ok(Self { rings, ring_weights, n_theta: n, spectra })
    }

    pub fn n_frames(&self) -> usize {
        self.spectra.len()
    }

    /// Unbiased covariance over the given frames (with repetition allowed).
    fn covariance_of(&self, frames: &[usize]) -> AngularCovariance {
        let n = self.n_theta;
        let f = frames.len() as f64;
        let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
        let mut per_ring = Vec::with_capacity(self.rings.len());
        for r in 0..self.rings.len() {
            let mut power = vec![0.0; n];
            let mut mean = vec![Complex64::new(0.0, 0.0); n];
            for &k in frames {
                let s = &self.spectra[k][r * n..(r + 1) * n];
                for j in 0..n {
                    power[j] += s[j].norm_sqr();
                    mean[j] += s[j];
                }
            }
            let mut buf: Vec<Complex64> = (0..n)
                .map(|j| Complex64::new(power[j] - (mean[j] / f).norm_sqr() * f, 0.0))
                .collect();
            ifft.process(&mut buf);
            let norm = (n * n) as f64 * (f - 1.0);
            per_ring.push(buf.iter().map(|z| z.re / norm).collect());
        }
        AngularCovariance::from_rings(self.rings.clone(), self.ring_weights.clone(), per_ring, frames.len())
    }

    pub fn covariance(&self) -> AngularCovariance {
        let all: Vec<usize> = (0..self.n_frames()).collect();
        self.covariance_of(&all)
    }

    /// Bootstrap over frames: covariance with per-bin standard errors, and the
    /// standard error of each OAM weight.
    pub fn bootstrap(
        &self,
        n_boot: usize,
        seed: u64,
        combine: RingCombine,
        clamp_sigma: f64,
    ) -> Result<(AngularCovariance, Vec<f64>)> {
        let mut cov = self.covariance();
        if n_boot < 2 {
            return Ok((cov, Vec::new()));
        }
        let nf = self.n_frames();
        let n = self.n_theta;
        let nr = self.rings.len();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut s1 = vec![vec![0.0; n]; nr];
        let mut s2 = vec![vec![0.0; n]; nr];
        let mut replicas: Vec<OamSpectrum> = Vec::with_capacity(n_boot);
        for _ in 0..n_boot {
            let pick: Vec<usize> = (0..nf).map(|_| rng.random_range(0..nf)).collect();
            let c = self.covariance_of(&pick);
            for r in 0..nr {
                for j in 0..n {
                    s1[r][j] += c.per_ring[r][j];
                    s2[r][j] += c.per_ring[r][j].powi(2);
                }
            }
            replicas.push(oam_weights_from_covariance(&c, combine, clamp_sigma)?.spectrum);
        }
        let b = n_boot as f64;
        let se = (0..nr)
            .map(|r| (0..n).map(|j| ((s2[r][j] / b - (s1[r][j] / b).powi(2)) * b / (b - 1.0)).max(0.0).sqrt()).collect())
            .collect();
        cov.per_ring_se = Some(se);
        let reference = &replicas[0];
        let err = (0..reference.weights.len())
            .map(|i| {
                let l = reference.l_min + i as i32;
                let m = replicas.iter().map(|s| s.get(l)).sum::<f64>() / b;
                (replicas.iter().map(|s| (s.get(l) - m).powi(2)).sum::<f64>() / (b - 1.0)).sqrt()
            })
            .collect();
        Ok((cov, err))
    }
}

pub fn angular_covariance(
    stack: &FrameStack,
    grid: &TransverseGrid,
    q0_set: &[f64],
    ring_halfwidth: usize,
) -> Result<AngularCovariance> {
    Ok(RingSamples::from_stack(stack, grid, q0_set, ring_halfwidth)?.covariance())
}

/// Wick-theorem covariance of the ring intensities (normally ordered, so
/// without the shot-noise term at zero lag). With the shifted filter the
/// anomalous contribution is dropped.
pub fn analytic_angular_covariance(output: &OutputState, q0_set: &[f64], filter: FilterTag) -> Result<AngularCovariance> {
    let grid = output.grid;
    let rings = expand_rings(&grid, q0_set, 0)?;
    let n = grid.n_theta;
    let per_ring = rings
        .iter()
        .map(|&q| {
            let area = q * grid.dq() * grid.dtheta();
            let kernels = output.ring_kernels(q);
            (0..n)
                .map(|j| {
                    let d = 2.0 * PI * j as f64 / n as f64;
                    let mut normal = Complex64::new(0.0, 0.0);
                    let mut anomalous = Complex64::new(0.0, 0.0);
                    for &(l, nl, ml) in &kernels {
                        normal += nl * Complex64::from_polar(1.0, l as f64 * d);
                        anomalous += ml * Complex64::from_polar(1.0, -(l as f64) * d);
                    }
                    let scale = area / (2.0 * PI);
                    let mut c = (normal * scale).norm_sqr();
                    if filter == FilterTag::Degenerate {
                        c += (anomalous * scale).norm_sqr();
                    }
                    c
                })
                .collect()
        })
        .collect();
    let weights = rings.iter().map(|q| q * grid.dq()).collect();
    Ok(AngularCovariance::from_rings(rings, weights, per_ring, 0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OamEstimate {
    pub spectrum: OamSpectrum,
    pub effective_number: f64,
    /// Fraction of covariance bins clamped to zero.
    pub clamped_fraction: f64,
    /// Returned for the caller to report; nothing is logged here.
    pub warnings: Vec<String>,
}

fn root_spectrum(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v.max(0.0).sqrt(), 0.0)).collect();
    FftPlanner::<f64>::new().plan_fft_forward(n).process(&mut buf);
    // Coefficient of e^{i l d}: bin l for l >= 0, bin n + l for l < 0.
    let l_max = n as i64 / 2 - 1;
    (-l_max..=l_max).map(|l| buf[l.rem_euclid(n as i64) as usize].re / n as f64).collect()
}

/// Negative bins are set to zero. Returns the clamped values, the number
/// clamped and the number lying further than `clamp_sigma` standard errors
/// below zero, which noise alone does not explain.
fn clamp_to_floor(values: &[f64], se: Option<&[f64]>, clamp_sigma: f64) -> (Vec<f64>, usize, usize) {
    let mut clamped = 0;
    let mut negative_lobes = 0;
    let out = values
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            if v >= 0.0 {
                return v;
            }
            clamped += 1;
            if se.is_some_and(|s| v < -clamp_sigma * s[j]) {
                negative_lobes += 1;
            }
            0.0
        })
        .collect();
    (out, clamped, negative_lobes)
}

/// Fourier coefficients of the square root of the clamped covariance,
/// negative coefficients set to zero, normalised.
pub fn oam_weights_from_covariance(cov: &AngularCovariance, combine: RingCombine, clamp_sigma: f64) -> Result<OamEstimate> {
    let n = cov.values.len();
    if n < 4 {
        return Err(Error::Domain("covariance has too few lags".into()));
    }
    let mut warnings = Vec::new();
    let (raw, clamped, beyond, total_bins) = match combine {
        RingCombine::CovarianceMean => {
            let se = cov.per_ring_se.as_ref().map(|s| {
                let k = s.len() as f64;
                (0..n).map(|j| (s.iter().map(|r| r[j] * r[j]).sum::<f64>()).sqrt() / k).collect::<Vec<f64>>()
            });
            let (v, c, b) = clamp_to_floor(&cov.values, se.as_deref(), clamp_sigma);
            (root_spectrum(&v), c, b, n)
        }
        RingCombine::AreaWeightedRoot => {
            let mut acc = vec![0.0; n - 1];
            let (mut c, mut b) = (0, 0);
            for (r, vals) in cov.per_ring.iter().enumerate() {
                let se = cov.per_ring_se.as_ref().map(|s| s[r].as_slice());
                let (v, cr, br) = clamp_to_floor(vals, se, clamp_sigma);
                c += cr;
                b += br;
                for (a, x) in acc.iter_mut().zip(root_spectrum(&v)) {
                    *a += cov.ring_weights[r] * x;
                }
            }
            (acc, c, b, n * cov.per_ring.len())
        }
    };
    let clamped_fraction = clamped as f64 / total_bins.max(1) as f64;
    if clamped_fraction > 0.05 {
        warnings.push(format!("{:.1}% of covariance bins were negative and clamped", 100.0 * clamped_fraction));
    }
    if beyond > 0 {
        warnings.push(format!(
            "{beyond} covariance bins lie more than {clamp_sigma} standard errors below zero (sign ambiguity)"
        ));
    }
    let l_max = n as i32 / 2 - 1;
    let spectrum = OamSpectrum::from_raw(-l_max, raw.into_iter().map(|w| w.max(0.0)).collect())?;
    let effective_number = effective_mode_number(&spectrum)?;
    Ok(OamEstimate { spectrum, effective_number, clamped_fraction, warnings })
}

/// Closed-form covariance `[sum_l r^|l| e^{i l d} (1-r)/(1+r)]^2` of a geometric spectrum.
pub fn geometric_covariance(r: f64, n_theta: usize) -> Vec<f64> {
    let norm = (1.0 - r) / (1.0 + r);
    (0..n_theta)
        .map(|j| {
            let d = 2.0 * PI * j as f64 / n_theta as f64;
            (norm * (1.0 - r * r) / (1.0 - 2.0 * r * d.cos() + r * r)).powi(2)
        })
        .collect()
}
