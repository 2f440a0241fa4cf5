//! Two-photon amplitude of a single OPA pass, its Schmidt decomposition and
//! the OAM spectra derived from it.
//!
//! The amplitude is the double-Gaussian form
//!
//! ```text
//! F(q_s, q_i) = exp(-|q_s + q_i|^2 / (4 sp^2)) * exp(-|q_s - q_i|^2 / (4 sk^2))
//! ```
//!
//! which depends on the two azimuths only through `theta_s - theta_i`. Its
//! azimuthal Fourier series therefore splits into independent radial kernels
//! `f_l(q_s, q_i)`, one per OAM sector, and the Schmidt decomposition is done
//! sector by sector. Signal OAM `l` is always paired with idler OAM `-l`.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TransverseGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PassLabel {
    First,
    Second,
}

impl fmt::Display for PassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PassLabel::First => f.write_str("first"),
            PassLabel::Second => f.write_str("second"),
        }
    }
}

/// Sector-resolved two-photon amplitude, normalised to unit L2 norm on the grid.
#[derive(Debug, Clone)]
pub struct TwoPhotonAmplitude {
    pub pump_width: f64,
    pub pm_width: f64,
    pub pass_label: PassLabel,
    grid: TransverseGrid,
    /// `kernels[l]` holds `f_l(q_a, q_b)` for `l >= 0`; `f_{-l} = f_l`.
    kernels: Vec<DMatrix<f64>>,
    /// Multiplier applied to the analytic form to reach unit norm.
    scale: f64,
}

/// Amplitude FWHM, along one coordinate, of `exp(-q^2 / (4 s^2))`.
fn amplitude_fwhm(width: f64) -> f64 {
    4.0 * width * (2f64.ln()).sqrt()
}

pub fn build_tpa(
    pump_width: f64,
    pm_width: f64,
    grid: &TransverseGrid,
    pass_label: PassLabel,
) -> Result<TwoPhotonAmplitude> {
    if !(pump_width > 0.0 && pump_width.is_finite()) {
        return Err(Error::param("pump_width", format!("must be positive, got {pump_width}")));
    }
    if !(pm_width > 0.0 && pm_width.is_finite()) {
        return Err(Error::param("pm_width", format!("must be positive, got {pm_width}")));
    }
    grid.validate()?;
    let samples = amplitude_fwhm(pump_width.min(pm_width)) / grid.dq();
    if samples < 4.0 {
        return Err(Error::Resolution { samples });
    }
    let edge = (-(grid.q_max / pm_width.max(pump_width)).powi(2)).exp();
    if edge > 1e-6 {
        log::warn!("two-photon amplitude is clipped by the grid edge (edge intensity {edge:.2e})");
    }

    let n_q = grid.n_q;
    let l_max = grid.max_oam();
    let alpha = 0.25 * (pump_width.powi(-2) + pm_width.powi(-2));
    let beta = 0.5 * (pump_width.powi(-2) - pm_width.powi(-2));
    // Azimuthal oversampling: the sector content of exp(-beta q q' cos) spreads
    // to |l| ~ sqrt(|beta|) q.
    let content = 8.0 * beta.abs().sqrt() * grid.q_max + 2.0 * (l_max as f64 + 1.0);
    let n_az = (content.ceil() as usize).max(4 * grid.n_theta).next_power_of_two();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_az);

    let radii = grid.radii();
    let mut kernels = vec![DMatrix::<f64>::zeros(n_q, n_q); l_max + 1];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_az];
    for a in 0..n_q {
        for b in a..n_q {
            let (qa, qb) = (radii[a], radii[b]);
            let base = -alpha * (qa * qa + qb * qb);
            if base + beta.abs() * qa * qb < -700.0 {
                continue;
            }
            for (j, z) in buf.iter_mut().enumerate() {
                let dth = 2.0 * PI * j as f64 / n_az as f64;
                *z = Complex64::new((base - beta * qa * qb * dth.cos()).exp(), 0.0);
            }
            fft.process(&mut buf);
            for (l, kernel) in kernels.iter_mut().enumerate() {
                let v = buf[l].re / n_az as f64;
                kernel[(a, b)] = v;
                kernel[(b, a)] = v;
            }
        }
    }

    let w = grid.radial_weights();
    let mut norm2 = 0.0;
    for (l, k) in kernels.iter().enumerate() {
        let mult = if l == 0 { 1.0 } else { 2.0 };
        let mut s = 0.0;
        for a in 0..n_q {
            for b in 0..n_q {
                s += w[a] * w[b] * k[(a, b)].powi(2);
            }
        }
        norm2 += mult * s;
    }
    norm2 *= (2.0 * PI).powi(2);
    if norm2 <= 0.0 {
        return Err(Error::Domain("two-photon amplitude vanishes on the grid".into()));
    }
    let scale = norm2.sqrt().recip();
    for k in kernels.iter_mut() {
        *k *= scale;
    }
    Ok(TwoPhotonAmplitude { pump_width, pm_width, pass_label, grid: *grid, kernels, scale })
}

impl TwoPhotonAmplitude {
    pub fn grid(&self) -> &TransverseGrid {
        &self.grid
    }

    pub fn max_oam(&self) -> usize {
        self.kernels.len() - 1
    }

    /// Radial kernel of OAM sector `l` (signal `l`, idler `-l`).
    pub fn sector_kernel(&self, l: i32) -> &DMatrix<f64> {
        &self.kernels[l.unsigned_abs() as usize]
    }

    /// Normalised amplitude at Cartesian transverse wavevectors (mrad).
    pub fn value(&self, qs: [f64; 2], qi: [f64; 2]) -> f64 {
        let sum = (qs[0] + qi[0]).powi(2) + (qs[1] + qi[1]).powi(2);
        let diff = (qs[0] - qi[0]).powi(2) + (qs[1] - qi[1]).powi(2);
        self.scale
            * (-sum / (4.0 * self.pump_width.powi(2)) - diff / (4.0 * self.pm_width.powi(2))).exp()
    }

    /// Width ratio `pm_width / pump_width`, the single shape parameter of the model.
    pub fn width_ratio(&self) -> f64 {
        self.pm_width / self.pump_width
    }
}

/// Radial profile times `exp(i l theta) / sqrt(2 pi)`.
///
/// `radial` holds `R(q_i)` at the grid rows, normalised so that
/// `sum_i q_i dq R(q_i)^2 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeFunction {
    pub l: i32,
    pub radial: Vec<f64>,
}

impl ModeFunction {
    pub fn value(&self, grid: &TransverseGrid, row: usize, col: usize) -> Complex64 {
        let th = grid.theta(col);
        Complex64::from_polar(self.radial[row] / (2.0 * PI).sqrt(), self.l as f64 * th)
    }

    /// Overlap `<self|other>` on the grid.
    pub fn overlap(&self, other: &ModeFunction, grid: &TransverseGrid) -> f64 {
        if self.l != other.l {
            return 0.0;
        }
        (0..grid.n_q).map(|i| grid.radial_weight(i) * self.radial[i] * other.radial[i]).sum()
    }

    /// Fraction of azimuthal power carried by the dominant Fourier component
    /// when the function is rastered with its azimuthal origin at `origin`.
    pub fn azimuthal_purity(&self, grid: &TransverseGrid, origin: f64) -> (i32, f64) {
        let n = grid.n_theta;
        let mut planner = FftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(n);
        let mut power = vec![0.0; n];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for i in 0..grid.n_q {
            if self.radial[i] == 0.0 {
                continue;
            }
            for (j, z) in buf.iter_mut().enumerate() {
                *z = Complex64::from_polar(self.radial[i], self.l as f64 * (grid.theta(j) + origin));
            }
            fft.process(&mut buf);
            for (p, z) in power.iter_mut().zip(&buf) {
                *p += grid.radial_weight(i) * z.norm_sqr();
            }
        }
        let total: f64 = power.iter().sum();
        let (idx, best) = power
            .iter()
            .enumerate()
            .fold((0, 0.0), |acc, (k, &p)| if p > acc.1 { (k, p) } else { acc });
        let l = if idx >= n / 2 { idx as i32 - n as i32 } else { idx as i32 };
        (l, if total > 0.0 { best / total } else { 0.0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchmidtMode {
    pub function: ModeFunction,
    /// Schmidt weight `lambda_k` (squared Schmidt coefficient).
    pub weight: f64,
    /// Radial order within the OAM sector, 0 for the strongest.
    pub radial_index: usize,
    /// Sign of the sector eigenvalue; the idler partner carries it.
    pub sign: f64,
    /// Azimuthal power fraction in `function.l`.
    pub purity: f64,
}

impl SchmidtMode {
    pub fn l(&self) -> i32 {
        self.function.l
    }
}

/// Schmidt modes of one pass, sorted by descending weight.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeBasis {
    pub grid: TransverseGrid,
    pub pass_label: PassLabel,
    pub modes: Vec<SchmidtMode>,
    /// Sum of the weights that were dropped by truncation.
    pub truncation_deficit: f64,
    /// Modes whose dominant azimuthal component carries < 99% of their power.
    pub flagged: Vec<usize>,
}

/// Keep modes until cumulative weight reaches this value.
pub const TRUNCATION_TARGET: f64 = 0.999;

pub fn schmidt_decompose(tpa: &TwoPhotonAmplitude, max_modes: usize) -> Result<ModeBasis> {
    if max_modes == 0 {
        return Err(Error::param("max_modes", "must be at least 1"));
    }
    let grid = *tpa.grid();
    let w = grid.radial_weights();
    let sqrt_w: Vec<f64> = w.iter().map(|x| x.sqrt()).collect();
    let n_q = grid.n_q;

    // (l >= 0, radial index, nu, radial profile)
    let mut sector_modes: Vec<(i32, usize, f64, Vec<f64>)> = Vec::new();
    for l in 0..=tpa.max_oam() {
        let k = tpa.sector_kernel(l as i32);
        let m = DMatrix::from_fn(n_q, n_q, |a, b| sqrt_w[a] * k[(a, b)] * sqrt_w[b]);
        let eig = SymmetricEigen::new(m);
        let mut order: Vec<usize> = (0..n_q).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].abs().total_cmp(&eig.eigenvalues[i].abs()));
        for (p, &idx) in order.iter().enumerate() {
            let nu = eig.eigenvalues[idx];
            let lam = (2.0 * PI * nu).powi(2);
            if lam < 1e-14 {
                break;
            }
            let v = eig.eigenvectors.column(idx);
            let mut radial: Vec<f64> = (0..n_q).map(|a| v[a] / sqrt_w[a]).collect();
            // Fix the overall sign so that the profile is positive where it peaks.
            let peak = (0..n_q).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap_or(0);
            if v[peak] < 0.0 {
                radial.iter_mut().for_each(|x| *x = -*x);
            }
            sector_modes.push((l as i32, p, nu, radial));
        }
    }

    // Expand to signed sectors and sort by weight; l and -l stay adjacent.
    let mut entries: Vec<SchmidtMode> = Vec::new();
    for (l, p, nu, radial) in sector_modes {
        let weight = (2.0 * PI * nu).powi(2);
        let sign = if nu < 0.0 { -1.0 } else { 1.0 };
        let ls: &[i32] = if l == 0 { &[0] } else { &[l, -l] };
        for &sl in ls {
            entries.push(SchmidtMode {
                function: ModeFunction { l: sl, radial: radial.clone() },
                weight,
                radial_index: p,
                sign,
                purity: 1.0,
            });
        }
    }
    entries.sort_by(|a, b| {
        b.weight
            .total_cmp(&a.weight)
            .then(a.l().abs().cmp(&b.l().abs()))
            .then(b.l().cmp(&a.l()))
    });

    let total: f64 = entries.iter().map(|m| m.weight).sum();
    let mut kept = Vec::new();
    let mut cum = 0.0;
    let mut iter = entries.into_iter().peekable();
    while let Some(mode) = iter.next() {
        if cum >= TRUNCATION_TARGET * total || kept.len() >= max_modes {
            break;
        }
        cum += mode.weight;
        let needs_partner = mode.l() > 0;
        kept.push(mode);
        if needs_partner {
            if let Some(partner) = iter.next() {
                cum += partner.weight;
                kept.push(partner);
            }
        }
    }

    let mut flagged = Vec::new();
    for (i, mode) in kept.iter_mut().enumerate() {
        let (dominant, purity) = mode.function.azimuthal_purity(&grid, 0.0);
        mode.purity = purity;
        if dominant != mode.l() || purity < 0.99 {
            flagged.push(i);
        }
    }
    Ok(ModeBasis {
        grid,
        pass_label: tpa.pass_label,
        modes: kept,
        truncation_deficit: (1.0 - cum).max(0.0),
        flagged,
    })
}

impl ModeBasis {
    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.weight).collect()
    }

    /// Schmidt number `1 / sum lambda^2` of the retained (renormalised) weights.
    pub fn schmidt_number(&self) -> f64 {
        let total: f64 = self.modes.iter().map(|m| m.weight).sum();
        let s2: f64 = self.modes.iter().map(|m| (m.weight / total).powi(2)).sum();
        s2.recip()
    }

    pub fn max_weight(&self) -> f64 {
        self.modes.iter().map(|m| m.weight).fold(0.0, f64::max)
    }

    /// Modes of sector `l`, in descending weight.
    pub fn sector(&self, l: i32) -> impl Iterator<Item = &SchmidtMode> {
        self.modes.iter().filter(move |m| m.l() == l)
    }

    /// Largest `|G - I|` entry of the Gram matrix of the mode functions.
    pub fn gram_deviation(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, a) in self.modes.iter().enumerate() {
            for b in &self.modes[i..] {
                let g = a.function.overlap(&b.function, &self.grid);
                let target = if std::ptr::eq(a, b) { 1.0 } else { 0.0 };
                worst = worst.max((g - target).abs());
            }
        }
        worst
    }
}

/// Normalised OAM weights `Lambda_l` for `l` in `[l_min, l_min + len)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OamSpectrum {
    pub l_min: i32,
    pub weights: Vec<f64>,
}

impl OamSpectrum {
    /// Builds a spectrum from raw nonnegative weights, normalising to unit sum.
    pub fn from_raw(l_min: i32, raw: Vec<f64>) -> Result<Self> {
        if raw.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Domain("OAM weights must be finite and nonnegative".into()));
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(Error::Domain("OAM spectrum has zero total weight".into()));
        }
        Ok(Self { l_min, weights: raw.into_iter().map(|w| w / total).collect() })
    }

    /// Symmetric spectrum from weights indexed by `|l|`.
    pub fn from_symmetric(half: &[f64]) -> Result<Self> {
        let l_max = half.len().saturating_sub(1) as i32;
        let raw = (-l_max..=l_max).map(|l| half[l.unsigned_abs() as usize]).collect();
        Self::from_raw(-l_max, raw)
    }

    pub fn l_max(&self) -> i32 {
        self.l_min + self.weights.len() as i32 - 1
    }

    pub fn get(&self, l: i32) -> f64 {
        let idx = l - self.l_min;
        if idx < 0 || idx as usize >= self.weights.len() {
            0.0
        } else {
            self.weights[idx as usize]
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (i32, f64)> + '_ {
        self.weights.iter().enumerate().map(|(i, &w)| (self.l_min + i as i32, w))
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Largest `|Lambda_l - Lambda_{-l}|`.
    pub fn asymmetry(&self) -> f64 {
        let l_top = self.l_max().max(-self.l_min);
        (0..=l_top).map(|l| (self.get(l) - self.get(-l)).abs()).fold(0.0, f64::max)
    }

    pub fn max_abs_difference(&self, other: &OamSpectrum) -> f64 {
        let lo = self.l_min.min(other.l_min);
        let hi = self.l_max().max(other.l_max());
        (lo..=hi).map(|l| (self.get(l) - other.get(l)).abs()).fold(0.0, f64::max)
    }

    pub fn to_csv(&self, errors: Option<&[f64]>) -> String {
        let mut out = String::from(if errors.is_some() { "l,weight,error\n" } else { "l,weight\n" });
        for (i, (l, w)) in self.iter().enumerate() {
            match errors {
                Some(e) => out.push_str(&format!("{l},{w:.12e},{:.6e}\n", e[i])),
                None => out.push_str(&format!("{l},{w:.12e}\n")),
            }
        }
        out
    }
}

pub fn oam_marginal(basis: &ModeBasis) -> Result<OamSpectrum> {
    if basis.is_empty() {
        return Err(Error::Domain("empty mode basis".into()));
    }
    let l_max = basis.modes.iter().map(|m| m.l().abs()).max().unwrap_or(0);
    let mut raw = vec![0.0; (2 * l_max + 1) as usize];
    for m in &basis.modes {
        raw[(m.l() + l_max) as usize] += m.weight;
    }
    OamSpectrum::from_raw(-l_max, raw)
}

/// Inverse participation ratio `(sum Lambda_l^2)^-1`.
pub fn effective_mode_number(spectrum: &OamSpectrum) -> Result<f64> {
    let total = spectrum.total();
    if !(total > 0.0) {
        return Err(Error::Domain("effective mode number of an all-zero spectrum".into()));
    }
    let s2: f64 = spectrum.weights.iter().map(|w| (w / total).powi(2)).sum();
    Ok(s2.recip())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid() -> TransverseGrid {
        TransverseGrid::new(64, 64, 8.0).unwrap()
    }

    #[test]
    fn equal_widths_give_a_single_mode() {
        let tpa = build_tpa(1.0, 1.0, &small_grid(), PassLabel::First).unwrap();
        let basis = schmidt_decompose(&tpa, 50).unwrap();
        assert_eq!(basis.modes[0].l(), 0);
        assert!((basis.modes[0].weight - 1.0).abs() < 1e-9, "{}", basis.modes[0].weight);
        assert_eq!(basis.len(), 1);
    }

    #[test]
    fn exchange_symmetry_is_exact() {
        let tpa = build_tpa(0.4, 2.0, &small_grid(), PassLabel::First).unwrap();
        let pts = [[0.3, -1.2], [2.0, 0.5], [-0.7, 0.1], [1.1, 1.1]];
        for a in pts {
            for b in pts {
                assert_eq!(tpa.value(a, b), tpa.value(b, a));
            }
        }
    }

    #[test]
    fn coarse_grid_is_a_resolution_error() {
        let grid = TransverseGrid::new(64, 16, 8.0).unwrap();
        match build_tpa(0.2, 2.0, &grid, PassLabel::First) {
            Err(Error::Resolution { samples }) => assert!(samples < 4.0),
            other => panic!("expected resolution error, got {other:?}"),
        }
        assert!(build_tpa(0.0, 2.0, &grid, PassLabel::First).is_err());
    }

    #[test]
    fn basis_is_orthonormal_and_paired() {
        let tpa = build_tpa(0.4, 2.0, &small_grid(), PassLabel::First).unwrap();
        let basis = schmidt_decompose(&tpa, 400).unwrap();
        assert!(basis.gram_deviation() < 1e-6);
        assert!(basis.flagged.is_empty());
        let total: f64 = basis.weights().iter().sum();
        assert!(total <= 1.0 + 1e-9 && 1.0 - total < 2e-3);
        for m in basis.modes.iter().filter(|m| m.l() > 0) {
            let partner = basis
                .sector(-m.l())
                .find(|p| p.radial_index == m.radial_index)
                .expect("missing -l partner");
            assert_eq!(partner.weight, m.weight);
        }
        let w = basis.weights();
        assert!(w.windows(2).all(|p| p[0] >= p[1]));
    }

    #[test]
    fn oam_marginal_sums_sectors() {
        let grid = small_grid();
        let radial = vec![0.0; grid.n_q];
        let mk = |l: i32, weight: f64| SchmidtMode {
            function: ModeFunction { l, radial: radial.clone() },
            weight,
            radial_index: 0,
            sign: 1.0,
            purity: 1.0,
        };
        let basis = ModeBasis {
            grid,
            pass_label: PassLabel::First,
            modes: vec![mk(0, 0.5), mk(1, 0.25), mk(-1, 0.25)],
            truncation_deficit: 0.0,
            flagged: vec![],
        };
        let s = oam_marginal(&basis).unwrap();
        assert_eq!(s.l_min, -1);
        assert_eq!(s.weights, vec![0.25, 0.5, 0.25]);
    }

    #[test]
    fn effective_number_of_uniform_and_zero_spectra() {
        let s = OamSpectrum::from_raw(-2, vec![1.0; 5]).unwrap();
        assert!((effective_mode_number(&s).unwrap() - 5.0).abs() < 1e-12);
        assert!(OamSpectrum::from_raw(0, vec![0.0, 0.0]).is_err());
        let zero = OamSpectrum { l_min: 0, weights: vec![0.0; 3] };
        assert!(effective_mode_number(&zero).is_err());
    }

    #[test]
    fn purity_is_independent_of_azimuthal_origin() {
        let tpa = build_tpa(0.4, 2.0, &small_grid(), PassLabel::First).unwrap();
        let basis = schmidt_decompose(&tpa, 40).unwrap();
        for m in &basis.modes {
            let (l0, p0) = m.function.azimuthal_purity(&basis.grid, 0.0);
            let (l1, p1) = m.function.azimuthal_purity(&basis.grid, 1.234);
            assert_eq!(l0, l1);
            assert!((p0 - p1).abs() < 1e-12);
        }
    }
}
