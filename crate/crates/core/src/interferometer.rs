//! The SU(1,1) pipeline: OPA1, phase, internal loss, OPA2, detection loss.
//!
//! Each OAM sector `|l|` is propagated on its own. A sector state holds the
//! `+l` modes followed by the `-l` modes (just the `l = 0` modes for the
//! central sector) expanded on a real radial carrier basis spanning the kept
//! Schmidt modes of both passes. Different sectors never mix, so the full
//! output state is block diagonal.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Config, ModelConfig};
use crate::error::{Error, Result};
use crate::gaussian::{GaussianState, OpaOperation};
use crate::grid::TransverseGrid;
use crate::modes::{build_tpa, oam_marginal, schmidt_decompose, ModeBasis, ModeFunction, OamSpectrum, PassLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterferometerConfig {
    pub g1: f64,
    pub g2: f64,
    pub phi: f64,
    pub eta_int: f64,
    pub eta_det: f64,
    pub mismatch: f64,
    pub pump_width: f64,
    pub pm_width: f64,
    pub grid: TransverseGrid,
    pub model: ModelConfig,
}

impl InterferometerConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            g1: cfg.g1,
            g2: cfg.g2,
            phi: cfg.phi,
            eta_int: cfg.eta_int,
            eta_det: cfg.eta_det,
            mismatch: cfg.mismatch,
            pump_width: cfg.pump_width,
            pm_width: cfg.pm_width,
            grid: cfg.grid.to_grid()?,
            model: cfg.model.clone(),
        })
    }
}

/// Radial carrier and gain profiles of one OAM sector.
#[derive(Debug, Clone)]
struct Sector {
    l: usize,
    /// `n_q x n_c` radial functions, orthonormal under `q dq`.
    carrier: DMatrix<f64>,
    /// The first `s1.len()` carrier columns are the first-pass Schmidt modes.
    s1: Vec<f64>,
    sign1: f64,
    /// Extra phase per first-pass mode.
    delta: Vec<f64>,
    /// Orthogonal completion whose first `s2.len()` columns are the
    /// second-pass Schmidt modes in carrier coordinates.
    o2: DMatrix<f64>,
    s2: Vec<f64>,
    sign2: f64,
}

impl Sector {
    fn width(&self) -> usize {
        self.carrier.ncols()
    }

    fn n_modes(&self) -> usize {
        if self.l == 0 {
            self.width()
        } else {
            2 * self.width()
        }
    }

    fn halves(&self) -> Vec<Vec<usize>> {
        let nc = self.width();
        if self.l == 0 {
            vec![(0..nc).collect()]
        } else {
            vec![(0..nc).collect(), (nc..2 * nc).collect()]
        }
    }

    fn pairs(&self, n: usize) -> Vec<(usize, usize)> {
        let off = if self.l == 0 { 0 } else { self.width() };
        (0..n).map(|i| (i, i + off)).collect()
    }

    fn propagate(&self, cfg: &InterferometerConfig, g1: f64, phi: f64) -> Result<GaussianState> {
        let mut st = GaussianState::vacuum(self.n_modes())?;
        let n1 = self.s1.len();
        let pump1 = if self.sign1 < 0.0 { PI } else { 0.0 };
        let gains1: Vec<f64> = self.s1.iter().map(|s| g1 * s).collect();
        st.apply_opa(&OpaOperation::new(self.pairs(n1), gains1, pump1)?)?;
        for (i, d) in self.delta.iter().enumerate() {
            if *d != 0.0 {
                for (a, b) in self.pairs(n1).into_iter().skip(i).take(1) {
                    st.apply_phase(a, -0.5 * d)?;
                    if b != a {
                        st.apply_phase(b, -0.5 * d)?;
                    }
                }
            }
        }
        st.apply_phase_all(-0.5 * phi);
        st.apply_loss_all(cfg.eta_int)?;
        if cfg.g2 == 0.0 {
            st.apply_loss_all(cfg.eta_det)?;
            return Ok(st);
        }
        let n2 = self.s2.len();
        let o2t = self.o2.transpose();
        for half in self.halves() {
            st.apply_passive(&half, &o2t)?;
        }
        let pump2 = if self.sign2 < 0.0 { PI } else { 0.0 };
        let gains2: Vec<f64> = self.s2.iter().map(|s| cfg.g2 * s).collect();
        st.apply_opa(&OpaOperation::new(self.pairs(n2), gains2, pump2)?)?;
        for half in self.halves() {
            st.apply_passive(&half, &self.o2)?;
        }
        st.apply_loss_all(cfg.eta_det)?;
        Ok(st)
    }
}

/// Output of one OAM sector.
#[derive(Debug, Clone)]
pub struct SectorState {
    pub l: usize,
    pub carrier: DMatrix<f64>,
    pub state: GaussianState,
}

impl SectorState {
    fn width(&self) -> usize {
        self.carrier.ncols()
    }

    /// Carrier-coordinate block of `<a^dag a>` for signed sector `sl`.
    fn normal_block(&self, sl: i32) -> DMatrix<Complex64> {
        let nc = self.width();
        let off = if sl < 0 { nc } else { 0 };
        DMatrix::from_fn(nc, nc, |i, j| self.state.normal_moment(i + off, j + off))
    }

    /// `<a_{+l,i} a_{-l,j}>` (or `<a_{0,i} a_{0,j}>` for the central sector).
    fn anomalous_block(&self) -> DMatrix<Complex64> {
        let nc = self.width();
        let off = if self.l == 0 { 0 } else { nc };
        DMatrix::from_fn(nc, nc, |i, j| self.state.anomalous_moment(i, j + off))
    }

    fn radial_at(&self, q: f64, grid: &TransverseGrid) -> Vec<f64> {
        let pos = (q / grid.dq() - 0.5).clamp(0.0, (grid.n_q - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(grid.n_q - 1);
        let t = pos - i0 as f64;
        (0..self.width()).map(|c| (1.0 - t) * self.carrier[(i0, c)] + t * self.carrier[(i1, c)]).collect()
    }
}

/// Block-diagonal output state of the interferometer.
#[derive(Debug, Clone)]
pub struct OutputState {
    pub grid: TransverseGrid,
    pub sectors: Vec<SectorState>,
}

fn quad(r: &[f64], m: &DMatrix<Complex64>) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..r.len() {
        for j in 0..r.len() {
            acc += r[i] * r[j] * m[(i, j)];
        }
    }
    acc
}

impl OutputState {
    pub fn total_photons(&self) -> f64 {
        self.sectors.iter().map(|s| s.state.total_photons()).sum()
    }

    pub fn max_oam(&self) -> usize {
        self.sectors.iter().map(|s| s.l).max().unwrap_or(0)
    }

    /// Photon number per OAM value, `l = -L..=L`.
    pub fn oam_photons(&self) -> (i32, Vec<f64>) {
        let l_max = self.max_oam() as i32;
        let mut out = vec![0.0; (2 * l_max + 1) as usize];
        for s in &self.sectors {
            let nc = s.width();
            let plus: f64 = (0..nc).map(|k| s.state.mean_photons(k)).sum();
            out[(s.l as i32 + l_max) as usize] += plus;
            if s.l > 0 {
                let minus: f64 = (nc..2 * nc).map(|k| s.state.mean_photons(k)).sum();
                out[(l_max - s.l as i32) as usize] += minus;
            }
        }
        (-l_max, out)
    }

    pub fn oam_spectrum(&self) -> Result<OamSpectrum> {
        let (l_min, raw) = self.oam_photons();
        OamSpectrum::from_raw(l_min, raw.into_iter().map(|w| w.max(0.0)).collect())
    }

    /// Mean photons per pixel for each radial row (the profile is azimuthally uniform).
    pub fn radial_profile(&self) -> Vec<f64> {
        let g = &self.grid;
        let mut prof = vec![0.0; g.n_q];
        for s in &self.sectors {
            let signed: &[i32] = if s.l == 0 { &[0] } else { &[1, -1] };
            for &sg in signed {
                let n = s.normal_block(sg);
                for (row, p) in prof.iter_mut().enumerate() {
                    let r: Vec<f64> = (0..s.width()).map(|c| s.carrier[(row, c)]).collect();
                    *p += quad(&r, &n).re * g.pixel_area(row) / (2.0 * PI);
                }
            }
        }
        prof
    }

    /// Mean photons per pixel, row-major `n_q x n_theta`.
    pub fn intensity_profile(&self) -> Vec<f64> {
        let prof = self.radial_profile();
        prof.iter().flat_map(|&p| std::iter::repeat_n(p, self.grid.n_theta)).collect()
    }

    /// Ring kernels at radius `q`: `(N_l, M_l)` for `l = 0..=L` such that
    /// `<a^dag(theta) a(theta')> = A / 2pi * sum_l N_l e^{i l (theta' - theta)}` and
    /// `<a(theta) a(theta')> = A / 2pi * sum_l M_l e^{i l (theta - theta')}` over signed `l`.
    /// Entry `l` of each vector holds `(value at +l, value at -l)`.
    pub fn ring_kernels(&self, q: f64) -> Vec<(i32, Complex64, Complex64)> {
        let mut out = Vec::new();
        for s in &self.sectors {
            let r = s.radial_at(q, &self.grid);
            let m = quad(&r, &s.anomalous_block());
            if s.l == 0 {
                out.push((0, quad(&r, &s.normal_block(0)), m));
            } else {
                let l = s.l as i32;
                out.push((l, quad(&r, &s.normal_block(1)), m));
                out.push((-l, quad(&r, &s.normal_block(-1)), m));
            }
        }
        out
    }

    /// Dense equivalent: one Gaussian state over all modes plus their mode functions.
    pub fn to_dense(&self) -> Result<(GaussianState, Vec<ModeFunction>)> {
        let total: usize = self.sectors.iter().map(|s| s.state.n_modes()).sum();
        let mut dense = GaussianState::vacuum(total.max(1))?;
        let mut funcs = Vec::with_capacity(total);
        let mut off = 0;
        for s in &self.sectors {
            let n = 2 * s.state.n_modes();
            dense.cov.view_mut((2 * off, 2 * off), (n, n)).copy_from(&s.state.cov);
            dense.mean.rows_mut(2 * off, n).copy_from(&s.state.mean);
            let signs: &[i32] = if s.l == 0 { &[0] } else { &[1, -1] };
            for &sg in signs {
                for c in 0..s.width() {
                    funcs.push(ModeFunction { l: sg * s.l as i32, radial: s.carrier.column(c).iter().copied().collect() });
                }
            }
            off += s.state.n_modes();
        }
        Ok((dense, funcs))
    }
}

/// Precomputed mode structure of one interferometer configuration.
#[derive(Debug, Clone)]
pub struct Interferometer {
    pub config: InterferometerConfig,
    pub first: ModeBasis,
    pub second: ModeBasis,
    sectors: Vec<Sector>,
}

/// Gram-Schmidt in the `q dq` inner product; returns the residual of `v`.
fn orthogonalise(basis: &[Vec<f64>], v: &[f64], w: &[f64]) -> Vec<f64> {
    let mut r = v.to_vec();
    for _ in 0..2 {
        for b in basis {
            let dot: f64 = (0..r.len()).map(|i| w[i] * b[i] * r[i]).sum();
            for i in 0..r.len() {
                r[i] -= dot * b[i];
            }
        }
    }
    r
}

fn weighted_norm(v: &[f64], w: &[f64]) -> f64 {
    v.iter().zip(w).map(|(a, b)| b * a * a).sum::<f64>().sqrt()
}

/// Extends orthonormal columns `w` to a full orthogonal matrix.
fn complete_orthogonal(w: &DMatrix<f64>) -> DMatrix<f64> {
    let n = w.nrows();
    let ones = vec![1.0; n];
    let mut cols: Vec<Vec<f64>> = (0..w.ncols()).map(|c| w.column(c).iter().copied().collect()).collect();
    let mut k = 0;
    while cols.len() < n && k < n {
        let mut e = vec![0.0; n];
        e[k] = 1.0;
        let r = orthogonalise(&cols, &e, &ones);
        let norm = weighted_norm(&r, &ones);
        if norm > 1e-3 {
            cols.push(r.iter().map(|x| x / norm).collect());
        }
        k += 1;
    }
    DMatrix::from_fn(n, n, |r, c| cols[c][r])
}

fn gain_profile(basis: &ModeBasis, gamma: f64) -> Vec<f64> {
    let top = basis.max_weight();
    basis.modes.iter().map(|m| (m.weight / top).powf(gamma)).collect()
}

impl Interferometer {
    pub fn new(config: InterferometerConfig) -> Result<Self> {
        let grid = config.grid;
        let m = &config.model;
        let tpa1 = build_tpa(config.pump_width, config.pm_width, &grid, PassLabel::First)?;
        let first = schmidt_decompose(&tpa1, m.max_modes)?;
        let tpa2 = build_tpa(
            config.pump_width * m.pump_ratio,
            config.pm_width * config.mismatch,
            &grid,
            PassLabel::Second,
        )?;
        let second = schmidt_decompose(&tpa2, m.max_modes)?;
        let w = grid.radial_weights();

        let sectors = if m.single_mode {
            let top = &first.modes[0];
            vec![Sector {
                l: 0,
                carrier: DMatrix::from_column_slice(grid.n_q, 1, &top.function.radial),
                s1: vec![1.0],
                sign1: 1.0,
                delta: vec![0.0],
                o2: DMatrix::identity(1, 1),
                s2: vec![1.0],
                sign2: 1.0,
            }]
        } else {
            let p1 = gain_profile(&first, m.gain_exponent);
            let p2 = gain_profile(&second, m.gain_exponent);
            let keep = |basis: &ModeBasis, prof: &[f64], l: i32| -> (Vec<(Vec<f64>, f64, usize)>, f64) {
                let mut sign = 1.0;
                let mut out: Vec<(Vec<f64>, f64, usize)> = Vec::new();
                for (mode, &s) in basis.modes.iter().zip(prof) {
                    if mode.l() == l && s >= m.min_gain_fraction {
                        sign = mode.sign;
                        out.push((mode.function.radial.clone(), s, mode.radial_index));
                    }
                }
                out.sort_by_key(|e| e.2);
                (out, sign)
            };
            let l_top = first
                .modes
                .iter()
                .chain(&second.modes)
                .map(|md| md.l().unsigned_abs() as usize)
                .max()
                .unwrap_or(0);
            let mut sectors = Vec::new();
            for l in 0..=l_top {
                let (u1, sign1) = keep(&first, &p1, l as i32);
                let (u2, sign2) = keep(&second, &p2, l as i32);
                if u1.is_empty() && u2.is_empty() {
                    continue;
                }
                let mut cols: Vec<Vec<f64>> = u1.iter().map(|e| e.0.clone()).collect();
                for (v, _, _) in &u2 {
                    let r = orthogonalise(&cols, v, &w);
                    let norm = weighted_norm(&r, &w);
                    if norm > 1e-8 {
                        cols.push(r.iter().map(|x| x / norm).collect());
                    }
                }
                let nc = cols.len();
                let carrier = DMatrix::from_fn(grid.n_q, nc, |r, c| cols[c][r]);
                let wmat = DMatrix::from_fn(nc, u2.len(), |c, j| {
                    (0..grid.n_q).map(|i| w[i] * cols[c][i] * u2[j].0[i]).sum::<f64>()
                });
                let delta = u1
                    .iter()
                    .map(|e| m.mode_phase_per_order * (2 * e.2 + l) as f64)
                    .collect();
                sectors.push(Sector {
                    l,
                    carrier,
                    s1: u1.iter().map(|e| e.1).collect(),
                    sign1,
                    delta,
                    o2: complete_orthogonal(&wmat),
                    s2: u2.iter().map(|e| e.1).collect(),
                    sign2,
                });
            }
            sectors
        };
        if sectors.is_empty() {
            return Err(Error::Domain("no mode carries gain".into()));
        }
        Ok(Self { config, first, second, sectors })
    }

    pub fn from_config(cfg: &Config) -> Result<Self> {
        Self::new(InterferometerConfig::from_config(cfg)?)
    }

    pub fn grid(&self) -> &TransverseGrid {
        &self.config.grid
    }

    /// Number of modes carried by the state (both signs of `l`).
    pub fn n_modes(&self) -> usize {
        self.sectors.iter().map(|s| s.n_modes()).sum()
    }

    /// OAM spectrum of the first-pass two-photon amplitude.
    pub fn first_pass_spectrum(&self) -> Result<OamSpectrum> {
        oam_marginal(&self.first)
    }

    /// Full pipeline with the configured phase.
    pub fn run(&self) -> Result<OutputState> {
        self.propagate(self.config.g1, self.config.phi)
    }

    /// Full pipeline with explicit first-pass gain and phase.
    pub fn propagate(&self, g1: f64, phi: f64) -> Result<OutputState> {
        let sectors = self
            .sectors
            .par_iter()
            .map(|s| {
                Ok(SectorState { l: s.l, carrier: s.carrier.clone(), state: s.propagate(&self.config, g1, phi)? })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(OutputState { grid: self.config.grid, sectors })
    }

    /// Output of the first OPA alone (no phase, loss or second pass).
    pub fn first_pass_output(&self) -> Result<OutputState> {
        let mut cfg = self.config.clone();
        cfg.g2 = 0.0;
        cfg.eta_int = 1.0;
        cfg.eta_det = 1.0;
        let sectors = self
            .sectors
            .par_iter()
            .map(|s| Ok(SectorState { l: s.l, carrier: s.carrier.clone(), state: s.propagate(&cfg, self.config.g1, 0.0)? }))
            .collect::<Result<Vec<_>>>()?;
        Ok(OutputState { grid: self.config.grid, sectors })
    }

    /// Calibration output: OPA1 blocked, vacuum into OPA2.
    pub fn calibration(&self) -> Result<OutputState> {
        self.propagate(0.0, 0.0)
    }

    /// Same mode structure with another first-pass gain; `with_g1(0.0)` is
    /// the calibration configuration.
    pub fn with_g1(&self, g1: f64) -> Self {
        let mut out = self.clone();
        out.config.g1 = g1;
        out
    }

    pub fn fringe_model(&self, g1: f64) -> Result<FringeModel> {
        FringeModel::new(self, g1)
    }
}

/// Exact phase dependence of the output: every second moment is a first
/// harmonic `V0 + Vc cos(phi) + Vs sin(phi)` in the interferometer phase.
#[derive(Debug, Clone)]
pub struct FringeModel {
    grid: TransverseGrid,
    carriers: Vec<(usize, DMatrix<f64>)>,
    /// Per sector `(V0, Vc, Vs)`.
    harmonics: Vec<[DMatrix<f64>; 3]>,
    total: [f64; 3],
    profile: [Vec<f64>; 3],
}

impl FringeModel {
    pub fn new(interf: &Interferometer, g1: f64) -> Result<Self> {
        let a = interf.propagate(g1, 0.0)?;
        let b = interf.propagate(g1, 0.5 * PI)?;
        let c = interf.propagate(g1, PI)?;
        let mut harmonics = Vec::with_capacity(a.sectors.len());
        for ((sa, sb), sc) in a.sectors.iter().zip(&b.sectors).zip(&c.sectors) {
            let v0 = (&sa.state.cov + &sc.state.cov) * 0.5;
            let vc = (&sa.state.cov - &sc.state.cov) * 0.5;
            let vs = &sb.state.cov - &v0;
            harmonics.push([v0, vc, vs]);
        }
        let (ta, tb, tc) = (a.total_photons(), b.total_photons(), c.total_photons());
        let t0 = 0.5 * (ta + tc);
        let (pa, pb, pc) = (a.radial_profile(), b.radial_profile(), c.radial_profile());
        let p0: Vec<f64> = pa.iter().zip(&pc).map(|(x, y)| 0.5 * (x + y)).collect();
        let p1: Vec<f64> = pa.iter().zip(&pc).map(|(x, y)| 0.5 * (x - y)).collect();
        let p2: Vec<f64> = pb.iter().zip(&p0).map(|(x, y)| x - y).collect();
        Ok(Self {
            grid: a.grid,
            carriers: a.sectors.iter().map(|s| (s.l, s.carrier.clone())).collect(),
            harmonics,
            total: [t0, 0.5 * (ta - tc), tb - t0],
            profile: [p0, p1, p2],
        })
    }

    pub fn state_at(&self, phi: f64) -> OutputState {
        let (s, c) = phi.sin_cos();
        let sectors = self
            .carriers
            .iter()
            .zip(&self.harmonics)
            .map(|((l, carrier), h)| {
                let cov = &h[0] + &h[1] * c + &h[2] * s;
                let n = cov.nrows();
                SectorState {
                    l: *l,
                    carrier: carrier.clone(),
                    state: GaussianState { mean: nalgebra::DVector::zeros(n), cov },
                }
            })
            .collect();
        OutputState { grid: self.grid, sectors }
    }

    pub fn total(&self, phi: f64) -> f64 {
        let (s, c) = phi.sin_cos();
        self.total[0] + self.total[1] * c + self.total[2] * s
    }

    pub fn radial_profile(&self, phi: f64) -> Vec<f64> {
        let (s, c) = phi.sin_cos();
        (0..self.grid.n_q)
            .map(|i| self.profile[0][i] + self.profile[1][i] * c + self.profile[2][i] * s)
            .collect()
    }

    pub fn grid(&self) -> &TransverseGrid {
        &self.grid
    }
}

/// Mean detected photons per pulse for a list of phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FringeScan {
    pub phases: Vec<f64>,
    pub totals: Vec<f64>,
    /// Optional mean images (row-major `n_q x n_theta`), one per phase.
    pub per_pixel: Option<Vec<Vec<f64>>>,
}

impl FringeScan {
    pub fn new(phases: Vec<f64>, totals: Vec<f64>, per_pixel: Option<Vec<Vec<f64>>>) -> Result<Self> {
        if phases.len() != totals.len() {
            return Err(Error::DimensionMismatch { expected: phases.len(), got: totals.len() });
        }
        if let Some(p) = &per_pixel {
            if p.len() != phases.len() {
                return Err(Error::DimensionMismatch { expected: phases.len(), got: p.len() });
            }
        }
        if totals.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::Domain("fringe totals must be nonnegative".into()));
        }
        Ok(Self { phases, totals, per_pixel })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,total\n");
        for (p, t) in self.phases.iter().zip(&self.totals) {
            out.push_str(&format!("{p:.12e},{t:.12e}\n"));
        }
        out
    }
}

/// `n` equally spaced phases covering `[0, 2 pi)`.
pub fn phase_grid(n: usize) -> Vec<f64> {
    (0..n).map(|k| 2.0 * PI * k as f64 / n as f64).collect()
}

pub fn fringe_scan(interf: &Interferometer, phases: &[f64], with_pixels: bool) -> Result<FringeScan> {
    let model = interf.fringe_model(interf.config.g1)?;
    let totals = phases.iter().map(|&p| model.total(p).max(0.0)).collect();
    let per_pixel = with_pixels.then(|| {
        phases
            .iter()
            .map(|&p| {
                let prof = model.radial_profile(p);
                prof.iter().flat_map(|&v| std::iter::repeat_n(v.max(0.0), model.grid.n_theta)).collect()
            })
            .collect()
    });
    FringeScan::new(phases.to_vec(), totals, per_pixel)
}

/// `(max - min) / (max + min)` of the totals; zero for a constant or empty scan.
pub fn visibility(scan: &FringeScan) -> f64 {
    let max = scan.totals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = scan.totals.iter().copied().fold(f64::INFINITY, f64::min);
    if !(max > min) || max + min <= 0.0 {
        0.0
    } else {
        (max - min) / (max + min)
    }
}

/// Mean photons per pixel of a general state, `diag <a^dag(r) a(r)>`.
pub fn intensity_profile(state: &GaussianState, modes: &[ModeFunction], grid: &TransverseGrid) -> Result<Vec<f64>> {
    if modes.len() != state.n_modes() {
        return Err(Error::DimensionMismatch { expected: state.n_modes(), got: modes.len() });
    }
    let n = state.normal_matrix();
    let mut img = vec![0.0; grid.n_pixels()];
    for row in 0..grid.n_q {
        let area = grid.pixel_area(row);
        for col in 0..grid.n_theta {
            let u: Vec<Complex64> = modes.iter().map(|m| m.value(grid, row, col)).collect();
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..u.len() {
                if u[i].norm_sqr() == 0.0 {
                    continue;
                }
                for j in 0..u.len() {
                    acc += u[i].conj() * n[(i, j)] * u[j];
                }
            }
            img[row * grid.n_theta + col] = acc.re * area;
        }
    }
    Ok(img)
}
