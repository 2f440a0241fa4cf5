//! Multimode Gaussian states in the quadrature representation.
//!
//! Convention: `x = a + a^dag`, `p = -i (a - a^dag)`, so the vacuum has unit
//! variance in every quadrature and `[x, p] = 2i`. Quadratures are ordered
//! `x_1, p_1, ..., x_N, p_N`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::TransverseGrid;
use crate::modes::ModeFunction;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Parametric amplification of disjoint mode pairs.
///
/// A pair `(k, k)` is a single-mode squeezer, `(k, kbar)` a two-mode squeezer
/// `a_k -> a_k cosh G + e^{i phi_p} a_kbar^dag sinh G`.
#[derive(Debug, Clone, PartialEq)]
pub struct OpaOperation {
    pub pairs: Vec<(usize, usize)>,
    pub gains: Vec<f64>,
    pub pump_phase: f64,
}

impl OpaOperation {
    pub fn new(pairs: Vec<(usize, usize)>, gains: Vec<f64>, pump_phase: f64) -> Result<Self> {
        if pairs.len() != gains.len() {
            return Err(Error::DimensionMismatch { expected: pairs.len(), got: gains.len() });
        }
        if let Some(g) = gains.iter().find(|g| !(**g >= 0.0 && g.is_finite())) {
            return Err(Error::param("gain", format!("must be >= 0, got {g}")));
        }
        let mut seen = std::collections::HashSet::new();
        for &(a, b) in &pairs {
            let fresh = seen.insert(a) & (a == b || seen.insert(b));
            if !fresh {
                return Err(Error::Contract(format!("mode pair ({a}, {b}) overlaps another pair")));
            }
        }
        Ok(Self { pairs, gains, pump_phase })
    }

    pub fn single(mode: usize, gain: f64, pump_phase: f64) -> Result<Self> {
        Self::new(vec![(mode, mode)], vec![gain], pump_phase)
    }
}

impl GaussianState {
    pub fn vacuum(n_modes: usize) -> Result<Self> {
        if n_modes == 0 {
            return Err(Error::param("n_modes", "must be at least 1"));
        }
        Ok(Self { mean: DVector::zeros(2 * n_modes), cov: DMatrix::identity(2 * n_modes, 2 * n_modes) })
    }

    /// Product of thermal states with the given mean photon numbers.
    pub fn thermal(nbar: &[f64]) -> Result<Self> {
        let mut s = Self::vacuum(nbar.len())?;
        for (k, &n) in nbar.iter().enumerate() {
            if !(n >= 0.0) {
                return Err(Error::param("nbar", "must be >= 0"));
            }
            s.cov[(2 * k, 2 * k)] = 2.0 * n + 1.0;
            s.cov[(2 * k + 1, 2 * k + 1)] = 2.0 * n + 1.0;
        }
        Ok(s)
    }

    pub fn n_modes(&self) -> usize {
        self.mean.len() / 2
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode < self.n_modes() {
            Ok(())
        } else {
            Err(Error::Contract(format!("mode {mode} out of range for {} modes", self.n_modes())))
        }
    }

    /// Applies `s` to the quadratures listed in `idx` (all others untouched).
    fn apply_local(&mut self, idx: &[usize], s: &DMatrix<f64>) {
        let n = self.cov.nrows();
        let rows = DMatrix::from_fn(idx.len(), n, |r, c| self.cov[(idx[r], c)]);
        let rows = s * rows;
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..n {
                self.cov[(i, c)] = rows[(r, c)];
            }
        }
        let cols = DMatrix::from_fn(n, idx.len(), |r, c| self.cov[(r, idx[c])]);
        let cols = cols * s.transpose();
        for (c, &j) in idx.iter().enumerate() {
            for r in 0..n {
                self.cov[(r, j)] = cols[(r, c)];
            }
        }
        let m = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.mean[i]));
        let m = s * m;
        for (r, &i) in idx.iter().enumerate() {
            self.mean[i] = m[r];
        }
    }

    /// Full symplectic map `r -> S r`.
    pub fn apply_symplectic(&mut self, s: &DMatrix<f64>) -> Result<()> {
        let n = self.cov.nrows();
        if s.nrows() != n || s.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, got: s.nrows() });
        }
        self.cov = s * &self.cov * s.transpose();
        self.mean = s * &self.mean;
        Ok(())
    }

    /// Rotates mode `mode` by `theta`: `a -> a e^{i theta}`.
    pub fn apply_phase(&mut self, mode: usize, theta: f64) -> Result<()> {
        self.check_mode(mode)?;
        let (s, c) = theta.sin_cos();
        let r = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        self.apply_local(&[2 * mode, 2 * mode + 1], &r);
        Ok(())
    }

    pub fn apply_phase_all(&mut self, theta: f64) {
        for k in 0..self.n_modes() {
            self.apply_phase(k, theta).expect("mode index in range");
        }
    }

    /// Beamsplitter with vacuum at transmission `eta`.
    pub fn apply_loss(&mut self, mode: usize, eta: f64) -> Result<()> {
        self.check_mode(mode)?;
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::param("eta", format!("must lie in [0, 1], got {eta}")));
        }
        // Scale the excess over vacuum so that vacuum stays exactly vacuum.
        let t = eta.sqrt();
        let n = self.cov.nrows();
        for q in [2 * mode, 2 * mode + 1] {
            self.cov[(q, q)] -= 1.0;
            for c in 0..n {
                self.cov[(q, c)] *= t;
                self.cov[(c, q)] *= t;
            }
            self.cov[(q, q)] += 1.0;
            self.mean[q] *= t;
        }
        Ok(())
    }

    pub fn apply_loss_all(&mut self, eta: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::param("eta", format!("must lie in [0, 1], got {eta}")));
        }
        for i in 0..self.cov.nrows() {
            self.cov[(i, i)] -= 1.0;
        }
        self.cov *= eta;
        for i in 0..self.cov.nrows() {
            self.cov[(i, i)] += 1.0;
        }
        self.mean *= eta.sqrt();
        Ok(())
    }

    /// Real orthogonal mode transformation `a_{modes[i]} -> sum_j o[i][j] a_{modes[j]}`.
    pub fn apply_passive(&mut self, modes: &[usize], o: &DMatrix<f64>) -> Result<()> {
        if o.nrows() != modes.len() || o.ncols() != modes.len() {
            return Err(Error::DimensionMismatch { expected: modes.len(), got: o.nrows() });
        }
        for &m in modes {
            self.check_mode(m)?;
        }
        let m = modes.len();
        let idx: Vec<usize> = modes.iter().flat_map(|&k| [2 * k, 2 * k + 1]).collect();
        let s = DMatrix::from_fn(2 * m, 2 * m, |r, c| if r % 2 == c % 2 { o[(r / 2, c / 2)] } else { 0.0 });
        self.apply_local(&idx, &s);
        Ok(())
    }

    pub fn apply_opa(&mut self, op: &OpaOperation) -> Result<()> {
        for &(a, b) in &op.pairs {
            self.check_mode(a)?;
            self.check_mode(b)?;
        }
        let half = 0.5 * op.pump_phase;
        for (&(a, b), &g) in op.pairs.iter().zip(&op.gains) {
            if g == 0.0 {
                continue;
            }
            let (ch, sh) = (g.cosh(), g.sinh());
            if a == b {
                self.apply_phase(a, -half)?;
                let s = DMatrix::from_row_slice(2, 2, &[g.exp(), 0.0, 0.0, (-g).exp()]);
                self.apply_local(&[2 * a, 2 * a + 1], &s);
                self.apply_phase(a, half)?;
            } else {
                self.apply_phase(a, -half)?;
                self.apply_phase(b, -half)?;
                #[rustfmt::skip]
                let s = DMatrix::from_row_slice(4, 4, &[
                    ch, 0.0, sh, 0.0,
                    0.0, ch, 0.0, -sh,
                    sh, 0.0, ch, 0.0,
                    0.0, -sh, 0.0, ch,
                ]);
                self.apply_local(&[2 * a, 2 * a + 1, 2 * b, 2 * b + 1], &s);
                self.apply_phase(a, half)?;
                self.apply_phase(b, half)?;
            }
        }
        Ok(())
    }

    /// Mean photon number of `mode` and the variance of `x cos psi + p sin psi`.
    pub fn moments(&self, mode: usize, psi: f64) -> Result<(f64, f64)> {
        self.check_mode(mode)?;
        let (x, p) = (2 * mode, 2 * mode + 1);
        let (s, c) = psi.sin_cos();
        let v = &self.cov;
        let n = (v[(x, x)] + v[(p, p)] + self.mean[x].powi(2) + self.mean[p].powi(2) - 2.0) / 4.0;
        let var = c * c * v[(x, x)] + s * s * v[(p, p)] + 2.0 * s * c * v[(x, p)];
        Ok((n, var))
    }

    pub fn mean_photons(&self, mode: usize) -> f64 {
        self.moments(mode, 0.0).map(|m| m.0).unwrap_or(0.0)
    }

    pub fn total_photons(&self) -> f64 {
        (0..self.n_modes()).map(|k| self.mean_photons(k)).sum()
    }

    /// `<a_i^dag a_j>` including the coherent part.
    pub fn normal_moment(&self, i: usize, j: usize) -> Complex64 {
        let v = &self.cov;
        let (xi, pi, xj, pj) = (2 * i, 2 * i + 1, 2 * j, 2 * j + 1);
        let delta = if i == j { 2.0 } else { 0.0 };
        let centred = Complex64::new(v[(xi, xj)] + v[(pi, pj)] - delta, v[(xi, pj)] - v[(pi, xj)]) / 4.0;
        let ai = Complex64::new(self.mean[xi], self.mean[pi]) / 2.0;
        let aj = Complex64::new(self.mean[xj], self.mean[pj]) / 2.0;
        centred + ai.conj() * aj
    }

    /// `<a_i a_j>` including the coherent part.
    pub fn anomalous_moment(&self, i: usize, j: usize) -> Complex64 {
        let v = &self.cov;
        let (xi, pi, xj, pj) = (2 * i, 2 * i + 1, 2 * j, 2 * j + 1);
        let centred = Complex64::new(v[(xi, xj)] - v[(pi, pj)], v[(xi, pj)] + v[(pi, xj)]) / 4.0;
        let ai = Complex64::new(self.mean[xi], self.mean[pi]) / 2.0;
        let aj = Complex64::new(self.mean[xj], self.mean[pj]) / 2.0;
        centred + ai * aj
    }

    pub fn normal_matrix(&self) -> DMatrix<Complex64> {
        let n = self.n_modes();
        DMatrix::from_fn(n, n, |i, j| self.normal_moment(i, j))
    }

    pub fn anomalous_matrix(&self) -> DMatrix<Complex64> {
        let n = self.n_modes();
        DMatrix::from_fn(n, n, |i, j| self.anomalous_moment(i, j))
    }

    /// Symplectic eigenvalues in ascending order (each listed once).
    pub fn symplectic_eigenvalues(&self) -> Vec<f64> {
        let n = self.n_modes();
        let eig = SymmetricEigen::new(self.cov.clone());
        let sqrt_v = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|e| e.max(0.0).sqrt()))
            * eig.eigenvectors.transpose();
        let omega = DMatrix::from_fn(2 * n, 2 * n, |r, c| {
            if r / 2 != c / 2 {
                0.0
            } else if r % 2 == 0 && c % 2 == 1 {
                1.0
            } else if r % 2 == 1 && c % 2 == 0 {
                -1.0
            } else {
                0.0
            }
        });
        let m = &sqrt_v * omega * &sqrt_v;
        let mtm = m.transpose() * m;
        let mut ev: Vec<f64> = SymmetricEigen::new(mtm).eigenvalues.iter().map(|e| e.max(0.0).sqrt()).collect();
        ev.sort_by(f64::total_cmp);
        ev.into_iter().step_by(2).collect()
    }

    pub fn is_physical(&self, tol: f64) -> bool {
        let sym = (&self.cov - self.cov.transpose()).amax() <= tol * self.cov.amax().max(1.0);
        let finite = self.mean.iter().chain(self.cov.iter()).all(|v| v.is_finite());
        sym && finite && self.symplectic_eigenvalues().first().is_none_or(|&nu| nu >= 1.0 - tol)
    }

    pub fn cov_to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.cov.nrows() {
            let row: Vec<String> = (0..self.cov.ncols()).map(|c| format!("{:.12e}", self.cov[(r, c)])).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Pixel-integrated field correlators `<a^dag(r) a(r')>` and `<a(r) a(r')>`
/// at the listed `(row, col)` pixels, with `a(r) = sum_k u_k(r) a_k`.
pub fn field_correlators(
    state: &GaussianState,
    modes: &[ModeFunction],
    grid: &TransverseGrid,
    pixels: &[(usize, usize)],
) -> Result<(DMatrix<Complex64>, DMatrix<Complex64>)> {
    if modes.len() != state.n_modes() {
        return Err(Error::DimensionMismatch { expected: state.n_modes(), got: modes.len() });
    }
    let u = DMatrix::from_fn(pixels.len(), modes.len(), |p, k| {
        let (row, col) = pixels[p];
        modes[k].value(grid, row, col) * grid.pixel_area(row).sqrt()
    });
    let normal = u.conjugate() * state.normal_matrix() * u.transpose();
    let anomalous = &u * state.anomalous_matrix() * u.transpose();
    Ok((normal, anomalous))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cov_close(a: &GaussianState, b: &GaussianState, tol: f64) -> bool {
        (&a.cov - &b.cov).amax() <= tol * a.cov.amax().max(1.0)
    }

    #[test]
    fn vacuum_is_identity_with_unit_symplectic_spectrum() {
        let v = GaussianState::vacuum(3).unwrap();
        assert_eq!(v.cov, DMatrix::identity(6, 6));
        for nu in v.symplectic_eigenvalues() {
            assert_relative_eq!(nu, 1.0, epsilon = 1e-12);
        }
        assert!(GaussianState::vacuum(0).is_err());
    }

    #[test]
    fn single_mode_squeezer_oracle() {
        let mut s = GaussianState::vacuum(1).unwrap();
        s.apply_opa(&OpaOperation::single(0, 2.1, 0.0).unwrap()).unwrap();
        assert_relative_eq!(s.cov[(0, 0)], 4.2f64.exp(), max_relative = 1e-12);
        assert_relative_eq!(s.cov[(1, 1)], (-4.2f64).exp(), max_relative = 1e-12);
        let (n, var_p) = s.moments(0, std::f64::consts::FRAC_PI_2).unwrap();
        assert_relative_eq!(n, 2.1f64.sinh().powi(2), max_relative = 1e-12);
        assert_relative_eq!(var_p, (-4.2f64).exp(), max_relative = 1e-10);
    }

    #[test]
    fn gains_compose() {
        let mut a = GaussianState::vacuum(2).unwrap();
        let op = |g| OpaOperation::new(vec![(0, 1)], vec![g], 0.4).unwrap();
        a.apply_opa(&op(2.1)).unwrap();
        a.apply_opa(&op(3.3)).unwrap();
        let mut b = GaussianState::vacuum(2).unwrap();
        b.apply_opa(&op(5.4)).unwrap();
        assert!(cov_close(&a, &b, 1e-9));
    }

    #[test]
    fn pump_phase_enters_the_anomalous_moment() {
        let mut s = GaussianState::vacuum(2).unwrap();
        let (g, ph) = (1.3f64, 0.77f64);
        s.apply_opa(&OpaOperation::new(vec![(0, 1)], vec![g], ph).unwrap()).unwrap();
        let m = s.anomalous_moment(0, 1);
        let expect = Complex64::from_polar(g.sinh() * g.cosh(), ph);
        assert!((m - expect).norm() < 1e-12, "{m} vs {expect}");
        assert!(s.normal_moment(0, 1).norm() < 1e-12);
    }

    #[test]
    fn overlapping_pairs_are_rejected() {
        assert!(matches!(
            OpaOperation::new(vec![(0, 1), (1, 2)], vec![1.0, 1.0], 0.0),
            Err(Error::Contract(_))
        ));
        assert!(OpaOperation::new(vec![(0, 0), (1, 2)], vec![1.0, 1.0], 0.0).is_ok());
        assert!(OpaOperation::new(vec![(0, 0)], vec![-1.0], 0.0).is_err());
    }

    #[test]
    fn phase_and_loss_examples() {
        let mut s = GaussianState::vacuum(1).unwrap();
        s.mean[0] = 1.5;
        s.apply_opa(&OpaOperation::single(0, 2.1, 0.0).unwrap()).unwrap();
        let before = s.clone();
        s.apply_phase(0, 0.0).unwrap();
        assert_eq!(s, before);
        s.apply_phase(0, std::f64::consts::PI).unwrap();
        assert_relative_eq!(s.mean[0], -before.mean[0], epsilon = 1e-12);
        let mut r = before.clone();
        r.apply_phase(0, std::f64::consts::FRAC_PI_2).unwrap();
        assert_relative_eq!(r.cov[(0, 0)], before.cov[(1, 1)], max_relative = 1e-9);
        assert_relative_eq!(r.cov[(1, 1)], before.cov[(0, 0)], max_relative = 1e-9);

        let mut l = GaussianState::vacuum(1).unwrap();
        l.cov[(0, 0)] = 0.015;
        l.cov[(1, 1)] = 1.0 / 0.015;
        l.apply_loss(0, 0.5).unwrap();
        assert_relative_eq!(l.cov[(0, 0)], 0.5075, epsilon = 1e-12);
        let mut z = before.clone();
        z.apply_loss(0, 0.0).unwrap();
        assert_eq!(z.cov, DMatrix::identity(2, 2));
        assert!(z.apply_loss(0, 1.2).is_err());
    }

    #[test]
    fn thermal_correlator_is_rank_one() {
        let grid = TransverseGrid::new(16, 8, 4.0).unwrap();
        let radial: Vec<f64> = (0..8).map(|i| (-(grid.q(i) / 1.5).powi(2)).exp()).collect();
        let norm: f64 = (0..8).map(|i| grid.radial_weight(i) * radial[i].powi(2)).sum::<f64>().sqrt();
        let f = ModeFunction { l: 2, radial: radial.iter().map(|r| r / norm).collect() };
        let s = GaussianState::thermal(&[3.0]).unwrap();
        let pix = [(0, 0), (2, 5), (7, 11)];
        let (normal, anomalous) = field_correlators(&s, std::slice::from_ref(&f), &grid, &pix).unwrap();
        for (a, &(ra, ca)) in pix.iter().enumerate() {
            for (b, &(rb, cb)) in pix.iter().enumerate() {
                let ua = f.value(&grid, ra, ca) * grid.pixel_area(ra).sqrt();
                let ub = f.value(&grid, rb, cb) * grid.pixel_area(rb).sqrt();
                assert!((normal[(a, b)] - 3.0 * ua.conj() * ub).norm() < 1e-12);
                assert!(anomalous[(a, b)].norm() < 1e-12);
            }
        }
        assert!(field_correlators(&GaussianState::vacuum(2).unwrap(), &[f], &grid, &pix).is_err());
    }

    proptest! {
        #[test]
        fn pure_operations_preserve_symplectic_spectrum(
            g1 in 0.0f64..3.0, g2 in 0.0f64..3.0, th in -3.0f64..3.0, ph in -3.0f64..3.0,
            angle in -1.5f64..1.5,
        ) {
            let mut s = GaussianState::vacuum(3).unwrap();
            s.apply_opa(&OpaOperation::new(vec![(0, 0), (1, 2)], vec![g1, g2], ph).unwrap()).unwrap();
            s.apply_phase(1, th).unwrap();
            let (sn, cs) = angle.sin_cos();
            let o = DMatrix::from_row_slice(2, 2, &[cs, -sn, sn, cs]);
            s.apply_passive(&[0, 2], &o).unwrap();
            for nu in s.symplectic_eigenvalues() {
                prop_assert!((nu - 1.0).abs() < 1e-6 * (1.0 + s.cov.amax()));
            }
            let det = s.cov.determinant();
            prop_assert!((det - 1.0).abs() < 1e-6);
        }

        #[test]
        fn loss_keeps_states_physical(g in 0.0f64..4.0, eta in 0.0f64..1.0) {
            let mut s = GaussianState::vacuum(2).unwrap();
            s.apply_opa(&OpaOperation::new(vec![(0, 1)], vec![g], 0.0).unwrap()).unwrap();
            let before = s.symplectic_eigenvalues();
            s.apply_loss(0, eta).unwrap();
            let after = s.symplectic_eigenvalues();
            prop_assert!(s.is_physical(1e-9));
            prop_assert!(after[0] >= before[0] - 1e-9);
        }

        #[test]
        fn photons_from_vacuum_follow_sinh_squared(g in 0.0f64..6.0) {
            let mut s = GaussianState::vacuum(1).unwrap();
            s.apply_opa(&OpaOperation::single(0, g, 0.3).unwrap()).unwrap();
            let n = s.mean_photons(0);
            let expect = g.sinh().powi(2);
            prop_assert!((n - expect).abs() <= 1e-9 * expect.max(1e-12) + 1e-12);
        }
    }
}
