//! Parametric gain from the power dependence `I(P) = A sinh^2(c sqrt(P))`.
//!
//! For fixed `c` the amplitude `A` is linear and solved in closed form, so the
//! fit reduces to a one-dimensional search over `c` (bracketing scan, golden
//! section) followed by Gauss-Newton polishing of `(A, c)` together.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainFit {
    pub a: f64,
    pub c: f64,
    /// Gain at the largest power, `c sqrt(P_max)`.
    pub gain: f64,
    pub p_max: f64,
    pub residuals: Vec<f64>,
    pub rms: f64,
}

fn basis(c: f64, p: &[f64]) -> Vec<f64> {
    p.iter().map(|&x| (c * x.sqrt()).sinh().powi(2)).collect()
}

/// Best amplitude and residual sum of squares for a given `c`.
fn profile(c: f64, p: &[f64], y: &[f64]) -> (f64, f64) {
    let s = basis(c, p);
    let ss: f64 = s.iter().map(|v| v * v).sum();
    if !(ss > 0.0 && ss.is_finite()) {
        return (0.0, f64::INFINITY);
    }
    let a = s.iter().zip(y).map(|(u, v)| u * v).sum::<f64>() / ss;
    let rss = s.iter().zip(y).map(|(u, v)| (a * u - v).powi(2)).sum();
    (a, rss)
}

pub fn fit_gain(powers: &[f64], intensities: &[f64]) -> Result<GainFit> {
    if powers.len() != intensities.len() {
        return Err(Error::DimensionMismatch { expected: powers.len(), got: intensities.len() });
    }
    if powers.len() < 3 {
        return Err(Error::param("powers", format!("need at least 3 points, got {}", powers.len())));
    }
    if powers.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
        return Err(Error::param("powers", "must be positive and finite"));
    }
    if intensities.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("intensities", "must be finite"));
    }
    let p_max = powers.iter().copied().fold(0.0, f64::max);
    let scale = p_max.sqrt();
    let mut trace = Vec::new();

    // Bracket: gains from 1e-3 to 12 at the largest power.
    let grid: Vec<f64> = (0..=240).map(|k| 1e-3 * 12_000f64.powf(k as f64 / 240.0) / scale).collect();
    let rss: Vec<f64> = grid.iter().map(|&c| profile(c, powers, intensities).1).collect();
    let best = (0..grid.len()).min_by(|&a, &b| rss[a].total_cmp(&rss[b])).unwrap();
    trace.push(format!("scan minimum at c = {:.6e} (rss {:.3e})", grid[best], rss[best]));
    let (mut lo, mut hi) = (grid[best.saturating_sub(1)], grid[(best + 1).min(grid.len() - 1)]);

    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let f = |c: f64| profile(c, powers, intensities).1;
    let (mut x1, mut x2) = (hi - phi * (hi - lo), lo + phi * (hi - lo));
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..200 {
        if (hi - lo) <= 1e-14 * hi {
            break;
        }
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = f(x2);
        }
    }
    let mut c = 0.5 * (lo + hi);
    let (mut a, mut cur) = profile(c, powers, intensities);
    trace.push(format!("golden section: c = {c:.9e}, A = {a:.6e}, rss {cur:.3e}"));

    // Gauss-Newton on (A, c).
    for it in 0..50 {
        let (mut jtj, mut jtr) = ([[0.0; 2]; 2], [0.0; 2]);
        for (&p, &y) in powers.iter().zip(intensities) {
            let x = c * p.sqrt();
            let s = x.sinh().powi(2);
            let ds = 2.0 * x.sinh() * x.cosh() * p.sqrt();
            let j = [s, a * ds];
            let r = y - a * s;
            for u in 0..2 {
                jtr[u] += j[u] * r;
                for v in 0..2 {
                    jtj[u][v] += j[u] * j[v];
                }
            }
        }
        let det = jtj[0][0] * jtj[1][1] - jtj[0][1] * jtj[1][0];
        if !(det.abs() > 0.0) {
            break;
        }
        let da = (jtr[0] * jtj[1][1] - jtr[1] * jtj[0][1]) / det;
        let dc = (jtj[0][0] * jtr[1] - jtj[1][0] * jtr[0]) / det;
        let (na, nc) = (a + da, c + dc);
        let next: f64 = powers
            .iter()
            .zip(intensities)
            .map(|(&p, &y)| (na * (nc * p.sqrt()).sinh().powi(2) - y).powi(2))
            .sum();
        if !(next <= cur) || nc <= 0.0 {
            trace.push(format!("polish stopped at iteration {it}"));
            break;
        }
        let done = dc.abs() <= 1e-15 * c.abs();
        a = na;
        c = nc;
        cur = next;
        if done {
            break;
        }
    }
    if !(a.is_finite() && c.is_finite() && c > 0.0 && cur.is_finite()) {
        trace.push(format!("final state A = {a}, c = {c}, rss = {cur}"));
        return Err(Error::NonConvergence { message: "sinh^2 gain fit failed".into(), trace });
    }
    let residuals: Vec<f64> =
        powers.iter().zip(intensities).map(|(&p, &y)| y - a * (c * p.sqrt()).sinh().powi(2)).collect();
    let rms = (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt();
    Ok(GainFit { a, c, gain: c * scale, p_max, residuals, rms })
}
