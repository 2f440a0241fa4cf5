//! Optical-homodyne quadrature variance: with a strong second amplifier the
//! output intensity is `I = C Var(x_psi)`, where `C` is the output obtained
//! with vacuum at the input and `phi = 2 psi`. We put `psi = 0` at the
//! anti-squeezed maximum of the scan.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interferometer::FringeScan;
use crate::sampler::FrameStack;

/// Region of the raster entering the intensity sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SqueezingScope {
    #[default]
    Full,
    /// Single pixel at column `x`, row `y`.
    Pixel { x: usize, y: usize },
    /// Columns `x0..x1`, rows `y0..y1` (half-open).
    Rect { x0: usize, y0: usize, x1: usize, y1: usize },
}

impl SqueezingScope {
    /// Parses `full`, `pixel(x,y)` or `rect(x0,y0,x1,y1)`.
    pub fn parse(text: &str) -> Result<Self> {
        let t = text.trim().to_ascii_lowercase();
        if t == "full" {
            return Ok(Self::Full);
        }
        let args = |prefix: &str| -> Option<Vec<usize>> {
            let inner = t.strip_prefix(prefix)?.strip_prefix('(')?.strip_suffix(')')?;
            inner.split(',').map(|s| s.trim().parse().ok()).collect()
        };
        if let Some(v) = args("pixel") {
            if let [x, y] = v[..] {
                return Ok(Self::Pixel { x, y });
            }
        }
        if let Some(v) = args("rect") {
            if let [x0, y0, x1, y1] = v[..] {
                if x1 > x0 && y1 > y0 {
                    return Ok(Self::Rect { x0, y0, x1, y1 });
                }
            }
        }
        Err(Error::Config(format!("cannot parse ROI `{text}` (expected full, pixel(x,y) or rect(x0,y0,x1,y1))")))
    }

    /// Sums `image` (row-major, `width` columns) over the region.
    pub fn reduce(&self, image: &[f64], width: usize) -> Result<f64> {
        let height = image.len() / width.max(1);
        let check = |x: usize, y: usize| {
            if x < width && y < height {
                Ok(())
            } else {
                Err(Error::param("roi", format!("({x}, {y}) outside {width}x{height} raster")))
            }
        };
        match *self {
            Self::Full => Ok(image.iter().sum()),
            Self::Pixel { x, y } => {
                check(x, y)?;
                Ok(image[y * width + x])
            }
            Self::Rect { x0, y0, x1, y1 } => {
                check(x1 - 1, y1 - 1)?;
                Ok((y0..y1).flat_map(|y| (x0..x1).map(move |x| image[y * width + x])).sum())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqueezingResult {
    pub phases: Vec<f64>,
    /// Quadrature angle of each phase point, `(phi - phi_max) / 2`.
    pub psi: Vec<f64>,
    pub variance: Vec<f64>,
    pub db: Vec<f64>,
    pub calibration: f64,
    pub scope: SqueezingScope,
    pub squeezing_db: f64,
    pub anti_squeezing_db: f64,
}

impl SqueezingResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,psi,variance,db\n");
        for i in 0..self.phases.len() {
            out.push_str(&format!(
                "{:.12e},{:.12e},{:.12e},{:.12e}\n",
                self.phases[i], self.psi[i], self.variance[i], self.db[i]
            ));
        }
        out
    }
}

pub fn to_db(var: f64) -> f64 {
    10.0 * var.log10()
}

/// Calibration constant: mean output with vacuum into the second amplifier.
pub fn calibrate_c(vacuum_scan: &FringeScan) -> Result<f64> {
    if vacuum_scan.totals.is_empty() {
        return Err(Error::Calibration("empty calibration scan".into()));
    }
    let c = vacuum_scan.totals.iter().sum::<f64>() / vacuum_scan.totals.len() as f64;
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Calibration(format!("calibration intensity is {c}")));
    }
    Ok(c)
}

/// Calibration constant from a frame stack, summed over `scope`.
pub fn calibrate_c_stack(stack: &FrameStack, scope: &SqueezingScope) -> Result<f64> {
    if stack.n_frames() == 0 {
        return Err(Error::Calibration("empty calibration stack".into()));
    }
    let c = scope.reduce(&stack.mean_image(), stack.width)?;
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Calibration(format!("calibration intensity is {c}")));
    }
    Ok(c)
}

/// Phase scan built from the mean image of each phase tag of `stack`.
pub fn scan_from_stack(stack: &FrameStack) -> Result<FringeScan> {
    let mut phases = Vec::new();
    let mut totals = Vec::new();
    let mut images = Vec::new();
    for (phase, frames) in stack.split_by_phase() {
        let image = stack.subset(&frames).mean_image();
        phases.push(phase);
        totals.push(image.iter().sum());
        images.push(image);
    }
    FringeScan::new(phases, totals, Some(images))
}

/// `Var(x_psi) = I(phi) / C` over the scan.
pub fn quadrature_variance_estimate(scan: &FringeScan, c: f64) -> Result<SqueezingResult> {
    quadrature_variance_scoped(scan, c, SqueezingScope::Full, None)
}

/// As [`quadrature_variance_estimate`] over a region of the per-pixel images
/// (`width` columns); `c` must be calibrated over the same region.
pub fn quadrature_variance_scoped(
    scan: &FringeScan,
    c: f64,
    scope: SqueezingScope,
    width: Option<usize>,
) -> Result<SqueezingResult> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Calibration(format!("calibration constant must be positive, got {c}")));
    }
    if scan.totals.is_empty() {
        return Err(Error::Domain("empty scan".into()));
    }
    let intensities: Vec<f64> = match (scope, &scan.per_pixel) {
        (SqueezingScope::Full, _) => scan.totals.clone(),
        (_, Some(images)) => {
            let width = width.ok_or_else(|| Error::param("roi", "raster width needed for a pixel region"))?;
            images.iter().map(|im| scope.reduce(im, width)).collect::<Result<_>>()?
        }
        (_, None) => return Err(Error::param("roi", "scan carries no per-pixel images")),
    };
    let variance: Vec<f64> = intensities.iter().map(|t| t / c).collect();
    let imax = (0..variance.len()).max_by(|&a, &b| variance[a].total_cmp(&variance[b])).unwrap_or(0);
    let phi_max = scan.phases[imax];
    let psi = scan
        .phases
        .iter()
        .map(|p| {
            let d = (p - phi_max).rem_euclid(2.0 * PI);
            0.5 * if d > PI { d - 2.0 * PI } else { d }
        })
        .collect();
    let db: Vec<f64> = variance.iter().map(|&v| to_db(v)).collect();
    let squeezing_db = db.iter().copied().fold(f64::INFINITY, f64::min);
    let anti_squeezing_db = db.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(SqueezingResult {
        phases: scan.phases.clone(),
        psi,
        variance,
        db,
        calibration: c,
        scope,
        squeezing_db,
        anti_squeezing_db,
    })
}

/// Per-pixel squeezing and anti-squeezing in dB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqueezingMap {
    pub height: usize,
    pub width: usize,
    pub squeezing_db: Vec<f64>,
    pub anti_squeezing_db: Vec<f64>,
    /// `true` where the pixel is used; masked pixels hold 0 dB.
    pub mask: Vec<bool>,
    pub calibration: Vec<f64>,
}

impl SqueezingMap {
    /// Mean of the unmasked squeezing values in rows `rows`.
    pub fn mean_squeezing_in_rows(&self, rows: std::ops::Range<usize>) -> Option<f64> {
        let mut acc = 0.0;
        let mut n = 0usize;
        for r in rows {
            for c in 0..self.width {
                let i = r * self.width + c;
                if self.mask[i] {
                    acc += self.squeezing_db[i];
                    n += 1;
                }
            }
        }
        (n > 0).then(|| acc / n as f64)
    }
}

/// Per-pixel calibrated variance over the phase images; pixels whose
/// calibration falls below `floor` times the brightest are masked.
pub fn squeezing_map(images: &[Vec<f64>], calibration: &[f64], width: usize, floor: f64) -> Result<SqueezingMap> {
    if images.is_empty() {
        return Err(Error::Domain("no phase images".into()));
    }
    let n = calibration.len();
    if let Some(bad) = images.iter().find(|im| im.len() != n) {
        return Err(Error::DimensionMismatch { expected: n, got: bad.len() });
    }
    if width == 0 || !n.is_multiple_of(width) {
        return Err(Error::DimensionMismatch { expected: n, got: width });
    }
    let peak = calibration.iter().copied().fold(0.0, f64::max);
    let mut sq = vec![0.0; n];
    let mut anti = vec![0.0; n];
    let mut mask = vec![false; n];
    for i in 0..n {
        let c = calibration[i];
        if !(c > floor * peak && c > 0.0) {
            continue;
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for im in images {
            let v = im[i] / c;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo > 0.0 {
            mask[i] = true;
            sq[i] = to_db(lo);
            anti[i] = to_db(hi);
        }
    }
    Ok(SqueezingMap {
        height: n / width,
        width,
        squeezing_db: sq,
        anti_squeezing_db: anti,
        mask,
        calibration: calibration.to_vec(),
    })
}

/// Validity ratio of the homodyne approximation, `e^{4 G2} Var(x) / Var(p)`.
pub fn homodyne_validity(g2: f64, var_x: f64, var_p: f64) -> f64 {
    (4.0 * g2).exp() * var_x / var_p
}
