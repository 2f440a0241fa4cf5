//! Single-shot far-field intensity frames and the frame-stack file format.
//!
//! Frames are drawn semiclassically: mode amplitudes `alpha = (X + iP) / 2`
//! are Gaussian with quadrature covariance `V - I` (the normally ordered
//! moments), so the mean frame reproduces `<a^dag a>` without a vacuum
//! background. When `V - I` is not positive semidefinite (squeezed light
//! seen with the degenerate filter) the negative eigenvalues are clipped to
//! zero, which slightly overestimates the mean and caps the single-mode
//! `g2` at 3. The shifted filter drops the anomalous moments and is always
//! sampled exactly.
//!
//! File layout, little-endian: 8-byte magic `SU11FRM1`, `u32` frame count,
//! `u32` height, `u32` width, `u32` flags, `n_frames` `f64` phase tags, then
//! `n_frames * height * width` `f32` intensities, frame-major and row-major.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::config::DetectorConfig;
use crate::error::{Error, Result};
use crate::gaussian::GaussianState;
use crate::interferometer::OutputState;

pub const MAGIC: &[u8; 8] = b"SU11FRM1";
const HEADER_LEN: usize = 24;
pub const FLAG_SHIFTED: u32 = 1;
pub const FLAG_CALIBRATION: u32 = 2;

/// Spectral filter in front of the camera.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FilterTag {
    /// Detects at the degenerate wavelength: signal-idler cross-correlations present.
    #[default]
    Degenerate,
    /// Detects a slightly non-degenerate band: only normal correlations survive.
    Shifted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub efficiency: f64,
    pub read_noise: f64,
    pub saturation: Option<f64>,
}

impl Default for DetectorModel {
    fn default() -> Self {
        Self { efficiency: 1.0, read_noise: 0.0, saturation: None }
    }
}

impl DetectorModel {
    pub fn new(efficiency: f64, read_noise: f64, saturation: Option<f64>) -> Result<Self> {
        if !(0.0..=1.0).contains(&efficiency) {
            return Err(Error::param("efficiency", format!("must lie in [0, 1], got {efficiency}")));
        }
        if !(read_noise >= 0.0 && read_noise.is_finite()) {
            return Err(Error::param("read_noise", "must be >= 0"));
        }
        if let Some(s) = saturation {
            if !(s > 0.0) {
                return Err(Error::param("saturation", "must be positive"));
            }
        }
        Ok(Self { efficiency, read_noise, saturation })
    }

    pub fn from_config(cfg: &DetectorConfig) -> Result<Self> {
        Self::new(cfg.efficiency, cfg.read_noise, cfg.saturation)
    }

    fn apply(&self, photons: f64, rng: &mut ChaCha12Rng) -> f32 {
        let mut v = photons * self.efficiency;
        if self.read_noise > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            v += self.read_noise * z;
        }
        if let Some(s) = self.saturation {
            v = v.min(s);
        }
        v.max(0.0) as f32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    pub height: usize,
    pub width: usize,
    pub phases: Vec<f64>,
    /// `n_frames * height * width` intensities in photons per pixel.
    pub data: Vec<f32>,
    pub filter: FilterTag,
    /// Recorded with OPA1 blocked.
    pub calibration: bool,
    /// Acquisition metadata kept in the JSON sidecar, not in the binary file.
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
}

impl FrameStack {
    pub fn new(height: usize, width: usize, phases: Vec<f64>, data: Vec<f32>) -> Result<Self> {
        let expected = phases.len() * height * width;
        if data.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: data.len() });
        }
        if phases.iter().any(|p| !p.is_finite()) {
            return Err(Error::Format("phase tags must be finite".into()));
        }
        if data.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Format("intensities must be nonnegative".into()));
        }
        Ok(Self {
            height,
            width,
            phases,
            data,
            filter: FilterTag::Degenerate,
            calibration: false,
            seed: None,
            config_hash: None,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.phases.len()
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    pub fn frame(&self, k: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn flags(&self) -> u32 {
        let mut f = 0;
        if self.filter == FilterTag::Shifted {
            f |= FLAG_SHIFTED;
        }
        if self.calibration {
            f |= FLAG_CALIBRATION;
        }
        f
    }

    /// Mean image over all frames.
    pub fn mean_image(&self) -> Vec<f64> {
        let n = self.frame_len();
        let mut acc = vec![0.0; n];
        for k in 0..self.n_frames() {
            for (a, &v) in acc.iter_mut().zip(self.frame(k)) {
                *a += v as f64;
            }
        }
        let f = self.n_frames().max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= f);
        acc
    }

    /// Standard error of the mean image, per pixel.
    pub fn mean_standard_error(&self) -> Vec<f64> {
        let n = self.frame_len();
        let f = self.n_frames();
        if f < 2 {
            return vec![f64::INFINITY; n];
        }
        let mean = self.mean_image();
        let mut acc = vec![0.0; n];
        for k in 0..f {
            for ((a, &v), m) in acc.iter_mut().zip(self.frame(k)).zip(&mean) {
                *a += (v as f64 - m).powi(2);
            }
        }
        acc.iter().map(|a| (a / ((f - 1) * f) as f64).sqrt()).collect()
    }

    /// Distinct phase tags in order of first appearance with their frame indices.
    pub fn split_by_phase(&self) -> Vec<(f64, Vec<usize>)> {
        let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
        for (k, &p) in self.phases.iter().enumerate() {
            match groups.iter_mut().find(|g| g.0.to_bits() == p.to_bits()) {
                Some(g) => g.1.push(k),
                None => groups.push((p, vec![k])),
            }
        }
        groups
    }

    pub fn subset(&self, frames: &[usize]) -> FrameStack {
        let mut data = Vec::with_capacity(frames.len() * self.frame_len());
        for &k in frames {
            data.extend_from_slice(self.frame(k));
        }
        FrameStack {
            height: self.height,
            width: self.width,
            phases: frames.iter().map(|&k| self.phases[k]).collect(),
            data,
            filter: self.filter,
            calibration: self.calibration,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let to_u32 = |v: usize, what: &str| {
            u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
        };
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.n_frames() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&to_u32(self.n_frames(), "frame count")?.to_le_bytes());
        out.extend_from_slice(&to_u32(self.height, "height")?.to_le_bytes());
        out.extend_from_slice(&to_u32(self.width, "width")?.to_le_bytes());
        out.extend_from_slice(&self.flags().to_le_bytes());
        for p in &self.phases {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!("truncated header ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format("bad magic, not a frame stack".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        let (n, h, w, flags) = (word(0), word(1), word(2), word(3) as u32);
        if flags & !(FLAG_SHIFTED | FLAG_CALIBRATION) != 0 {
            return Err(Error::Format(format!("unknown flag bits {flags:#x}")));
        }
        let pixels = n
            .checked_mul(h)
            .and_then(|x| x.checked_mul(w))
            .ok_or_else(|| Error::Format("dimension overflow".into()))?;
        let expected = pixels
            .checked_mul(4)
            .and_then(|x| x.checked_add(8 * n))
            .and_then(|x| x.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::Format("dimension overflow".into()))?;
        if bytes.len() != expected {
            return Err(Error::Format(format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let mut off = HEADER_LEN;
        let phases: Vec<f64> = (0..n)
            .map(|k| f64::from_le_bytes(bytes[off + 8 * k..off + 8 * k + 8].try_into().unwrap()))
            .collect();
        off += 8 * n;
        let data: Vec<f32> = bytes[off..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut stack = FrameStack::new(h, w, phases, data)?;
        stack.filter = if flags & FLAG_SHIFTED != 0 { FilterTag::Shifted } else { FilterTag::Degenerate };
        stack.calibration = flags & FLAG_CALIBRATION != 0;
        Ok(stack)
    }
}

pub fn write_stack(stack: &FrameStack, path: &Path) -> Result<()> {
    let bytes = stack.to_bytes()?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_stack(path: &Path) -> Result<FrameStack> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    FrameStack::from_bytes(&bytes)
}

/// Quadrature covariance of the sampled classical amplitudes.
pub fn amplitude_covariance(state: &GaussianState, filter: FilterTag) -> DMatrix<f64> {
    let n = state.cov.nrows();
    let q = &state.cov - DMatrix::identity(n, n);
    match filter {
        FilterTag::Degenerate => q,
        FilterTag::Shifted => {
            // Average with the copy rotated by pi/2: normal moments are
            // invariant, anomalous ones change sign.
            let r = DMatrix::from_fn(n, n, |a, b| {
                if a / 2 != b / 2 {
                    0.0
                } else if a % 2 == 0 && b % 2 == 1 {
                    -1.0
                } else if a % 2 == 1 && b % 2 == 0 {
                    1.0
                } else {
                    0.0
                }
            });
            (&q + &r * &q * r.transpose()) * 0.5
        }
    }
}

/// Principal square root of the PSD part of `q`, plus the clipped trace.
/// The root depends continuously on `q`, so one seed gives strongly coupled
/// frames for nearby states (common random numbers across a phase scan).
fn psd_factor(q: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let eig = SymmetricEigen::new(q.clone());
    let scale = eig.eigenvalues.amax().max(1e-300);
    let clipped: f64 = eig.eigenvalues.iter().filter(|&&e| e < 0.0).map(|e| -e).sum();
    let root = eig.eigenvalues.map(|e| if e > 1e-12 * scale { e.sqrt() } else { 0.0 });
    let v = &eig.eigenvectors;
    (v * DMatrix::from_diagonal(&root) * v.transpose(), clipped)
}

struct SectorSampler {
    l: usize,
    carrier: DMatrix<f64>,
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

/// Draws `n_frames` frames of the output state, all tagged with `phase`.
///
/// Frame `k` uses its own ChaCha stream `k` under `seed`, so the result does
/// not depend on how frames are split across threads.
pub fn sample_frames(
    output: &OutputState,
    phase: f64,
    n_frames: usize,
    seed: u64,
    detector: &DetectorModel,
    filter: FilterTag,
) -> Result<FrameStack> {
    let grid = output.grid;
    let l_max = output.max_oam();
    if l_max > grid.max_oam() {
        return Err(Error::Contract(format!(
            "OAM {l_max} exceeds the {} representable on {} azimuthal bins",
            grid.max_oam(),
            grid.n_theta
        )));
    }
    let mut clipped = 0.0;
    let samplers: Vec<SectorSampler> = output
        .sectors
        .iter()
        .map(|s| {
            let (factor, c) = psd_factor(&amplitude_covariance(&s.state, filter));
            clipped += c;
            SectorSampler { l: s.l, carrier: s.carrier.clone(), mean: s.state.mean.clone(), factor }
        })
        .collect();
    let top = output
        .sectors
        .iter()
        .flat_map(|s| (0..s.state.n_modes()).map(move |k| s.state.mean_photons(k)))
        .fold(0.0, f64::max);
    if n_frames > 0 && top < 10.0 {
        log::warn!("strongest mode holds {top:.3} photons; semiclassical frames are biased at low gain");
    }
    if clipped > 1e-9 {
        log::info!("clipped {clipped:.3e} of non-classical amplitude variance");
    }

    let (h, w) = (grid.n_q, grid.n_theta);
    let fft = FftPlanner::<f64>::new().plan_fft_inverse(w);
    let norm = (2.0 * PI).sqrt().recip();
    let mut data = vec![0f32; n_frames * h * w];
    data.par_chunks_mut(h * w).enumerate().for_each(|(k, frame)| {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let mut spectra = vec![Complex64::new(0.0, 0.0); h * w];
        for s in &samplers {
            let xi: DVector<f64> = DVector::from_fn(s.factor.ncols(), |_, _| StandardNormal.sample(&mut rng));
            let xp = &s.mean + &s.factor * xi;
            let nc = s.carrier.ncols();
            let alpha = |m: usize| Complex64::new(xp[2 * m], xp[2 * m + 1]) * 0.5;
            let signed: Vec<(i64, usize)> =
                if s.l == 0 { vec![(0, 0)] } else { vec![(s.l as i64, 0), (-(s.l as i64), nc)] };
            for (l, off) in signed {
                let bin = l.rem_euclid(w as i64) as usize;
                let amps: Vec<Complex64> = (0..nc).map(|c| alpha(off + c)).collect();
                for row in 0..h {
                    let mut a = Complex64::new(0.0, 0.0);
                    for (c, amp) in amps.iter().enumerate() {
                        a += amp * s.carrier[(row, c)];
                    }
                    spectra[row * w + bin] += a * norm;
                }
            }
        }
        for row in 0..h {
            let line = &mut spectra[row * w..(row + 1) * w];
            fft.process(line);
            let area = grid.pixel_area(row);
            for (col, e) in line.iter().enumerate() {
                frame[row * w + col] = detector.apply(e.norm_sqr() * area, &mut rng);
            }
        }
    });
    let mut stack = FrameStack::new(h, w, vec![phase; n_frames], data)?;
    stack.filter = filter;
    stack.seed = Some(seed);
    Ok(stack)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::gaussian::OpaOperation;
    use crate::grid::TransverseGrid;
    use crate::interferometer::SectorState;

    fn one_mode_output(state: GaussianState) -> OutputState {
        let grid = TransverseGrid::new(4, 1, 1.0).unwrap();
        let r = (grid.radial_weight(0)).sqrt().recip();
        OutputState {
            grid,
            sectors: vec![SectorState { l: 0, carrier: DMatrix::from_element(1, 1, r), state }],
        }
    }

    fn g2_of(stack: &FrameStack) -> (f64, f64) {
        let totals: Vec<f64> = (0..stack.n_frames()).map(|k| stack.frame(k).iter().map(|&v| v as f64).sum()).collect();
        let m = totals.iter().sum::<f64>() / totals.len() as f64;
        let m2 = totals.iter().map(|t| t * t).sum::<f64>() / totals.len() as f64;
        (m, m2 / (m * m))
    }

    #[test]
    fn vacuum_frames_are_dark() {
        let out = one_mode_output(GaussianState::vacuum(1).unwrap());
        let s = sample_frames(&out, 0.0, 10, 1, &DetectorModel::default(), FilterTag::Degenerate).unwrap();
        assert!(s.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn thermal_mode_has_g2_of_two() {
        let out = one_mode_output(GaussianState::thermal(&[10.0]).unwrap());
        let s = sample_frames(&out, 0.0, 100_000, 7, &DetectorModel::default(), FilterTag::Degenerate).unwrap();
        let (m, g2) = g2_of(&s);
        assert!((m - 10.0).abs() < 0.15, "mean {m}");
        assert!((g2 - 2.0).abs() < 0.02, "g2 {g2}");
    }

    #[test]
    fn squeezed_mode_matches_clipped_model() {
        let g = 10f64.sqrt().asinh();
        let mut st = GaussianState::vacuum(1).unwrap();
        st.apply_opa(&OpaOperation::single(0, g, 0.0).unwrap()).unwrap();
        let out = one_mode_output(st);
        let s = sample_frames(&out, 0.0, 100_000, 3, &DetectorModel::default(), FilterTag::Degenerate).unwrap();
        let (m, g2) = g2_of(&s);
        // Only the anti-squeezed quadrature survives clipping: mean (e^{2g}-1)/4, g2 = 3.
        let mean = ((2.0 * g).exp() - 1.0) / 4.0;
        assert!((m - mean).abs() < 0.02 * mean, "mean {m} vs {mean}");
        assert!((g2 - 3.0).abs() < 0.05, "g2 {g2}");
    }

    #[test]
    fn seeds_reproduce_and_differ() {
        let mut cfg = Config::default();
        cfg.grid.n_q = 64;
        cfg.grid.n_theta = 64;
        cfg.pump_width = 1.0;
        let out = crate::Interferometer::from_config(&cfg).unwrap().run().unwrap();
        let d = DetectorModel::new(0.9, 0.5, Some(1e9)).unwrap();
        let a = sample_frames(&out, 0.0, 6, 11, &d, FilterTag::Shifted).unwrap();
        let b = sample_frames(&out, 0.0, 6, 11, &d, FilterTag::Shifted).unwrap();
        let c = sample_frames(&out, 0.0, 6, 12, &d, FilterTag::Shifted).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert_ne!(a.data, c.data);
        // The first frames do not depend on how many frames are drawn.
        let short = sample_frames(&out, 0.0, 2, 11, &d, FilterTag::Shifted).unwrap();
        assert_eq!(short.data[..], a.data[..short.data.len()]);
    }

    #[test]
    fn stack_round_trip_and_errors() {
        let stack = FrameStack::new(2, 3, vec![0.5, -1.0], (0..12).map(|v| v as f32 * 0.25).collect()).unwrap();
        let bytes = stack.to_bytes().unwrap();
        let back = FrameStack::from_bytes(&bytes).unwrap();
        assert_eq!(back, stack);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let empty = FrameStack::new(5, 7, vec![], vec![]).unwrap();
        assert_eq!(FrameStack::from_bytes(&empty.to_bytes().unwrap()).unwrap(), empty);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(FrameStack::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(FrameStack::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut huge = bytes[..HEADER_LEN].to_vec();
        huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[16..20].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(FrameStack::from_bytes(&huge), Err(Error::Format(_))));
    }
}
