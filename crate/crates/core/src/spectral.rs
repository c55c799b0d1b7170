//! Reciprocal-space representation of an image stack.
//!
//! Each frame is transformed with the 2D DFT
//! `Ŷ(k) = Σ_x Y(x) exp(-2πi k·x / N_axis)` and scaled by `1/√N`
//! (`N = n1·n2`), giving `ŷ`. Every quantity in this crate (structure
//! functions, amplitudes `A_j`, the noise parameter `B`) is expressed in
//! these scaled units, so that for a ring pixel
//! `E|ŷ(t+Δt) − ŷ(t)|² = A_j (1 − f(q_j, Δt)) + B` and `E|ŷ|² = (A_j + B)/2`.
//!
//! Pixels are binned into rings by the rounded magnitude of their wrapped
//! integer frequency. A real frame satisfies `ŷ(−k) = conj ŷ(k)`, so each
//! ring stores one representative per conjugate pair with weight 2; all
//! ring statistics are identical to those over the full pixel set.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::curve::MsdCurve;
use crate::error::{Error, Result};
use crate::stackio::ImageStack;

/// Scaled 2D DFT of one row-major frame, full plane.
pub fn fft_frame(frame: &[f64], n1: usize, n2: usize) -> Vec<Complex64> {
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(n2);
    let col_fft = planner.plan_fft_forward(n1);
    fft_frame_with(frame, n1, n2, &row_fft, &col_fft)
}

fn fft_frame_with(
    frame: &[f64],
    n1: usize,
    n2: usize,
    row_fft: &Arc<dyn Fft<f64>>,
    col_fft: &Arc<dyn Fft<f64>>,
) -> Vec<Complex64> {
    assert_eq!(frame.len(), n1 * n2);
    let mut buf: Vec<Complex64> = frame.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    row_fft.process(&mut buf);
    let mut col = vec![Complex64::new(0.0, 0.0); n1];
    for c in 0..n2 {
        for r in 0..n1 {
            col[r] = buf[r * n2 + c];
        }
        col_fft.process(&mut col);
        for r in 0..n1 {
            buf[r * n2 + c] = col[r];
        }
    }
    let scale = 1.0 / ((n1 * n2) as f64).sqrt();
    buf.iter_mut().for_each(|v| *v *= scale);
    buf
}

/// Ring membership for a square `side × side` frame.
#[derive(Debug, Clone)]
pub struct RingGeometry {
    pub side: usize,
    pub px_size: f64,
    /// `q_j` for `j = 1..=J`, inverse micrometers.
    pub q: Vec<f64>,
    /// Per ring: flat indices of the stored representatives and their weights.
    pub members: Vec<Vec<(usize, f64)>>,
}

impl RingGeometry {
    pub fn ring_count(&self) -> usize {
        self.q.len()
    }

    /// `N_{S_j}`, the number of Fourier pixels in ring `j` (1-based).
    pub fn pixel_count(&self, j: usize) -> f64 {
        self.members[j - 1].iter().map(|m| m.1).sum()
    }
}

/// Wrapped integer frequency of DFT index `k` on an axis of length `n`.
fn wrapped(k: usize, n: usize) -> usize {
    k.min(n - k)
}

pub fn build_rings(n1: usize, n2: usize, px_size: f64) -> Result<RingGeometry> {
    if n1 != n2 {
        return Err(Error::UnsupportedGeometry(format!(
            "ring binning needs square frames, got {n1}x{n2}"
        )));
    }
    if !(px_size > 0.0) {
        return Err(Error::validation("pixel size must be positive"));
    }
    let side = n1;
    let big_n = (n1 * n2) as f64;
    let j_max = (big_n.sqrt() / 2.0).ceil() as usize - 1;
    let q = (1..=j_max)
        .map(|j| 2.0 * std::f64::consts::PI * j as f64 / (px_size * big_n.sqrt()))
        .collect();
    let mut members = vec![Vec::new(); j_max];
    for k1 in 0..side {
        for k2 in 0..side {
            let (f1, f2) = (wrapped(k1, side) as f64, wrapped(k2, side) as f64);
            let r = (f1 * f1 + f2 * f2).sqrt().round() as usize;
            if r == 0 || r > j_max {
                continue;
            }
            let p = k1 * side + k2;
            let partner = ((side - k1) % side) * side + (side - k2) % side;
            if p < partner {
                members[r - 1].push((p, 2.0));
            } else if p == partner {
                members[r - 1].push((p, 1.0));
            }
        }
    }
    Ok(RingGeometry { side, px_size, q, members })
}

/// Time series of every stored pixel of one ring.
#[derive(Debug, Clone)]
pub struct RingSeries {
    pub q: f64,
    /// Per stored pixel weight (2 for a conjugate pair, 1 otherwise).
    pub weights: Vec<f64>,
    /// Pixel-major: pixel `p` occupies `series[p*n..(p+1)*n]`.
    pub series: Vec<Complex64>,
}

impl RingSeries {
    pub fn pixel_count(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn stored_pixels(&self) -> usize {
        self.weights.len()
    }

    pub fn pixel(&self, p: usize, n: usize) -> &[Complex64] {
        &self.series[p * n..(p + 1) * n]
    }
}

#[derive(Debug, Clone)]
pub struct RingSpectrum {
    pub n: usize,
    pub dt_min: f64,
    pub rings: Vec<RingSeries>,
}

impl RingSpectrum {
    /// Assembles a spectrum from ring series, e.g. drawn from the latent model.
    pub fn from_rings(n: usize, dt_min: f64, rings: Vec<RingSeries>) -> Result<Self> {
        if n == 0 {
            return Err(Error::validation("spectrum needs at least one frame"));
        }
        if rings.windows(2).any(|w| !(w[1].q > w[0].q)) {
            return Err(Error::validation("ring magnitudes must be strictly increasing"));
        }
        for (j, r) in rings.iter().enumerate() {
            if r.series.len() != r.weights.len() * n || r.weights.is_empty() {
                return Err(Error::validation(format!("ring {} has inconsistent series length", j + 1)));
            }
        }
        Ok(RingSpectrum { n, dt_min, rings })
    }

    pub fn ring_count(&self) -> usize {
        self.rings.len()
    }

    pub fn q(&self) -> Vec<f64> {
        self.rings.iter().map(|r| r.q).collect()
    }

    /// Mean of `|ŷ|²` over the pixels and frames of each ring.
    pub fn total_power(&self) -> Vec<f64> {
        let n = self.n;
        self.rings
            .iter()
            .map(|ring| {
                let mut s = 0.0;
                for (p, w) in ring.weights.iter().enumerate() {
                    s += w * ring.pixel(p, n).iter().map(|c| c.norm_sqr()).sum::<f64>();
                }
                s / (ring.pixel_count() * n as f64)
            })
            .collect()
    }

    /// Weighted real-and-imaginary Gram matrix `Σ_p (re_p re_pᵀ + im_p im_pᵀ)`
    /// of ring `j` (0-based), `n × n` row-major.
    pub fn gram(&self, j: usize) -> Vec<f64> {
        let n = self.n;
        let ring = &self.rings[j];
        let mut g = vec![0.0; n * n];
        for (p, &w) in ring.weights.iter().enumerate() {
            let s = ring.pixel(p, n);
            for a in 0..n {
                let (ra, ia) = (w * s[a].re, w * s[a].im);
                let row = &mut g[a * n..(a + 1) * n];
                for (b, v) in row.iter_mut().enumerate().skip(a) {
                    *v += ra * s[b].re + ia * s[b].im;
                }
            }
        }
        for a in 0..n {
            for b in 0..a {
                g[a * n + b] = g[b * n + a];
            }
        }
        g
    }
}

/// Transforms a normalized stack and bins it into rings.
pub fn fft_stack(stack: &ImageStack) -> Result<RingSpectrum> {
    if stack.is_degenerate() {
        return Err(Error::DegenerateInput("stack is constant".into()));
    }
    let geom = build_rings(stack.n1, stack.n2, stack.px_size)?;
    let n = stack.n;
    let (n1, n2) = (stack.n1, stack.n2);
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(n2);
    let col_fft = planner.plan_fft_forward(n1);

    let mut rings: Vec<RingSeries> = geom
        .members
        .iter()
        .zip(&geom.q)
        .map(|(m, &q)| RingSeries {
            q,
            weights: m.iter().map(|x| x.1).collect(),
            series: vec![Complex64::new(0.0, 0.0); m.len() * n],
        })
        .collect();

    let chunk = rayon::current_num_threads().max(1) * 2;
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let spectra: Vec<Vec<Complex64>> = (start..end)
            .into_par_iter()
            .map(|k| fft_frame_with(stack.frame(k), n1, n2, &row_fft, &col_fft))
            .collect();
        for (offset, spec) in spectra.iter().enumerate() {
            let t = start + offset;
            for (ring, members) in rings.iter_mut().zip(&geom.members) {
                for (p, &(idx, _)) in members.iter().enumerate() {
                    ring.series[p * n + t] = spec[idx];
                }
            }
        }
    }
    // drop empty rings (possible only for tiny frames)
    rings.retain(|r| !r.weights.is_empty());
    RingSpectrum::from_rings(n, stack.dt_min, rings)
}

/// Image structure function at selected lags, rows = rings.
#[derive(Debug, Clone)]
pub struct StructureFunction {
    pub q: Vec<f64>,
    /// Lag indices `n_Δt` (lag time = index · dt_min).
    pub lag_index: Vec<usize>,
    pub lag_times: Vec<f64>,
    pub d: Vec<Vec<f64>>,
}

/// `D(q_j, Δt)` in scaled units: ring average of the time-averaged
/// `|ŷ(t+Δt) − ŷ(t)|²`.
pub fn structure_function(spec: &RingSpectrum, lags: &[usize]) -> Result<StructureFunction> {
    let n = spec.n;
    if let Some(&bad) = lags.iter().find(|&&l| l == 0 || l >= n) {
        return Err(Error::validation(format!("lag index {bad} outside 1..{}", n - 1)));
    }
    // FFT autocorrelation pays off once many lags are requested
    let use_fft = lags.len() > 8;
    let d = spec
        .rings
        .par_iter()
        .map(|ring| {
            let mut acc = vec![0.0; lags.len()];
            let mut scratch = FftScratch::new(if use_fft { n } else { 0 });
            for (p, &w) in ring.weights.iter().enumerate() {
                let s = ring.pixel(p, n);
                if use_fft {
                    let all = scratch.lag_msq(s);
                    for (a, &l) in acc.iter_mut().zip(lags) {
                        *a += w * all[l];
                    }
                } else {
                    for (a, &l) in acc.iter_mut().zip(lags) {
                        *a += w * direct_lag_msq(s, l);
                    }
                }
            }
            let total = ring.pixel_count();
            acc.iter().map(|v| v / total).collect::<Vec<f64>>()
        })
        .collect();
    Ok(StructureFunction {
        q: spec.q(),
        lag_index: lags.to_vec(),
        lag_times: lags.iter().map(|&l| l as f64 * spec.dt_min).collect(),
        d,
    })
}

fn direct_lag_msq(s: &[Complex64], lag: usize) -> f64 {
    let m = s.len() - lag;
    (0..m).map(|t| (s[t + lag] - s[t]).norm_sqr()).sum::<f64>() / m as f64
}

/// Mean squared increment of one series at every lag via FFT autocorrelation.
struct FftScratch {
    n: usize,
    fwd: Option<Arc<dyn Fft<f64>>>,
    inv: Option<Arc<dyn Fft<f64>>>,
    buf: Vec<Complex64>,
}

impl FftScratch {
    fn new(n: usize) -> Self {
        if n == 0 {
            return FftScratch { n, fwd: None, inv: None, buf: Vec::new() };
        }
        let mut planner = FftPlanner::new();
        let m = 2 * n;
        FftScratch {
            n,
            fwd: Some(planner.plan_fft_forward(m)),
            inv: Some(planner.plan_fft_inverse(m)),
            buf: vec![Complex64::new(0.0, 0.0); m],
        }
    }

    fn lag_msq(&mut self, s: &[Complex64]) -> Vec<f64> {
        let n = self.n;
        let m = 2 * n;
        self.buf[..n].copy_from_slice(s);
        self.buf[n..].iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        self.fwd.as_ref().unwrap().process(&mut self.buf);
        self.buf.iter_mut().for_each(|v| *v = Complex64::new(v.norm_sqr(), 0.0));
        self.inv.as_ref().unwrap().process(&mut self.buf);
        // buf[l] / m = Σ_t s(t+l) conj s(t)
        let power: Vec<f64> = s.iter().map(|c| c.norm_sqr()).collect();
        let mut prefix = vec![0.0; n + 1];
        for t in 0..n {
            prefix[t + 1] = prefix[t] + power[t];
        }
        let mut out = vec![0.0; n];
        for l in 1..n {
            let cnt = n - l;
            // Σ_{t<cnt} |s(t+l)|² + |s(t)|²
            let sq = (prefix[n] - prefix[l]) + prefix[cnt];
            let cross = self.buf[l].re / m as f64;
            out[l] = (sq - 2.0 * cross) / cnt as f64;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct AmplitudeEstimate {
    pub a: Vec<f64>,
    /// True where the raw estimate fell to or below the floor.
    pub floored: Vec<bool>,
}

pub const AMPLITUDE_FLOOR_RATIO: f64 = 1e-12;

/// Unbiased amplitude per ring given noise `b`:
/// `A_j = 2 · mean|ŷ|² − b`, clamped below at `1e-12 · max_j 2·mean|ŷ|²`.
pub fn amplitude_estimate(spec: &RingSpectrum, b: f64) -> AmplitudeEstimate {
    amplitudes_from_power(&spec.total_power(), b)
}

pub fn amplitudes_from_power(power: &[f64], b: f64) -> AmplitudeEstimate {
    let raw: Vec<f64> = power.iter().map(|p| 2.0 * p - b).collect();
    let scale = power.iter().map(|p| 2.0 * p).fold(0.0, f64::max);
    let floor = AMPLITUDE_FLOOR_RATIO * scale;
    let floor = if floor > 0.0 { floor } else { f64::MIN_POSITIVE };
    let floored = raw.iter().map(|&a| !(a > floor)).collect();
    let a = raw.iter().map(|&a| if a > floor { a } else { floor }).collect();
    AmplitudeEstimate { a, floored }
}

/// Per-(ring, lag) MSD from inverting `D = A(1 − exp(−q²θ/4)) + B`.
#[derive(Debug, Clone)]
pub struct InversionGrid {
    /// `theta[j][k]`; NaN where invalid.
    pub theta: Vec<Vec<f64>>,
    pub valid: Vec<Vec<bool>>,
}

pub fn invert_structure_function(sf: &StructureFunction, a: &[f64], b: f64) -> InversionGrid {
    let mut theta = Vec::with_capacity(sf.d.len());
    let mut valid = Vec::with_capacity(sf.d.len());
    for (j, row) in sf.d.iter().enumerate() {
        let q2 = sf.q[j] * sf.q[j];
        let (t, v): (Vec<f64>, Vec<bool>) = row
            .iter()
            .map(|&d| {
                let arg = a[j] / (a[j] - d + b);
                if arg > 0.0 && arg.is_finite() {
                    (4.0 / q2 * arg.ln(), true)
                } else {
                    (f64::NAN, false)
                }
            })
            .unzip();
        theta.push(t);
        valid.push(v);
    }
    InversionGrid { theta, valid }
}

/// Direct-inversion MSD estimate with median aggregation over rings.
#[derive(Debug, Clone)]
pub struct BaselineEstimate {
    /// Lags with at least three valid selected rings.
    pub curve: MsdCurve,
    pub b: f64,
    pub a: Vec<f64>,
    pub grid: InversionGrid,
    /// For every lag of the structure function: reported or not.
    pub lag_reported: Vec<bool>,
    pub diagnostic: Option<String>,
}

pub const BASELINE_MIN_VALID_RINGS: usize = 3;

/// Noise estimate: the smaller of the lag-averaged `D` at the largest ring
/// and the smallest `D` across rings at the first lag.
pub fn baseline_noise(sf: &StructureFunction) -> f64 {
    let last = sf.d.last().expect("structure function has rings");
    let tail = last.iter().sum::<f64>() / last.len() as f64;
    let first = sf.d.iter().map(|row| row[0]).fold(f64::INFINITY, f64::min);
    tail.min(first)
}

/// `selected` holds 1-based ring indices.
pub fn ddm_uq_baseline(sf: &StructureFunction, spec: &RingSpectrum, selected: &[usize]) -> BaselineEstimate {
    let b = baseline_noise(sf);
    let amps = amplitude_estimate(spec, b);
    let grid = invert_structure_function(sf, &amps.a, b);
    let mut lags = Vec::new();
    let mut msd = Vec::new();
    let mut reported = Vec::with_capacity(sf.lag_index.len());
    for k in 0..sf.lag_index.len() {
        let mut vals: Vec<f64> = selected
            .iter()
            .filter(|&&j| j >= 1 && j <= grid.theta.len() && grid.valid[j - 1][k])
            .map(|&j| grid.theta[j - 1][k])
            .collect();
        if vals.len() >= BASELINE_MIN_VALID_RINGS {
            lags.push(sf.lag_times[k]);
            msd.push(median(&mut vals));
            reported.push(true);
        } else {
            reported.push(false);
        }
    }
    let diagnostic = lags.is_empty().then(|| "no lag has enough valid rings".to_string());
    BaselineEstimate {
        curve: MsdCurve { lags, msd, lower: None, upper: None },
        b,
        a: amps.a,
        grid,
        lag_reported: reported,
        diagnostic,
    }
}

/// Median with the mean of the two middle values for even counts.
pub fn median(v: &mut [f64]) -> f64 {
    assert!(!v.is_empty(), "median of empty set");
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
