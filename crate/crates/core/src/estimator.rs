//! Model-free MSD estimation by maximizing the Toeplitz marginal likelihood
//! of Fourier-ring time series.
//!
//! The free parameters are the log-MSD `θ̃` at a handful of log-spaced lags
//! and the log noise level `B̃ = log(B/2)`. A GP in log-lag space carries `θ̃`
//! to every lag the likelihood needs. Its range is fit once on the initial
//! curve and then held fixed, so the interpolated log-MSD is a fixed linear
//! map of `θ̃` and the objective stays smooth.

use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::curve::MsdCurve;
use crate::error::{Error, Result};
use crate::gpr::{self, GpModel, GpOptions};
use crate::optim::{minimize_lbfgs, LbfgsOptions, OptimResult};
use crate::spectral::{amplitudes_from_power, ddm_uq_baseline, structure_function, RingSpectrum};
use crate::stackio::{normalize, ImageStack};
use crate::toeplitz::{trace_matrix, ToeplitzCov};

/// Objective value returned when a covariance is not positive definite.
pub const NPD_PENALTY: f64 = 1e12;
/// Central-difference step for `∂γ/∂θ̃` in the Fisher information.
pub const FISHER_FD_STEP: f64 = 1e-4;
/// A ring carries signal when its amplitude exceeds this many standard
/// errors of its mean power.
pub const SIGNAL_SIGMAS: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubsampleSpec {
    pub eps1: f64,
    pub eps2: f64,
    pub n_s_max: usize,
    pub a: f64,
    pub lag_count: usize,
    /// Stage-1 decimation; `None` means `max(1, ⌊n/100⌋)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coarse_factor: Option<usize>,
    pub b_init_slope: f64,
}

impl Default for SubsampleSpec {
    fn default() -> Self {
        SubsampleSpec {
            eps1: 0.001,
            eps2: 0.001,
            n_s_max: 20,
            a: 0.95,
            lag_count: 6,
            coarse_factor: None,
            b_init_slope: 0.9,
        }
    }
}

impl SubsampleSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.eps1 > 0.0
            && self.eps2 > 0.0
            && self.n_s_max >= 1
            && self.a > 0.0
            && self.a <= 1.0
            && self.lag_count >= 2
            && self.coarse_factor.is_none_or(|c| c >= 1)
            && self.b_init_slope.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::validation(format!("invalid subsampling settings: {self:?}")))
        }
    }

    pub fn coarse_factor_for(&self, n: usize) -> usize {
        self.coarse_factor.unwrap_or((n / 100).max(1))
    }
}

/// `(θ̃ at the subsampled lags, B̃ = log(B/2))`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamVector {
    pub theta_tilde: Vec<f64>,
    pub b_tilde: f64,
}

impl ParamVector {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.theta_tilde.clone();
        v.push(self.b_tilde);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        let (b, t) = v.split_last().expect("non-empty parameter vector");
        ParamVector { theta_tilde: t.to_vec(), b_tilde: *b }
    }

    pub fn noise_b(&self) -> f64 {
        2.0 * self.b_tilde.exp()
    }
}

/// Smallest `J₀` whose cumulative amplitude share reaches `1 − ε₁`, then
/// raised to the last tail ring with amplitude at least `ε₂`.
pub fn select_rings(amps: &[f64], eps1: f64, eps2: f64) -> usize {
    let j = amps.len();
    if j == 0 {
        return 0;
    }
    let total: f64 = amps.iter().sum();
    let mut j0 = j;
    if total > 0.0 {
        let mut acc = 0.0;
        for (k, a) in amps.iter().enumerate() {
            acc += a;
            if acc / total >= 1.0 - eps1 - 1e-12 {
                j0 = k + 1;
                break;
            }
        }
    }
    for k in j0..j {
        if amps[k] >= eps2 {
            j0 = k + 1;
        }
    }
    j0
}

fn log_schedule(top: f64, count: usize, cap: usize) -> Vec<usize> {
    let delta = if count > 1 { top.ln() / (count - 1) as f64 } else { 0.0 };
    let mut out: Vec<usize> = (0..count)
        .map(|k| {
            let v = (k as f64 * delta).exp();
            // guard against exp(log(x)) landing a hair above an integer
            ((v - 1e-9).ceil().max(1.0) as usize).min(cap)
        })
        .collect();
    out.dedup();
    out
}

/// Ring indices (1-based) roughly equally spaced in `log q`.
pub fn subsample_q(j0: usize, n_s_max: usize, a: f64) -> Vec<usize> {
    if j0 == 0 {
        return Vec::new();
    }
    log_schedule(a * j0 as f64, n_s_max, j0)
}

/// Lag indices roughly equally spaced in `log Δt`, always `1` and `n − 1`.
pub fn subsample_lags(n: usize, lag_count: usize) -> Result<Vec<usize>> {
    if n < 3 {
        return Err(Error::validation("need at least 3 frames"));
    }
    Ok(log_schedule((n - 1) as f64, lag_count.max(2), n - 1))
}

/// Starting point: a damped power law through the direct-inversion MSD at
/// the first two lags, and the smallest log ring power for `B̃`.
///
/// `theta_di` holds the direct-inversion MSD at `dt_min` and `2·dt_min`;
/// if either is missing or non-positive the curve starts flat at `px_size²`
/// with slope `b`.
pub fn init_params(
    theta_di: [Option<f64>; 2],
    sub_lag_times: &[f64],
    dt_min: f64,
    px_size: f64,
    power: &[f64],
    b: f64,
) -> ParamVector {
    let (t1, t2) = (dt_min, 2.0 * dt_min);
    let (base, slope) = match theta_di {
        [Some(a), Some(c)] if a > 0.0 && c > 0.0 && a.is_finite() && c.is_finite() => {
            (a.ln(), b * (c.ln() - a.ln()) / (t2.ln() - t1.ln()))
        }
        _ => ((px_size * px_size).ln(), b),
    };
    let theta_tilde = sub_lag_times.iter().map(|t| base + slope * (t.ln() - t1.ln())).collect();
    let b_tilde = power.iter().map(|p| p.ln()).fold(f64::INFINITY, f64::min);
    ParamVector { theta_tilde, b_tilde }
}

/// Per-ring data entering the likelihood.
#[derive(Debug, Clone)]
pub struct RingData {
    /// 1-based ring index in the spectrum.
    pub index: usize,
    pub q: f64,
    pub pixels: f64,
    pub power: f64,
    /// Full-length `n × n` Gram matrix, shared between stages.
    pub gram: Arc<Vec<f64>>,
}

pub fn ring_data(spec: &RingSpectrum, rings_1based: &[usize]) -> Vec<RingData> {
    let power = spec.total_power();
    rings_1based
        .par_iter()
        .map(|&j| RingData {
            index: j,
            q: spec.rings[j - 1].q,
            pixels: spec.rings[j - 1].pixel_count(),
            power: power[j - 1],
            gram: Arc::new(spec.gram(j - 1)),
        })
        .collect()
}

/// Marginal likelihood on one lag grid (stride `c` in frames).
#[derive(Debug, Clone)]
pub struct MarginalLikelihood {
    rings: Vec<RingData>,
    grams: Vec<Arc<Vec<f64>>>,
    /// Series length on this grid.
    pub len: usize,
    pub stride: usize,
    /// Rows: lags `k·stride`, `k = 1..len`; columns: subsampled lags.
    weights: Vec<Vec<f64>>,
    /// Floor reference for the amplitude plug-in.
    all_power: Vec<f64>,
}

impl MarginalLikelihood {
    /// `gp` maps `ln(lag time)` at the subsampled lags to `θ̃`; only its
    /// hyperparameters are used.
    pub fn new(rings: Vec<RingData>, n: usize, stride: usize, dt_min: f64, gp: &GpModel) -> Result<Self> {
        if rings.is_empty() {
            return Err(Error::validation("no rings selected"));
        }
        let len = (n - 1) / stride + 1;
        if len < 2 {
            return Err(Error::validation("lag grid too short"));
        }
        let grams = rings
            .par_iter()
            .map(|r| {
                if stride == 1 {
                    Arc::clone(&r.gram)
                } else {
                    let mut d = vec![0.0; len * len];
                    for a in 0..len {
                        for b in 0..len {
                            d[a * len + b] = r.gram[a * stride * n + b * stride];
                        }
                    }
                    Arc::new(d)
                }
            })
            .collect();
        let eval: Vec<f64> = (1..len).map(|k| ((k * stride) as f64 * dt_min).ln()).collect();
        let weights = gp.weights_1d(&eval);
        let all_power = rings.iter().map(|r| r.power).collect();
        Ok(MarginalLikelihood { rings, grams, len, stride, weights, all_power })
    }

    pub fn rings(&self) -> &[RingData] {
        &self.rings
    }

    /// Same data with every `q` shifted by `dq` (floored at zero).
    pub fn with_q_shift(&self, dq: f64) -> Self {
        let mut out = self.clone();
        out.rings.iter_mut().for_each(|r| r.q = (r.q + dq).max(0.0));
        out
    }

    /// Total number of real observations, `2·Σ N_j·len`.
    pub fn observations(&self) -> f64 {
        2.0 * self.rings.iter().map(|r| r.pixels).sum::<f64>() * self.len as f64
    }

    /// Log-MSD at lags `stride, 2·stride, …`.
    pub fn log_theta(&self, theta_tilde: &[f64]) -> Vec<f64> {
        self.weights.iter().map(|w| w.iter().zip(theta_tilde).map(|(a, b)| a * b).sum()).collect()
    }

    /// Amplitudes from the power plug-in at noise level `b`.
    pub fn amplitudes(&self, b: f64) -> Vec<f64> {
        amplitudes_from_power(&self.all_power, b).a
    }

    /// Autocovariance of the real (or imaginary) part of one ring.
    pub fn gamma(&self, q: f64, a: f64, b: f64, log_theta: &[f64]) -> Vec<f64> {
        let mut g = Vec::with_capacity(self.len);
        g.push(a / 4.0 + b / 4.0);
        for lt in log_theta {
            g.push(a / 4.0 * (-q * q * lt.exp() / 4.0).exp());
        }
        g
    }

    /// Negative log marginal likelihood; `NPD_PENALTY` on a non-PD covariance.
    pub fn neg_log_marginal(&self, psi: &ParamVector) -> f64 {
        if psi.theta_tilde.iter().any(|v| !v.is_finite()) || !psi.b_tilde.is_finite() {
            return NPD_PENALTY;
        }
        let b = psi.noise_b();
        let amps = self.amplitudes(b);
        let lt = self.log_theta(&psi.theta_tilde);
        let n = self.len as f64;
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let terms: Vec<Option<f64>> = self
            .rings
            .par_iter()
            .zip(&self.grams)
            .zip(&amps)
            .map(|((ring, gram), &a)| {
                let cov = ToeplitzCov::new(self.gamma(ring.q, a, b, &lt)).ok()?;
                let inv = cov.inverse().ok()?;
                let v = ring.pixels * n * ln2pi + ring.pixels * inv.logdet + 0.5 * inv.trace_with(gram);
                v.is_finite().then_some(v)
            })
            .collect();
        // fixed-order reduction keeps results independent of the thread count
        let mut total = 0.0;
        for t in terms {
            match t {
                Some(v) => total += v,
                None => return NPD_PENALTY,
            }
        }
        total
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageDiagnostics {
    pub stride: usize,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    pub neg_log_marginal: f64,
    pub gp_range: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct UqDiagnostics {
    pub m_particles: f64,
    pub fisher: Vec<Vec<f64>>,
    pub fisher_psd: bool,
    pub pseudo_inverse: bool,
    pub sd: Vec<f64>,
    pub psi_q_minus: Vec<f64>,
    pub psi_q_plus: Vec<f64>,
    pub psi_lower: Vec<f64>,
    pub psi_upper: Vec<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateDiagnostics {
    pub j0: usize,
    /// Selected rings `𝒥_s` (1-based) after dropping floored amplitudes.
    pub rings: Vec<usize>,
    pub dropped_rings: Vec<usize>,
    /// Subsampled lag indices `𝒯_s`.
    pub lags: Vec<usize>,
    pub coarse_factor: usize,
    pub init: ParamVector,
    pub init_fallback: bool,
    pub stages: Vec<StageDiagnostics>,
    pub converged: bool,
    pub uq: Option<UqDiagnostics>,
}

#[derive(Debug, Clone)]
pub struct MsdEstimate {
    pub curve: MsdCurve,
    pub params: ParamVector,
    /// Amplitudes of the selected rings at the final noise level.
    pub amplitudes: Vec<f64>,
    pub b: f64,
    pub diagnostics: EstimateDiagnostics,
    likelihood: MarginalLikelihood,
    full_weights: Vec<Vec<f64>>,
    bounds: (Vec<f64>, Vec<f64>),
    lbfgs: LbfgsOptions,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorOptions {
    pub subsample: SubsampleSpec,
    pub lbfgs: LbfgsOptions,
    /// Fallback initial MSD scale when direct inversion fails.
    pub px_size: f64,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions { subsample: SubsampleSpec::default(), lbfgs: LbfgsOptions::default(), px_size: 1.0 }
    }
}

fn fit_lag_gp(sub_lag_times: &[f64], theta_tilde: &[f64]) -> Result<GpModel> {
    let x: Vec<Vec<f64>> = sub_lag_times.iter().map(|t| vec![t.ln()]).collect();
    let opts = GpOptions { min_ranges: Some(gpr::max_gaps(&x)), ..Default::default() };
    gpr::fit_with(&x, theta_tilde, &opts)
}

fn run_stage(
    lik: &MarginalLikelihood,
    start: &[f64],
    bounds: &(Vec<f64>, Vec<f64>),
    opts: &LbfgsOptions,
) -> OptimResult {
    let scale = 1.0 / lik.observations();
    let objective = |v: &[f64]| {
        let f = lik.neg_log_marginal(&ParamVector::from_slice(v));
        if f >= NPD_PENALTY {
            NPD_PENALTY
        } else {
            f * scale
        }
    };
    let mut r = minimize_lbfgs(objective, start, &bounds.0, &bounds.1, opts);
    r.f /= scale;
    r
}

/// Full pipeline on a normalized stack.
pub fn optimize(stack: &ImageStack, opts: &EstimatorOptions, m_particles: Option<f64>) -> Result<MsdEstimate> {
    let norm = normalize(stack);
    let spec = crate::spectral::fft_stack(&norm)?;
    let opts = EstimatorOptions { px_size: stack.px_size, ..*opts };
    let mut est = estimate_from_spectrum(&spec, &opts)?;
    if let Some(m) = m_particles {
        quantify_uncertainty(&mut est, m)?;
    }
    Ok(est)
}

/// Two-stage estimation from ring time series.
pub fn estimate_from_spectrum(spec: &RingSpectrum, opts: &EstimatorOptions) -> Result<MsdEstimate> {
    opts.subsample.validate()?;
    let ss = &opts.subsample;
    let n = spec.n;
    if n < 3 {
        return Err(Error::validation("need at least 3 frames"));
    }
    let dt = spec.dt_min;
    let power = spec.total_power();
    let amps0: Vec<f64> = power.iter().map(|p| 2.0 * p).collect();
    let j0 = select_rings(&amps0, ss.eps1, ss.eps2);
    let candidates = subsample_q(j0, ss.n_s_max, ss.a);
    let sub_lags = subsample_lags(n, ss.lag_count)?;
    let sub_times: Vec<f64> = sub_lags.iter().map(|&k| k as f64 * dt).collect();

    // initial noise level and the rings it leaves with usable amplitude
    let b_tilde0 = power.iter().map(|p| p.ln()).fold(f64::INFINITY, f64::min);
    let b0 = 2.0 * b_tilde0.exp();
    let amp_b0 = amplitudes_from_power(&power, b0);
    let (rings, dropped): (Vec<usize>, Vec<usize>) = candidates.iter().partition(|&&j| !amp_b0.floored[j - 1]);
    let significant = rings.iter().any(|&j| {
        let ring = &spec.rings[j - 1];
        let se = 2.0 * power[j - 1] / (ring.pixel_count() * n as f64).sqrt();
        amp_b0.a[j - 1] > SIGNAL_SIGMAS * se
    });
    if rings.is_empty() || !significant {
        return Err(Error::DegenerateInput("no_signal: no ring amplitude rises above the noise floor".into()));
    }
    info!("J0 = {j0}, {} rings selected, lags {:?}", rings.len(), sub_lags);

    // direct inversion at the first two lags
    let sf = structure_function(spec, &[1, 2])?;
    let di = ddm_uq_baseline(&sf, spec, &rings);
    let di_at = |k: usize| di.lag_reported[k].then(|| di.curve.msd[k]).filter(|v| *v > 0.0 && v.is_finite());
    let theta_di = [di_at(0), di_at(1)];
    let init_fallback = theta_di.iter().any(Option::is_none);
    if init_fallback {
        warn!("direct inversion unavailable at the first two lags; flat initialization");
    }
    let mut init = init_params(theta_di, &sub_times, dt, opts.px_size, &power, ss.b_init_slope);

    let data = ring_data(spec, &rings);
    let q_min_sel = data.iter().map(|r| r.q).fold(f64::INFINITY, f64::min);
    let q_max_sel = data.iter().map(|r| r.q).fold(0.0, f64::max);
    let p_max = power.iter().cloned().fold(0.0, f64::max);
    let (th_lo, th_hi) = ((4e-6 / (q_max_sel * q_max_sel)).ln(), (4e4 / (q_min_sel * q_min_sel)).ln());
    let mut lower = vec![th_lo; sub_lags.len()];
    let mut upper = vec![th_hi; sub_lags.len()];
    lower.push(b_tilde0 - 25.0);
    upper.push(p_max.ln());
    let bounds = (lower, upper);
    let clamp = |v: Vec<f64>| -> Vec<f64> {
        v.iter().enumerate().map(|(i, x)| x.clamp(bounds.0[i], bounds.1[i])).collect()
    };
    init = ParamVector::from_slice(&clamp(init.to_vec()));

    let c = ss.coarse_factor_for(n);
    let mut stages = Vec::new();
    let mut psi = init.to_vec();
    // hyperparameters come from the smooth initial curve; later knots only move the mean
    let gp0 = fit_lag_gp(&sub_times, &psi[..sub_lags.len()])?;
    let refit = |psi: &[f64]| gpr::fit_fixed(gp0.inputs(), &psi[..sub_lags.len()], &gp0.ranges, gp0.nugget);
    if c > 1 && (n - 1) / c >= 2 {
        let t0 = Instant::now();
        let gp = refit(&psi)?;
        let lik = MarginalLikelihood::new(data.clone(), n, c, dt, &gp)?;
        let r = run_stage(&lik, &psi, &bounds, &opts.lbfgs);
        info!("stage 1 (stride {c}): {} iterations, f = {:.6e}", r.iterations, r.f);
        stages.push(stage_diag(&r, c, gp.ranges[0], t0));
        psi = r.x;
    }
    let t0 = Instant::now();
    let gp = refit(&psi)?;
    let lik = MarginalLikelihood::new(data, n, 1, dt, &gp)?;
    let r = run_stage(&lik, &psi, &bounds, &opts.lbfgs);
    info!("stage 2: {} iterations, f = {:.6e}", r.iterations, r.f);
    stages.push(stage_diag(&r, 1, gp.ranges[0], t0));
    let params = ParamVector::from_slice(&r.x);
    let converged = stages.iter().all(|s| s.converged);
    if !converged {
        warn!("optimizer stopped before convergence");
    }

    let lags: Vec<f64> = (1..n).map(|k| k as f64 * dt).collect();
    let full_weights = lik.weights.clone();
    let msd: Vec<f64> = lik.log_theta(&params.theta_tilde).iter().map(|v| v.exp()).collect();
    let curve = MsdCurve::new(lags, msd)?;
    let b = params.noise_b();
    let amplitudes = lik.amplitudes(b);
    Ok(MsdEstimate {
        curve,
        params,
        amplitudes,
        b,
        diagnostics: EstimateDiagnostics {
            j0,
            rings,
            dropped_rings: dropped,
            lags: sub_lags,
            coarse_factor: c,
            init,
            init_fallback,
            stages,
            converged,
            uq: None,
        },
        likelihood: lik,
        full_weights,
        bounds,
        lbfgs: opts.lbfgs,
    })
}

fn stage_diag(r: &OptimResult, stride: usize, gp_range: f64, t0: Instant) -> StageDiagnostics {
    StageDiagnostics {
        stride,
        iterations: r.iterations,
        evaluations: r.evaluations,
        converged: r.converged,
        grad_norm: r.grad_norm,
        neg_log_marginal: r.f,
        gp_range,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

/// `∂γ/∂ψ` for one ring at `psi`, `θ̃` by central differences through the
/// interpolant, `B̃` in closed form (the amplitude plug-in moves with `B`).
pub fn gamma_derivatives(lik: &MarginalLikelihood, ring: usize, a: f64, psi: &ParamVector) -> Vec<Vec<f64>> {
    let q = lik.rings[ring].q;
    let b = psi.noise_b();
    let mut out = Vec::with_capacity(psi.theta_tilde.len() + 1);
    for i in 0..psi.theta_tilde.len() {
        let mut up = psi.theta_tilde.clone();
        let mut dn = psi.theta_tilde.clone();
        up[i] += FISHER_FD_STEP;
        dn[i] -= FISHER_FD_STEP;
        let gu = lik.gamma(q, a, b, &lik.log_theta(&up));
        let gd = lik.gamma(q, a, b, &lik.log_theta(&dn));
        out.push(gu.iter().zip(&gd).map(|(u, d)| (u - d) / (2.0 * FISHER_FD_STEP)).collect());
    }
    let lt = lik.log_theta(&psi.theta_tilde);
    let mut db = Vec::with_capacity(lik.len);
    db.push(0.0);
    for v in &lt {
        db.push(-b / 4.0 * (-q * q * v.exp() / 4.0).exp());
    }
    out.push(db);
    out
}

/// Observed Fisher information, rescaled to `m_particles` effective samples.
pub fn observed_fisher(lik: &MarginalLikelihood, psi: &ParamVector, m_particles: f64) -> Result<Vec<Vec<f64>>> {
    let b = psi.noise_b();
    let amps = lik.amplitudes(b);
    let lt = lik.log_theta(&psi.theta_tilde);
    let per_ring: Vec<Result<Vec<Vec<f64>>>> = (0..lik.rings.len())
        .into_par_iter()
        .map(|j| {
            let cov = ToeplitzCov::new(lik.gamma(lik.rings[j].q, amps[j], b, &lt))?;
            trace_matrix(&cov, &gamma_derivatives(lik, j, amps[j], psi))
        })
        .collect();
    let p = psi.theta_tilde.len() + 1;
    let mut f = vec![vec![0.0; p]; p];
    let mut total = 0.0;
    for (ring, tm) in lik.rings.iter().zip(per_ring) {
        let tm = tm?;
        total += ring.pixels;
        for r in 0..p {
            for s in 0..p {
                f[r][s] += ring.pixels * tm[r][s];
            }
        }
    }
    let scale = m_particles / total;
    f.iter_mut().flatten().for_each(|v| *v *= scale);
    Ok(f)
}

/// Adds 95% bounds to `est.curve`: a discretization envelope from refits with
/// every `q` shifted by `±q_min`, widened by `ζ_0.975` asymptotic standard
/// deviations from the observed Fisher information.
pub fn quantify_uncertainty(est: &mut MsdEstimate, m_particles: f64) -> Result<()> {
    if !(m_particles > 0.0) {
        return Err(Error::validation("effective sample size must be positive"));
    }
    let t0 = Instant::now();
    let lik = &est.likelihood;
    let psi = est.params.to_vec();
    let q_min = lik.rings.iter().map(|r| r.q).fold(f64::INFINITY, f64::min);
    let refit = |dq: f64| run_stage(&lik.with_q_shift(dq), &psi, &est.bounds, &est.lbfgs).x;
    let psi_minus = refit(-q_min);
    let psi_plus = refit(q_min);

    let fisher = observed_fisher(lik, &est.params, m_particles)?;
    let p = psi.len();
    let fm = DMatrix::from_fn(p, p, |r, s| 0.5 * (fisher[r][s] + fisher[s][r]));
    let eig = fm.clone().symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let fisher_psd = eig.eigenvalues.iter().all(|&l| l >= -1e-8 * max_eig.max(f64::MIN_POSITIVE));
    let (cov, pseudo) = match fm.clone().cholesky() {
        Some(c) => (c.inverse(), false),
        None => {
            warn!("observed Fisher information is singular; using the pseudo-inverse");
            let pinv = fm.pseudo_inverse(1e-12 * max_eig.max(f64::MIN_POSITIVE)).map_err(|e| Error::Numerical(e.into()))?;
            (pinv, true)
        }
    };
    let sd: Vec<f64> = (0..p).map(|k| cov[(k, k)].max(0.0).sqrt()).collect();
    let z = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(0.975);
    let lo: Vec<f64> = (0..p).map(|k| psi_minus[k].min(psi_plus[k]).min(psi[k]) - z * sd[k]).collect();
    let hi: Vec<f64> = (0..p).map(|k| psi_minus[k].max(psi_plus[k]).max(psi[k]) + z * sd[k]).collect();

    let nt = p - 1;
    let interp = |v: &[f64]| -> Vec<f64> {
        est.full_weights.iter().map(|w| w.iter().zip(&v[..nt]).map(|(a, b)| a * b).sum::<f64>().exp()).collect()
    };
    // interpolation weights can be negative, so re-bracket the point estimate
    let lower: Vec<f64> = interp(&lo).iter().zip(&est.curve.msd).map(|(l, m)| l.min(*m)).collect();
    let upper: Vec<f64> = interp(&hi).iter().zip(&est.curve.msd).map(|(u, m)| u.max(*m)).collect();
    est.curve = est.curve.clone().with_bounds(lower, upper)?;
    est.diagnostics.uq = Some(UqDiagnostics {
        m_particles,
        fisher,
        fisher_psd,
        pseudo_inverse: pseudo,
        sd,
        psi_q_minus: psi_minus,
        psi_q_plus: psi_plus,
        psi_lower: lo,
        psi_upper: hi,
        seconds: t0.elapsed().as_secs_f64(),
    });
    Ok(())
}

impl MsdEstimate {
    pub fn likelihood(&self) -> &MarginalLikelihood {
        &self.likelihood
    }
}

/// RMSE of `log₁₀` MSD against the truth, and the SD of the true `log₁₀` MSD.
pub fn rmse_log10(est: &MsdCurve, truth: &MsdCurve) -> Result<(f64, f64)> {
    if est.len() != truth.len() {
        return Err(Error::validation(format!("curve lengths differ: {} vs {}", est.len(), truth.len())));
    }
    let k = est.len();
    if k < 2 {
        return Err(Error::validation("need at least 2 lags"));
    }
    let lt: Vec<f64> = truth.msd.iter().map(|v| v.log10()).collect();
    let se: f64 = est.msd.iter().zip(&lt).map(|(e, t)| (e.log10() - t).powi(2)).sum();
    let mean = lt.iter().sum::<f64>() / k as f64;
    let ss: f64 = lt.iter().map(|t| (t - mean).powi(2)).sum();
    Ok(((se / k as f64).sqrt(), (ss / (k - 1) as f64).sqrt()))
}
