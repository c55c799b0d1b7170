//! Storage and loss moduli from MSD curves via the generalized
//! Stokes–Einstein relation.
//!
//! MSD curves are carried in µm² as elsewhere in the crate; [`gser`] itself
//! takes m² and the µm² entry points ([`moduli`], [`mc_moduli`]) convert.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::gamma;

use crate::curve::MsdCurve;
use crate::error::{Error, Result};
use crate::gpr::matern52;
use crate::optim::nelder_mead;
use crate::simkit::{cholesky_with_jitter, stream_rng};
use crate::spectral::median;
use crate::stackio::CurveTable;

pub const BOLTZMANN: f64 = 1.380649e-23;
pub const UM2_TO_M2: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialSpec {
    /// Kelvin.
    pub temperature: f64,
    /// Meters.
    pub radius: f64,
}

impl MaterialSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !(self.radius > 0.0) || !self.temperature.is_finite() || !self.radius.is_finite()
        {
            return Err(Error::validation("temperature and radius must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuliCurve {
    /// `1/Δt`, decreasing along the lag axis.
    pub omega: Vec<f64>,
    pub g_prime: Vec<f64>,
    pub g_loss: Vec<f64>,
    pub alpha: Vec<f64>,
    /// False where `Γ(1+α)` hits a pole; moduli are NaN there.
    pub defined: Vec<bool>,
    /// True where `α > 1`, which makes `G′` negative.
    pub nonphysical: Vec<bool>,
}

impl ModuliCurve {
    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    /// `omega,g_prime,g_loss` rows in increasing `ω`; undefined entries empty.
    pub fn to_table(&self) -> CurveTable {
        let mut t = CurveTable::new(&["omega", "g_prime", "g_loss"]);
        for k in (0..self.len()).rev() {
            let cell = |v: f64| (self.defined[k] && v.is_finite()).then_some(v);
            t.push(vec![Some(self.omega[k]), cell(self.g_prime[k]), cell(self.g_loss[k])]);
        }
        t
    }
}

/// `d log θ / d log Δt`: central differences inside, one-sided at the ends.
pub fn log_slope(msd: &MsdCurve) -> Result<Vec<f64>> {
    msd.validate_positive()?;
    log_slope_raw(&msd.lags.iter().map(|t| t.ln()).collect::<Vec<_>>(), &msd.msd.iter().map(|m| m.ln()).collect::<Vec<_>>())
}

fn log_slope_raw(lx: &[f64], ly: &[f64]) -> Result<Vec<f64>> {
    let n = lx.len();
    if n < 3 {
        return Err(Error::validation("log slope needs at least 3 lags"));
    }
    let mut a = Vec::with_capacity(n);
    a.push((ly[1] - ly[0]) / (lx[1] - lx[0]));
    for j in 1..n - 1 {
        a.push((ly[j + 1] - ly[j - 1]) / (lx[j + 1] - lx[j - 1]));
    }
    a.push((ly[n - 1] - ly[n - 2]) / (lx[n - 1] - lx[n - 2]));
    Ok(a)
}

/// Moduli from an MSD in m² and its log-slope.
pub fn gser(msd_m2: &MsdCurve, alpha: &[f64], mat: &MaterialSpec) -> Result<ModuliCurve> {
    mat.validate()?;
    if alpha.len() != msd_m2.len() {
        return Err(Error::validation("slope and MSD lengths differ"));
    }
    let n = msd_m2.len();
    let mut out = ModuliCurve {
        omega: msd_m2.lags.iter().map(|t| 1.0 / t).collect(),
        g_prime: vec![f64::NAN; n],
        g_loss: vec![f64::NAN; n],
        alpha: alpha.to_vec(),
        defined: vec![false; n],
        nonphysical: alpha.iter().map(|&a| a > 1.0).collect(),
    };
    let pref = 2.0 * BOLTZMANN * mat.temperature / (3.0 * std::f64::consts::PI * mat.radius);
    for k in 0..n {
        let a = alpha[k];
        if !(a > -1.0) || !a.is_finite() {
            continue;
        }
        let g = pref / (msd_m2.msd[k] * gamma(1.0 + a));
        if !g.is_finite() {
            continue;
        }
        let half = std::f64::consts::FRAC_PI_2 * a;
        out.g_prime[k] = g * half.cos();
        out.g_loss[k] = g * half.sin();
        out.defined[k] = true;
    }
    Ok(out)
}

/// Deterministic moduli of an MSD curve given in µm².
pub fn moduli(msd_um2: &MsdCurve, mat: &MaterialSpec) -> Result<ModuliCurve> {
    let alpha = log_slope(msd_um2)?;
    gser(&msd_um2.scaled(UM2_TO_M2), &alpha, mat)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McOptions {
    pub draws: usize,
    /// Matérn-5/2 range in log-lag units; `None` means half the log-lag span.
    pub range: Option<f64>,
    pub seed: u64,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions { draws: 1000, range: None, seed: 0 }
    }
}

/// Monte Carlo moduli from a curve with 95% bounds in µm².
///
/// Log-MSD samples are Gaussian with mean at the midpoint of the log bounds,
/// pointwise sd `(log U − log L)/(2ζ_0.975)` and Matérn-5/2 correlation over
/// `log Δt`. The result holds pointwise medians of `G′` and `G″`; its `alpha`
/// is the slope of the midpoint curve.
pub fn mc_moduli(msd_um2: &MsdCurve, mat: &MaterialSpec, opts: &McOptions) -> Result<ModuliCurve> {
    mat.validate()?;
    let (Some(lo), Some(hi)) = (&msd_um2.lower, &msd_um2.upper) else {
        return Err(Error::validation("Monte Carlo moduli need lower and upper bounds"));
    };
    let bounded = MsdCurve::new(msd_um2.lags.clone(), lo.clone())?;
    bounded.validate_positive()?;
    if hi.iter().zip(lo).any(|(u, l)| !(u >= l) || !u.is_finite()) {
        return Err(Error::validation("upper bounds must be finite and at least the lower bounds"));
    }
    if opts.draws == 0 {
        return Err(Error::validation("need at least one draw"));
    }
    let n = msd_um2.len();
    let lx: Vec<f64> = msd_um2.lags.iter().map(|t| t.ln()).collect();
    let z = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(0.975);
    let mu: Vec<f64> = lo.iter().zip(hi).map(|(l, u)| 0.5 * (l.ln() + u.ln())).collect();
    let sd: Vec<f64> = lo.iter().zip(hi).map(|(l, u)| (u.ln() - l.ln()) / (2.0 * z)).collect();
    let span = lx[n - 1] - lx[0];
    let range = opts.range.unwrap_or(0.5 * span);
    if !(range > 0.0) {
        return Err(Error::validation("correlation range must be positive"));
    }
    let chol = cholesky_with_jitter(DMatrix::from_fn(n, n, |r, s| matern52(lx[r] - lx[s], range)))?;
    let pref = 2.0 * BOLTZMANN * mat.temperature / (3.0 * std::f64::consts::PI * mat.radius);

    let samples: Vec<(Vec<f64>, Vec<f64>)> = (0..opts.draws)
        .into_par_iter()
        .map(|d| {
            let mut rng = stream_rng(opts.seed, d as u64);
            let xi = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let zc = &chol * xi;
            let ly: Vec<f64> = (0..n).map(|k| mu[k] + sd[k] * zc[k]).collect();
            let alpha = log_slope_raw(&lx, &ly).expect("at least 3 lags");
            let mut gp = vec![f64::NAN; n];
            let mut gl = vec![f64::NAN; n];
            for k in 0..n {
                if alpha[k] > -1.0 {
                    // a degenerate interval keeps the input value bit for bit
                    let v = if sd[k] == 0.0 { lo[k] } else { ly[k].exp() };
                    let g = pref / ((v * UM2_TO_M2) * gamma(1.0 + alpha[k]));
                    let half = std::f64::consts::FRAC_PI_2 * alpha[k];
                    gp[k] = g * half.cos();
                    gl[k] = g * half.sin();
                }
            }
            (gp, gl)
        })
        .collect();

    let mid = MsdCurve::new(msd_um2.lags.clone(), mu.iter().map(|v| v.exp()).collect())?;
    let mut out = gser(&mid.scaled(UM2_TO_M2), &log_slope_raw(&lx, &mu)?, mat)?;
    for k in 0..n {
        let mut a: Vec<f64> = samples.iter().map(|s| s.0[k]).filter(|v| v.is_finite()).collect();
        let mut b: Vec<f64> = samples.iter().map(|s| s.1[k]).filter(|v| v.is_finite()).collect();
        if a.is_empty() || b.is_empty() {
            out.defined[k] = false;
            out.g_prime[k] = f64::NAN;
            out.g_loss[k] = f64::NAN;
            continue;
        }
        out.g_prime[k] = median(&mut a);
        out.g_loss[k] = median(&mut b);
        out.defined[k] = true;
        out.nonphysical[k] = out.g_prime[k] < 0.0 || out.alpha[k] > 1.0;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmoothMethod {
    Spline,
    Poly4,
}

/// Smooths `log θ` over `log Δt` and returns the curve on the same grid.
pub fn smooth_external_msd(msd: &MsdCurve, method: SmoothMethod) -> Result<MsdCurve> {
    msd.validate_positive()?;
    let lx: Vec<f64> = msd.lags.iter().map(|t| t.ln()).collect();
    let ly: Vec<f64> = msd.msd.iter().map(|m| m.ln()).collect();
    let fitted = match method {
        SmoothMethod::Poly4 => poly_fit(&lx, &ly, 4)?,
        SmoothMethod::Spline => smoothing_spline_gcv(&lx, &ly)?.0,
    };
    MsdCurve::new(msd.lags.clone(), fitted.iter().map(|v| v.exp()).collect())
}

/// Least-squares polynomial of the given degree, evaluated at `x`.
pub fn poly_fit(x: &[f64], y: &[f64], degree: usize) -> Result<Vec<f64>> {
    let n = x.len();
    if n < degree + 1 {
        return Err(Error::validation(format!("degree-{degree} fit needs at least {} points", degree + 1)));
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let scale = x.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let u: Vec<f64> = x.iter().map(|v| (v - mean) / scale).collect();
    let v = DMatrix::from_fn(n, degree + 1, |i, p| u[i].powi(p as i32));
    let svd = v.clone().svd(true, true);
    let coef = svd
        .solve(&DVector::from_column_slice(y), 1e-14)
        .map_err(|e| Error::Numerical(e.into()))?;
    Ok((&v * coef).iter().cloned().collect())
}

/// Cubic smoothing spline with the penalty weight chosen by generalized
/// cross-validation; returns fitted values at `x` and the chosen weight.
///
/// Uses the Demmler–Reinsch basis: with `K = Q R⁻¹ Qᵀ = U diag(d) Uᵀ`, the
/// fit is `U diag(1/(1+λd)) Uᵀ y`.
pub fn smoothing_spline_gcv(x: &[f64], y: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = x.len();
    if n < 3 {
        return Err(Error::validation("smoothing spline needs at least 3 points"));
    }
    if x.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::validation("spline abscissae must be strictly increasing"));
    }
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let m = n - 2;
    let mut q = DMatrix::zeros(n, m);
    let mut r = DMatrix::zeros(m, m);
    for j in 0..m {
        q[(j, j)] = 1.0 / h[j];
        q[(j + 1, j)] = -1.0 / h[j] - 1.0 / h[j + 1];
        q[(j + 2, j)] = 1.0 / h[j + 1];
        r[(j, j)] = (h[j] + h[j + 1]) / 3.0;
        if j + 1 < m {
            r[(j, j + 1)] = h[j + 1] / 6.0;
            r[(j + 1, j)] = h[j + 1] / 6.0;
        }
    }
    let rq = r
        .cholesky()
        .ok_or_else(|| Error::Numerical("spline band matrix not positive definite".into()))?
        .solve(&q.transpose());
    let k = &q * rq;
    let k = (&k + k.transpose()) * 0.5;
    let eig = k.symmetric_eigen();
    let d: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();
    let yv = DVector::from_column_slice(y);
    let coef = eig.eigenvectors.transpose() * &yv;
    let nf = n as f64;

    let gcv = |log_lambda: f64| -> f64 {
        let lam = log_lambda.exp();
        let mut rss = 0.0;
        let mut tr = 0.0;
        for i in 0..n {
            let s = 1.0 / (1.0 + lam * d[i]);
            rss += ((1.0 - s) * coef[i]).powi(2);
            tr += s;
        }
        let denom = (1.0 - tr / nf).powi(2);
        if denom <= 0.0 {
            f64::INFINITY
        } else {
            rss / nf / denom
        }
    };
    // coarse scan then simplex refinement over log λ
    let dmax = d.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let base = -dmax.ln();
    let mut best = (f64::INFINITY, base);
    for s in -60..=60 {
        let ll = base + 0.5 * s as f64;
        let v = gcv(ll);
        if v < best.0 {
            best = (v, ll);
        }
    }
    let refined = nelder_mead(|p| gcv(p[0]), &[best.1], 0.25, 200, 1e-12);
    let ll = if refined.f < best.0 { refined.x[0] } else { best.1 };
    let lam = ll.exp();
    let shrunk = DVector::from_fn(n, |i, _| coef[i] / (1.0 + lam * d[i]));
    Ok(((eig.eigenvectors * shrunk).iter().cloned().collect(), lam))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn curve(lags: Vec<f64>, f: impl Fn(f64) -> f64) -> MsdCurve {
        let m = lags.iter().map(|&t| f(t)).collect();
        MsdCurve::new(lags, m).unwrap()
    }

    #[test]
    fn slopes_of_power_laws() {
        let lags: Vec<f64> = (1..30).map(|k| k as f64 * 0.1).collect();
        for a in log_slope(&curve(lags.clone(), |t| 3.0 * t)).unwrap() {
            assert_relative_eq!(a, 1.0, max_relative = 1e-12);
        }
        for a in log_slope(&curve(lags, |t| 0.2 * t.sqrt())).unwrap() {
            assert_relative_eq!(a, 0.5, max_relative = 1e-12);
        }
        let c = MsdCurve::new(vec![1.0, 2.0, 4.0], vec![1.0, 4.0, 16.0]).unwrap();
        assert_relative_eq!(log_slope(&c).unwrap()[1], 2.0, max_relative = 1e-14);
        let bad = MsdCurve::new(vec![1.0, 2.0, 3.0], vec![1.0, 0.0, 1.0]).unwrap();
        assert!(log_slope(&bad).is_err());
    }

    #[test]
    fn gser_hand_cases() {
        let mat = MaterialSpec { temperature: 300.0, radius: 1e-6 };
        let pref = 2.0 * BOLTZMANN * 300.0 / (3.0 * std::f64::consts::PI * 1e-6);
        let c = MsdCurve::new(vec![0.5], vec![pref]).unwrap();
        let m = gser(&c, &[1.0], &mat).unwrap();
        assert!(m.g_prime[0].abs() < 1e-15);
        assert_relative_eq!(m.g_loss[0], 1.0, max_relative = 1e-14);
        assert_eq!(m.omega[0], 2.0);
        let m = gser(&c, &[0.0], &mat).unwrap();
        assert_eq!(m.g_loss[0], 0.0);
        assert_relative_eq!(m.g_prime[0], 1.0, max_relative = 1e-14);
        let m = gser(&c, &[-1.0], &mat).unwrap();
        assert!(!m.defined[0] && m.g_prime[0].is_nan());
        let m = gser(&c, &[1.5], &mat).unwrap();
        assert!(m.nonphysical[0] && m.g_prime[0] < 0.0);
    }

    #[test]
    fn table_is_increasing_in_omega() {
        let mat = MaterialSpec { temperature: 293.0, radius: 5e-7 };
        let c = curve((1..10).map(|k| k as f64).collect(), |t| t);
        let m = moduli(&c, &mat).unwrap();
        let t = m.to_table();
        t.validate().unwrap();
        assert_eq!(t.columns, vec!["omega", "g_prime", "g_loss"]);
    }

    #[test]
    fn zero_width_bounds_are_deterministic() {
        let mat = MaterialSpec { temperature: 293.0, radius: 5e-7 };
        let c = curve((1..40).map(|k| k as f64 * 0.03).collect(), |t| 0.3 * t.powf(0.7));
        let b = c.clone().with_bounds(c.msd.clone(), c.msd.clone()).unwrap();
        let mc = mc_moduli(&b, &mat, &McOptions { draws: 50, ..Default::default() }).unwrap();
        let det = moduli(&c, &mat).unwrap();
        for k in 0..c.len() {
            assert_eq!(mc.g_prime[k], det.g_prime[k]);
            assert_eq!(mc.g_loss[k], det.g_loss[k]);
        }
    }

    #[test]
    fn poly4_reproduces_quartic() {
        let x: Vec<f64> = (0..12).map(|k| k as f64 * 0.4 - 1.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.3 - v + 0.2 * v * v - 0.05 * v.powi(3) + 0.01 * v.powi(4)).collect();
        let f = poly_fit(&x, &y, 4).unwrap();
        for (a, b) in f.iter().zip(&y) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(poly_fit(&x[..4], &y[..4], 4).is_err());
    }

    #[test]
    fn spline_keeps_straight_lines() {
        let x: Vec<f64> = (0..15).map(|k| (k as f64 * 0.37).powf(1.2)).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let (f, _) = smoothing_spline_gcv(&x, &y).unwrap();
        for (a, b) in f.iter().zip(&y) {
            assert!((a - b).abs() < 1e-8, "{a} {b}");
        }
    }
}
