//! Gaussian process interpolation with a Matérn-5/2 product kernel.
//!
//! The mean is an unknown constant estimated by generalized least squares and
//! the signal variance is profiled out. Inverse range parameters `β_d = 1/γ_d`
//! maximize the profile marginal likelihood times a jointly robust prior
//!
//! ```text
//! π(β) ∝ t^a · exp(−b·t),   t = Σ_d C_d β_d + η,
//! C_d = n^{-1/p}·span_d,    b = n^{-1/p}·(a + p),   a = 0.2
//! ```
//!
//! which vanishes as the ranges go to 0 or ∞. The nugget `η` is held at the
//! floor unless estimation is requested.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::optim::nelder_mead;

pub const NUGGET_FLOOR: f64 = 1e-8;
const PRIOR_A: f64 = 0.2;

/// Matérn correlation with roughness 5/2 at distance `d`, range `gamma`.
pub fn matern52(d: f64, gamma: f64) -> f64 {
    let s = 5f64.sqrt() * d.abs() / gamma;
    (1.0 + s + s * s / 3.0) * (-s).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpOptions {
    pub nugget: f64,
    pub estimate_nugget: bool,
    /// Optional lower bound on the range of each input dimension.
    pub min_ranges: Option<Vec<f64>>,
}

impl Default for GpOptions {
    fn default() -> Self {
        GpOptions { nugget: NUGGET_FLOOR, estimate_nugget: false, min_ranges: None }
    }
}

/// Widest gap between adjacent distinct training values, per dimension.
pub fn max_gaps(x: &[Vec<f64>]) -> Vec<f64> {
    (0..x[0].len())
        .map(|d| {
            let mut v: Vec<f64> = x.iter().map(|r| r[d]).collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
        })
        .collect()
}

/// Maps free parameters to `log β`, capping β at `1 / min_range`.
fn log_betas(params: &[f64], p: usize, opts: &GpOptions) -> Vec<f64> {
    match &opts.min_ranges {
        Some(mr) => params[..p].iter().zip(mr).map(|(v, r)| v.min(-r.ln())).collect(),
        None => params[..p].to_vec(),
    }
}

#[derive(Debug, Clone)]
pub struct GpModel {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    /// Range parameter per input dimension.
    pub ranges: Vec<f64>,
    pub nugget: f64,
    pub mean: f64,
    pub sigma2: f64,
    chol: DMatrix<f64>,
    alpha: DVector<f64>,
    kinv_one: DVector<f64>,
    one_kinv_one: f64,
}

fn corr(a: &[f64], b: &[f64], ranges: &[f64]) -> f64 {
    a.iter().zip(b).zip(ranges).map(|((ai, bi), g)| matern52(ai - bi, *g)).product()
}

struct Factorized {
    chol: DMatrix<f64>,
    logdet: f64,
}

fn factorize(x: &[Vec<f64>], ranges: &[f64], nugget: f64) -> Option<Factorized> {
    let n = x.len();
    let k = DMatrix::from_fn(n, n, |i, j| corr(&x[i], &x[j], ranges) + if i == j { nugget } else { 0.0 });
    let c = k.cholesky()?;
    let l = c.l();
    let logdet = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
    Some(Factorized { chol: l, logdet })
}

fn chol_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let z = l.solve_lower_triangular(b).expect("nonsingular factor");
    l.transpose().solve_upper_triangular(&z).expect("nonsingular factor")
}

struct Profile {
    mean: f64,
    s2: f64,
    one_kinv_one: f64,
    kinv_one: DVector<f64>,
    alpha: DVector<f64>,
}

fn profile(f: &Factorized, y: &[f64]) -> Profile {
    let n = y.len();
    let yv = DVector::from_column_slice(y);
    let ones = DVector::from_element(n, 1.0);
    let kinv_one = chol_solve(&f.chol, &ones);
    let kinv_y = chol_solve(&f.chol, &yv);
    let one_kinv_one = kinv_one.sum();
    let mean = kinv_y.sum() / one_kinv_one;
    let alpha = &kinv_y - &kinv_one * mean;
    let resid = &yv - &ones * mean;
    let s2 = resid.dot(&alpha).max(0.0);
    Profile { mean, s2, one_kinv_one, kinv_one, alpha }
}

fn spans(x: &[Vec<f64>]) -> Vec<f64> {
    let p = x[0].len();
    (0..p)
        .map(|d| {
            let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v[d]), hi.max(v[d])));
            hi - lo
        })
        .collect()
}

/// Negative log posterior in `(log β_1..p [, log η])`.
fn neg_log_post(params: &[f64], x: &[Vec<f64>], y: &[f64], c: &[f64], b: f64, opts: &GpOptions) -> f64 {
    let p = c.len();
    let n = y.len() as f64;
    let log_beta = log_betas(params, p, opts);
    let beta: Vec<f64> = log_beta.iter().map(|v| v.exp()).collect();
    if beta.iter().any(|b| !b.is_finite() || *b <= 0.0) {
        return f64::INFINITY;
    }
    let nugget = if opts.estimate_nugget { params[p].exp().max(opts.nugget) } else { opts.nugget };
    let ranges: Vec<f64> = beta.iter().map(|b| 1.0 / b).collect();
    let Some(f) = factorize(x, &ranges, nugget) else {
        return f64::INFINITY;
    };
    let pr = profile(&f, y);
    let s2 = pr.s2.max(1e-300);
    let loglik = -0.5 * f.logdet - 0.5 * pr.one_kinv_one.ln() - 0.5 * (n - 1.0) * s2.ln();
    let t: f64 = c.iter().zip(&beta).map(|(ci, bi)| ci * bi).sum::<f64>() + if opts.estimate_nugget { nugget } else { 0.0 };
    let jacobian: f64 = log_beta.iter().sum::<f64>() + if opts.estimate_nugget { nugget.ln() } else { 0.0 };
    let lp = loglik + PRIOR_A * t.ln() - b * t + jacobian;
    if lp.is_finite() {
        -lp
    } else {
        f64::INFINITY
    }
}

/// Log posterior (up to a constant) of the given ranges with the nugget fixed.
pub fn log_posterior(x: &[Vec<f64>], y: &[f64], ranges: &[f64], nugget: f64) -> f64 {
    let n = x.len() as f64;
    let p = ranges.len();
    let scale = n.powf(-1.0 / p as f64);
    let c: Vec<f64> = spans(x).iter().map(|s| scale * s).collect();
    let b = scale * (PRIOR_A + p as f64);
    let params: Vec<f64> = ranges.iter().map(|r| -r.ln()).collect();
    let opts = GpOptions { nugget: nugget.max(NUGGET_FLOOR), ..Default::default() };
    -neg_log_post(&params, x, y, &c, b, &opts)
}

/// Fits a GP to `x` (one row per point) and `y` with default options.
pub fn fit(x: &[Vec<f64>], y: &[f64]) -> Result<GpModel> {
    fit_with(x, y, &GpOptions::default())
}

pub fn fit_1d(x: &[f64], y: &[f64]) -> Result<GpModel> {
    fit(&x.iter().map(|v| vec![*v]).collect::<Vec<_>>(), y)
}

pub fn fit_with(x: &[Vec<f64>], y: &[f64], opts: &GpOptions) -> Result<GpModel> {
    check_inputs(x, y)?;
    let n = x.len();
    let p = x[0].len();
    let span = spans(x);
    if span.iter().any(|s| *s <= 0.0) {
        return Err(Error::validation("every input dimension needs at least 2 distinct values"));
    }
    let nf = n as f64;
    let scale = nf.powf(-1.0 / p as f64);
    let c: Vec<f64> = span.iter().map(|s| scale * s).collect();
    let b = scale * (PRIOR_A + p as f64);
    let opts = GpOptions { nugget: opts.nugget.max(NUGGET_FLOOR), ..opts.clone() };
    if opts.min_ranges.as_ref().is_some_and(|mr| mr.len() != p || mr.iter().any(|r| !(*r > 0.0))) {
        return Err(Error::validation("min_ranges must be positive, one per input dimension"));
    }

    // three fixed starts: ranges at 1/4, 1 and 4 times the input span
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mult in [0.25, 1.0, 4.0] {
        let mut start = log_betas(&span.iter().map(|s| (1.0 / (mult * s)).ln()).collect::<Vec<_>>(), p, &opts);
        if opts.estimate_nugget {
            start.push((1e-4f64).ln());
        }
        let r = nelder_mead(|v| neg_log_post(v, x, y, &c, b, &opts), &start, 0.5, 400, 1e-10);
        if r.f.is_finite() && best.as_ref().is_none_or(|(f, _)| r.f < *f) {
            best = Some((r.f, r.x));
        }
    }
    let (_, params) = best.ok_or_else(|| Error::Numerical("GP hyperparameter search failed".into()))?;
    let ranges: Vec<f64> = log_betas(&params, p, &opts).iter().map(|v| (-v).exp()).collect();
    let nugget = if opts.estimate_nugget { params[p].exp().max(opts.nugget) } else { opts.nugget };
    fit_fixed(x, y, &ranges, nugget)
}

fn check_inputs(x: &[Vec<f64>], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::validation("input and output counts differ"));
    }
    if x.len() < 2 {
        return Err(Error::validation("GP fit needs at least 2 training points"));
    }
    let p = x[0].len();
    if p == 0 || x.iter().any(|v| v.len() != p) {
        return Err(Error::validation("inconsistent input dimension"));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::validation("GP training data must be finite"));
    }
    Ok(())
}

/// Conditions on `y` with given hyperparameters; no optimization.
pub fn fit_fixed(x: &[Vec<f64>], y: &[f64], ranges: &[f64], nugget: f64) -> Result<GpModel> {
    check_inputs(x, y)?;
    if ranges.len() != x[0].len() || ranges.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::validation("ranges must be positive, one per input dimension"));
    }
    let nugget = nugget.max(NUGGET_FLOOR);
    let f = factorize(x, ranges, nugget)
        .ok_or_else(|| Error::Numerical("GP correlation matrix not positive definite".into()))?;
    let pr = profile(&f, y);
    let n = y.len() as f64;
    Ok(GpModel {
        x: x.to_vec(),
        y: y.to_vec(),
        ranges: ranges.to_vec(),
        nugget,
        mean: pr.mean,
        sigma2: pr.s2 / (n - 1.0),
        chol: f.chol,
        alpha: pr.alpha,
        kinv_one: pr.kinv_one,
        one_kinv_one: pr.one_kinv_one,
    })
}

impl GpModel {
    pub fn dim(&self) -> usize {
        self.x[0].len()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.x
    }

    pub fn outputs(&self) -> &[f64] {
        &self.y
    }

    /// Posterior mean at each row of `xs`.
    pub fn predict(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        xs.iter()
            .map(|xs| {
                let r: f64 = self.x.iter().zip(self.alpha.iter()).map(|(xi, a)| corr(xi, xs, &self.ranges) * a).sum();
                self.mean + r
            })
            .collect()
    }

    pub fn predict_1d(&self, xs: &[f64]) -> Vec<f64> {
        self.predict(&xs.iter().map(|v| vec![*v]).collect::<Vec<_>>())
    }

    /// Rows `w` with `predict(xs)[i] = Σ_k w[i][k]·y_k` for these hyperparameters.
    pub fn weights(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = self.x.len();
        let u = &self.kinv_one / self.one_kinv_one;
        xs.iter()
            .map(|xs| {
                let r = DVector::from_fn(n, |i, _| corr(&self.x[i], xs, &self.ranges));
                let kr = chol_solve(&self.chol, &r);
                let lead = 1.0 - kr.sum();
                (0..n).map(|i| kr[i] + lead * u[i]).collect()
            })
            .collect()
    }

    pub fn weights_1d(&self, xs: &[f64]) -> Vec<Vec<f64>> {
        self.weights(&xs.iter().map(|v| vec![*v]).collect::<Vec<_>>())
    }
}

/// 2D GP of ISF values over `(ln q, ln Δt)` on a full `q × lags` grid.
/// `isf[i][k]` belongs to `q[i]`, `lags[k]`.
///
/// Each range is kept at least as wide as the largest training gap in its
/// dimension; with only a handful of lags the unconstrained posterior mode
/// tends to treat lag columns as unrelated and stops interpolating.
pub fn fit_isf_surface(q: &[f64], lags: &[f64], isf: &[Vec<f64>]) -> Result<GpModel> {
    if isf.len() != q.len() || isf.iter().any(|row| row.len() != lags.len()) {
        return Err(Error::validation("ISF grid shape does not match q and lag counts"));
    }
    if q.iter().chain(lags).any(|v| !(*v > 0.0)) {
        return Err(Error::validation("q and lag values must be positive"));
    }
    let mut x = Vec::with_capacity(q.len() * lags.len());
    let mut y = Vec::with_capacity(x.capacity());
    for (i, qi) in q.iter().enumerate() {
        for (k, tk) in lags.iter().enumerate() {
            x.push(vec![qi.ln(), tk.ln()]);
            y.push(isf[i][k]);
        }
    }
    let opts = GpOptions { min_ranges: Some(max_gaps(&x)), ..Default::default() };
    fit_with(&x, &y, &opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_predict(m: &GpModel, xs: &[f64]) -> f64 {
        // dense solve with an independent code path
        let n = m.x.len();
        let mut k = DMatrix::from_fn(n, n, |i, j| corr(&m.x[i], &m.x[j], &m.ranges));
        for i in 0..n {
            k[(i, i)] += m.nugget;
        }
        let kinv = k.try_inverse().unwrap();
        let ones = DVector::from_element(n, 1.0);
        let y = DVector::from_column_slice(&m.y);
        let mu = (ones.transpose() * &kinv * &y)[0] / (ones.transpose() * &kinv * &ones)[0];
        let r = DVector::from_fn(n, |i, _| corr(&m.x[i], &[xs[0]], &m.ranges));
        mu + (r.transpose() * kinv * (y - ones * mu))[0]
    }

    #[test]
    fn matern_shape() {
        assert_eq!(matern52(0.0, 1.0), 1.0);
        let s = 5f64.sqrt();
        assert!((matern52(1.0, 1.0) - (1.0 + s + 5.0 / 3.0) * (-s).exp()).abs() < 1e-15);
        assert!(matern52(2.0, 1.0) < matern52(1.0, 1.0));
    }

    #[test]
    fn constant_data_constant_prediction() {
        let x = [0.0, 1.0, 2.5, 4.0];
        let m = fit_1d(&x, &[3.0; 4]).unwrap();
        for v in m.predict_1d(&[-1.0, 0.3, 1.7, 5.0]) {
            assert!((v - 3.0).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn linear_midpoints() {
        let x: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        let m = fit_1d(&x, &y).unwrap();
        let mids: Vec<f64> = (0..5).map(|i| i as f64 + 0.5).collect();
        let pred = m.predict_1d(&mids);
        let range = 10.0;
        for (t, p) in mids.iter().zip(&pred) {
            assert!((2.0 * t - 1.0 - p).abs() < 1e-3 * range, "{t} {p}");
            assert!((p - direct_predict(&m, &[*t])).abs() < 1e-6);
        }
    }

    #[test]
    fn interpolates_training_points() {
        let x = [0.0, 0.7, 1.5, 3.0, 3.3];
        let y = [1.0, 0.2, -0.5, 2.0, 2.1];
        let m = fit_1d(&x, &y).unwrap();
        for (p, yi) in m.predict_1d(&x).iter().zip(y) {
            assert!((p - yi).abs() <= 10.0 * m.nugget * m.sigma2.max(1.0), "{p} {yi}");
        }
    }

    #[test]
    fn weights_reproduce_prediction() {
        let x = [0.0, 1.0, 2.0, 4.0];
        let y = [0.0, 1.0, 0.5, 3.0];
        let m = fit_1d(&x, &y).unwrap();
        let xs = [0.5, 3.0, 6.0];
        let w = m.weights_1d(&xs);
        let pred = m.predict_1d(&xs);
        for (row, p) in w.iter().zip(pred) {
            let v: f64 = row.iter().zip(&y).map(|(a, b)| a * b).sum();
            assert!((v - p).abs() < 1e-9);
            // constant mean: weights sum to one
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_point_rejected() {
        assert!(fit_1d(&[1.0], &[1.0]).is_err());
        assert!(fit_1d(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn duplicate_conflicting_inputs_fit() {
        let m = fit_1d(&[0.0, 1.0, 1.0, 2.0], &[0.0, 1.0, 1.2, 2.0]).unwrap();
        assert!(m.predict_1d(&[1.0])[0].is_finite());
    }
}
