//! Symmetric positive-definite Toeplitz covariances.
//!
//! A covariance is described by its autocovariance vector `gamma`
//! (first row). All routines work on the normalized matrix
//! `T = Σ / gamma[0]`, whose first row is `(1, r_1, …, r_{n-1})`, and run in
//! O(n²) time with the Levinson–Durbin recursions. Positive definiteness is
//! checked through the prediction-error variances of the recursion; a
//! non-positive variance is reported, never repaired.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ToeplitzCov {
    gamma: Vec<f64>,
}

/// Gaussian log-density split into its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogDensity {
    pub logpdf: f64,
    pub logdet: f64,
    pub quad: f64,
}

impl ToeplitzCov {
    pub fn new(gamma: Vec<f64>) -> Result<Self> {
        if gamma.is_empty() {
            return Err(Error::validation("autocovariance vector is empty"));
        }
        if gamma.iter().any(|g| !g.is_finite()) {
            return Err(Error::validation("autocovariance has non-finite entries"));
        }
        if !(gamma[0] > 0.0) {
            return Err(Error::NotPositiveDefinite { order: 0, variance: gamma[0] });
        }
        Ok(ToeplitzCov { gamma })
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    fn normalized(&self) -> Vec<f64> {
        let g0 = self.gamma[0];
        self.gamma.iter().map(|g| g / g0).collect()
    }

    /// Solves `Σ x = rhs` by the Levinson recursion, also returning `log|Σ|`.
    fn levinson(&self, rhs: &[f64]) -> Result<(Vec<f64>, f64)> {
        let n = self.dim();
        if rhs.len() != n {
            return Err(Error::validation(format!("rhs length {} != dimension {n}", rhs.len())));
        }
        let g0 = self.gamma[0];
        let r = self.normalized();
        let mut x = Vec::with_capacity(n);
        x.push(rhs[0] / g0);
        let mut logdet = n as f64 * g0.ln();
        if n == 1 {
            return Ok((vec![rhs[0] / g0], logdet));
        }
        // y: Yule–Walker solution of the current order
        let mut y = vec![-r[1]];
        let mut alpha = -r[1];
        let mut beta = 1.0;
        let mut tmp = Vec::with_capacity(n);
        for k in 1..n {
            beta *= 1.0 - alpha * alpha;
            if !(beta > 0.0) || !beta.is_finite() {
                return Err(Error::NotPositiveDefinite { order: k, variance: beta * g0 });
            }
            logdet += beta.ln();
            // r(1:k)ᵀ x(k:-1:1)
            let dot: f64 = (0..k).map(|i| r[i + 1] * x[k - 1 - i]).sum();
            let mu = (rhs[k] / g0 - dot) / beta;
            for i in 0..k {
                x[i] += mu * y[k - 1 - i];
            }
            x.push(mu);
            if k < n - 1 {
                let dot: f64 = (0..k).map(|i| r[i + 1] * y[k - 1 - i]).sum();
                alpha = (-r[k + 1] - dot) / beta;
                tmp.clear();
                tmp.extend((0..k).map(|i| y[i] + alpha * y[k - 1 - i]));
                tmp.push(alpha);
                std::mem::swap(&mut y, &mut tmp);
            }
        }
        Ok((x, logdet))
    }

    /// Durbin recursion on the normalized matrix: the order-(n−1) Yule–Walker
    /// solution and `log|T|`.
    fn durbin(&self) -> Result<(Vec<f64>, f64)> {
        let n = self.dim();
        let r = self.normalized();
        let mut y: Vec<f64> = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        let mut beta = 1.0;
        let mut logdet = 0.0;
        for k in 1..n {
            let dot: f64 = (0..k - 1).map(|i| r[k - 1 - i] * y[i]).sum();
            let alpha = -(r[k] + dot) / beta;
            let next = beta * (1.0 - alpha * alpha);
            if !(next > 0.0) || !next.is_finite() {
                return Err(Error::NotPositiveDefinite { order: k, variance: next * self.gamma[0] });
            }
            beta = next;
            logdet += beta.ln();
            z.clear();
            z.extend((0..k - 1).map(|i| y[i] + alpha * y[k - 2 - i]));
            z.push(alpha);
            std::mem::swap(&mut y, &mut z);
        }
        Ok((y, logdet))
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        self.levinson(rhs).map(|(x, _)| x)
    }

    pub fn logdet(&self) -> Result<f64> {
        let (_, logdet_t) = self.durbin()?;
        Ok(self.dim() as f64 * self.gamma[0].ln() + logdet_t)
    }

    /// `log N(y; 0, Σ)` in O(n²) time and O(n) extra space.
    pub fn logdensity(&self, y: &[f64]) -> Result<LogDensity> {
        let (x, logdet) = self.levinson(y)?;
        let quad: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let n = self.dim() as f64;
        let logpdf = -0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * logdet - 0.5 * quad;
        Ok(LogDensity { logpdf, logdet, quad })
    }

    /// Dense `Σ⁻¹` by the Trench algorithm, O(n²).
    pub fn inverse(&self) -> Result<ToeplitzInverse> {
        let n = self.dim();
        let g0 = self.gamma[0];
        let (y, logdet_t) = self.durbin()?;
        let logdet = n as f64 * g0.ln() + logdet_t;
        let mut b = vec![0.0; n * n];
        if n == 1 {
            b[0] = 1.0 / g0;
            return Ok(ToeplitzInverse { n, data: b, logdet });
        }
        let r = self.normalized();
        let denom = 1.0 + (0..n - 1).map(|i| r[i + 1] * y[i]).sum::<f64>();
        if !(denom > 0.0) {
            return Err(Error::NotPositiveDefinite { order: n - 1, variance: denom * g0 });
        }
        let gam = 1.0 / denom;
        // nu (1-based 1..n-1) = gam * y(n-1:-1:1)
        let nu: Vec<f64> = (0..n - 1).map(|i| gam * y[n - 2 - i]).collect();
        let nu1 = |k: usize| nu[k - 1];
        let idx = |i: usize, j: usize| (i - 1) * n + (j - 1);
        b[idx(1, 1)] = gam;
        for j in 2..=n {
            b[idx(1, j)] = nu1(n + 1 - j);
        }
        for i in 2..=((n - 1) / 2 + 1) {
            for j in i..=(n + 1 - i) {
                b[idx(i, j)] =
                    b[idx(i - 1, j - 1)] + (nu1(n + 1 - j) * nu1(n + 1 - i) - nu1(i - 1) * nu1(j - 1)) / gam;
            }
        }
        // fill the rest of the matrix from symmetry and persymmetry
        for i in 1..=((n - 1) / 2 + 1) {
            for j in i..=(n + 1 - i) {
                let v = b[idx(i, j)];
                b[idx(j, i)] = v;
                b[idx(n + 1 - j, n + 1 - i)] = v;
                b[idx(n + 1 - i, n + 1 - j)] = v;
            }
        }
        b.iter_mut().for_each(|v| *v /= g0);
        Ok(ToeplitzInverse { n, data: b, logdet })
    }
}

/// Explicit inverse of a Toeplitz covariance together with its log-determinant.
#[derive(Debug, Clone)]
pub struct ToeplitzInverse {
    n: usize,
    data: Vec<f64>,
    pub logdet: f64,
}

impl ToeplitzInverse {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `tr(Σ⁻¹ S)` for a dense symmetric `S` given row-major.
    pub fn trace_with(&self, s: &[f64]) -> f64 {
        debug_assert_eq!(s.len(), self.data.len());
        self.data.iter().zip(s).map(|(a, b)| a * b).sum()
    }

    /// `Σ⁻¹ T(dgamma)`, row-major, via one FFT matvec per row.
    pub fn times_toeplitz(&self, dgamma: &[f64]) -> Vec<f64> {
        let emb = CirculantEmbedding::new(dgamma);
        let mut out = Vec::with_capacity(self.n * self.n);
        for i in 0..self.n {
            // row i of Σ⁻¹ T = (T Σ⁻¹ e_i)ᵀ by symmetry of both factors
            out.extend(emb.apply(self.row(i)));
        }
        out
    }
}

/// `tr(Σ⁻¹ T(dγ_r) Σ⁻¹ T(dγ_s))`.
pub fn trace_pair(cov: &ToeplitzCov, dgamma_r: &[f64], dgamma_s: &[f64]) -> Result<f64> {
    let n = cov.dim();
    if dgamma_r.len() != n || dgamma_s.len() != n {
        return Err(Error::validation("derivative vectors must match the covariance dimension"));
    }
    let inv = cov.inverse()?;
    let xr = inv.times_toeplitz(dgamma_r);
    let xs = inv.times_toeplitz(dgamma_s);
    Ok(trace_of_product(&xr, &xs, n))
}

/// All pairwise Toeplitz traces for a list of derivative vectors, symmetric.
pub fn trace_matrix(cov: &ToeplitzCov, dgammas: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = cov.dim();
    let inv = cov.inverse()?;
    let xs: Vec<Vec<f64>> = dgammas.iter().map(|d| inv.times_toeplitz(d)).collect();
    let p = dgammas.len();
    let mut out = vec![vec![0.0; p]; p];
    for a in 0..p {
        for b in a..p {
            let t = trace_of_product(&xs[a], &xs[b], n);
            out[a][b] = t;
            out[b][a] = t;
        }
    }
    Ok(out)
}

/// `tr(X Y)` for dense row-major `n × n` matrices.
fn trace_of_product(x: &[f64], y: &[f64], n: usize) -> f64 {
    let mut t = 0.0;
    for a in 0..n {
        for b in 0..n {
            t += x[a * n + b] * y[b * n + a];
        }
    }
    t
}

/// `T(gamma) x` by circulant embedding, O(n log n).
pub fn matvec(gamma: &[f64], x: &[f64]) -> Vec<f64> {
    CirculantEmbedding::new(gamma).apply(x)
}

/// FFT of the circulant that embeds a symmetric Toeplitz matrix, reusable
/// across many products.
pub struct CirculantEmbedding {
    n: usize,
    eig: Vec<Complex64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl CirculantEmbedding {
    pub fn new(gamma: &[f64]) -> Self {
        let n = gamma.len();
        let m = (2 * n).max(1);
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(m);
        let inv = planner.plan_fft_inverse(m);
        let mut c = vec![Complex64::new(0.0, 0.0); m];
        for (i, &g) in gamma.iter().enumerate() {
            c[i].re = g;
        }
        for i in 1..n {
            c[m - i].re = gamma[i];
        }
        fwd.process(&mut c);
        CirculantEmbedding { n, eig: c, fwd, inv }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n, "vector length must match Toeplitz dimension");
        let m = self.eig.len();
        let mut buf = vec![Complex64::new(0.0, 0.0); m];
        for (b, &v) in buf.iter_mut().zip(x) {
            b.re = v;
        }
        self.fwd.process(&mut buf);
        for (b, e) in buf.iter_mut().zip(&self.eig) {
            *b *= e;
        }
        self.inv.process(&mut buf);
        buf[..self.n].iter().map(|c| c.re / m as f64).collect()
    }
}
