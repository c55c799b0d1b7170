//! Synthetic particle videos with known MSD.
//!
//! Trajectories are isotropic: each axis is generated independently. The
//! per-step scales below are variances per axis, chosen so that the 2D MSD
//! of every model equals its closed form in [`true_msd`]:
//!
//! * BM: increments `N(0, σ²_BM Δt_min / 2)`; `θ(Δt) = σ²_BM Δt`.
//! * OU: start `x0 + N(0, σ²_OU/4)`, then
//!   `x_k = x0 + ρ' (x_{k−1} − x0) + N(0, σ²_OU (1−ρ'²)/4)` with
//!   `ρ' = ρ^{Δt_min}`; `θ(Δt) = σ²_OU (1 − ρ^{Δt})`.
//! * FBM: increments `N(0, σ²_FBM/2 · Σ_H)`, `H = α/2`;
//!   `θ(Δt) = σ²_FBM Δt^{2H}`.
//! * OU+FBM: jittered start `x(t₁)`, an OU component centred on `x(t₁)` and
//!   an FBM component started at `x(t₁)`, combined as
//!   `x = x_OU + x_FBM − x(t₁)`; `θ` is the sum of both closed forms.
//!
//! Randomness is reproducible and independent of thread count: particle
//! `m` draws from ChaCha stream `m`, frame `k` noise from stream
//! [`NOISE_STREAM_BASE`]` + k`, initial positions from [`INIT_STREAM`].

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curve::MsdCurve;
use crate::error::{Error, Result};
use crate::stackio::ImageStack;

pub const INIT_STREAM: u64 = 1 << 40;
pub const NOISE_STREAM_BASE: u64 = 1 << 41;

/// Seeded ChaCha generator on an independent stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DynamicsModel {
    Bm { sigma2: f64 },
    Ou { sigma2: f64, rho: f64 },
    Fbm { sigma2: f64, alpha: f64 },
    OuFbm { sigma2_ou: f64, rho: f64, sigma2_fbm: f64, alpha: f64 },
}

impl DynamicsModel {
    pub fn validate(&self) -> Result<()> {
        let var_ok = |v: f64| v >= 0.0 && v.is_finite();
        let rho_ok = |r: f64| r > 0.0 && r < 1.0;
        let alpha_ok = |a: f64| a > 0.0 && a < 2.0;
        let ok = match *self {
            DynamicsModel::Bm { sigma2 } => var_ok(sigma2),
            DynamicsModel::Ou { sigma2, rho } => var_ok(sigma2) && rho_ok(rho),
            DynamicsModel::Fbm { sigma2, alpha } => var_ok(sigma2) && alpha_ok(alpha),
            DynamicsModel::OuFbm { sigma2_ou, rho, sigma2_fbm, alpha } => {
                var_ok(sigma2_ou) && var_ok(sigma2_fbm) && rho_ok(rho) && alpha_ok(alpha)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::validation(format!("invalid dynamics parameters: {self:?}")))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DynamicsModel::Bm { .. } => "bm",
            DynamicsModel::Ou { .. } => "ou",
            DynamicsModel::Fbm { .. } => "fbm",
            DynamicsModel::OuFbm { .. } => "ou_fbm",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    pub m: usize,
    pub n: usize,
    /// Particle-major: particle `p`, frame `k` at `positions[p * n + k]`.
    pub positions: Vec<[f64; 2]>,
}

impl TrajectorySet {
    pub fn particle(&self, p: usize) -> &[[f64; 2]] {
        &self.positions[p * self.n..(p + 1) * self.n]
    }

    /// Squared displacement averaged over particles and time origins.
    pub fn empirical_msd(&self, lag: usize) -> f64 {
        let mut s = 0.0;
        let mut cnt = 0usize;
        for p in 0..self.m {
            let tr = self.particle(p);
            for t in 0..self.n - lag {
                let (dx, dy) = (tr[t + lag][0] - tr[t][0], tr[t + lag][1] - tr[t][1]);
                s += dx * dx + dy * dy;
                cnt += 1;
            }
        }
        s / cnt as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub y_max: f64,
    pub sigma_p: f64,
    /// Additive pixel noise has variance `noise_b / 2`.
    pub noise_b: f64,
    pub rng_seed: u64,
}

impl RenderSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.y_max > 0.0) || !(self.sigma_p > 0.0) || !(self.noise_b >= 0.0) {
            return Err(Error::validation(format!("invalid render spec: {self:?}")));
        }
        Ok(())
    }
}

/// Uniform on `[N/8, 7N/8]` per axis.
pub fn sample_initial_positions<R: Rng>(m: usize, n1: usize, n2: usize, rng: &mut R) -> Result<Vec<[f64; 2]>> {
    if m == 0 {
        return Err(Error::validation("particle count must be at least 1"));
    }
    let axis = |n: usize| Uniform::new_inclusive(n as f64 / 8.0, 7.0 * n as f64 / 8.0).unwrap();
    let (u1, u2) = (axis(n1), axis(n2));
    Ok((0..m).map(|_| [u1.sample(rng), u2.sample(rng)]).collect())
}

/// Σ_H for `n_inc` increments spaced `dt`.
pub fn fbm_increment_cov(n_inc: usize, dt: f64, hurst: f64) -> DMatrix<f64> {
    let h2 = 2.0 * hurst;
    let p = |x: f64| x.abs().powf(h2);
    DMatrix::from_fn(n_inc, n_inc, |r, s| {
        let tau = (r as f64 - s as f64) * dt;
        0.5 * p(tau + dt) + 0.5 * p(tau - dt) - p(tau)
    })
}

/// Lower Cholesky factor, retrying once with jitter `1e-10 · trace / n`.
pub(crate) fn cholesky_with_jitter(mut a: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() == 0 {
        return Ok(a);
    }
    if let Some(c) = a.clone().cholesky() {
        return Ok(c.l());
    }
    let jitter = 1e-10 * a.trace() / a.nrows() as f64;
    for i in 0..a.nrows() {
        a[(i, i)] += jitter;
    }
    a.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Numerical("covariance not positive definite after jitter".into()))
}

/// One axis of a zero-started FBM path: `n` positions, first = 0.
fn fbm_axis(chol: &DMatrix<f64>, scale: f64, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let k = chol.nrows();
    let z: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
    out[0] = 0.0;
    let mut acc = 0.0;
    for r in 0..k {
        let row = chol.row(r);
        let inc: f64 = (0..=r).map(|c| row[c] * z[c]).sum();
        acc += scale * inc;
        out[r + 1] = acc;
    }
}

/// Trajectories for every particle; particle `m` uses RNG stream `m` of `seed`.
pub fn gen_trajectories(
    model: &DynamicsModel,
    init: &[[f64; 2]],
    n: usize,
    dt_min: f64,
    seed: u64,
) -> Result<TrajectorySet> {
    model.validate()?;
    if n == 0 || !(dt_min > 0.0) {
        return Err(Error::validation("need n ≥ 1 and dt_min > 0"));
    }
    let fbm_chol = match *model {
        DynamicsModel::Fbm { alpha, .. } | DynamicsModel::OuFbm { alpha, .. } => {
            Some(cholesky_with_jitter(fbm_increment_cov(n - 1, dt_min, alpha / 2.0))?)
        }
        _ => None,
    };
    let positions: Vec<Vec<[f64; 2]>> = init
        .par_iter()
        .enumerate()
        .map(|(p, &x0)| {
            let mut rng = stream_rng(seed, p as u64);
            let mut path = vec![[0.0; 2]; n];
            for axis in 0..2 {
                let mut xs = vec![0.0; n];
                particle_axis(model, x0[axis], dt_min, fbm_chol.as_ref(), &mut rng, &mut xs);
                for (k, v) in xs.into_iter().enumerate() {
                    path[k][axis] = v;
                }
            }
            path
        })
        .collect();
    Ok(TrajectorySet { m: init.len(), n, positions: positions.concat() })
}

fn particle_axis(
    model: &DynamicsModel,
    x0: f64,
    dt: f64,
    fbm_chol: Option<&DMatrix<f64>>,
    rng: &mut ChaCha8Rng,
    xs: &mut [f64],
) {
    let n = xs.len();
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    match *model {
        DynamicsModel::Bm { sigma2 } => {
            let sd = (sigma2 * dt / 2.0).sqrt();
            xs[0] = x0;
            for k in 1..n {
                xs[k] = xs[k - 1] + sd * normal();
            }
        }
        DynamicsModel::Ou { sigma2, rho } => {
            let r = rho.powf(dt);
            xs[0] = x0 + (sigma2 / 4.0).sqrt() * normal();
            let sd = (sigma2 * (1.0 - r * r) / 4.0).sqrt();
            for k in 1..n {
                xs[k] = x0 + r * (xs[k - 1] - x0) + sd * normal();
            }
        }
        DynamicsModel::Fbm { sigma2, .. } => {
            let chol = fbm_chol.expect("fbm factor");
            fbm_axis(chol, (sigma2 / 2.0).sqrt(), rng, xs);
            xs.iter_mut().for_each(|v| *v += x0);
        }
        DynamicsModel::OuFbm { sigma2_ou, rho, sigma2_fbm, .. } => {
            let r = rho.powf(dt);
            let start = x0 + (sigma2_ou / 4.0).sqrt() * normal();
            let sd = (sigma2_ou * (1.0 - r * r) / 4.0).sqrt();
            let mut ou = vec![start; n];
            for k in 1..n {
                ou[k] = start + r * (ou[k - 1] - start) + sd * normal();
            }
            let chol = fbm_chol.expect("fbm factor");
            let mut fbm = vec![0.0; n];
            fbm_axis(chol, (sigma2_fbm / 2.0).sqrt(), rng, &mut fbm);
            // x = x_OU + (start + fbm) − start
            for k in 0..n {
                xs[k] = ou[k] + fbm[k];
            }
        }
    }
}

/// Closed-form 2D MSD at each lag time.
pub fn true_msd(model: &DynamicsModel, lags: &[f64]) -> Result<MsdCurve> {
    if lags.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::validation("lag times must be positive"));
    }
    let theta = |t: f64| match *model {
        DynamicsModel::Bm { sigma2 } => sigma2 * t,
        DynamicsModel::Ou { sigma2, rho } => sigma2 * (1.0 - rho.powf(t)),
        DynamicsModel::Fbm { sigma2, alpha } => sigma2 * t.powf(alpha),
        DynamicsModel::OuFbm { sigma2_ou, rho, sigma2_fbm, alpha } => {
            sigma2_ou * (1.0 - rho.powf(t)) + sigma2_fbm * t.powf(alpha)
        }
    };
    MsdCurve::new(lags.to_vec(), lags.iter().map(|&t| theta(t)).collect())
}

/// Gaussian blobs truncated at `3σ_p` plus white noise of variance `B/2`.
/// Pixel `(row, col)` sits at coordinate `(row, col)`.
pub fn render(
    traj: &TrajectorySet,
    spec: &RenderSpec,
    n1: usize,
    n2: usize,
    dt_min: f64,
    px_size: f64,
) -> Result<ImageStack> {
    spec.validate()?;
    let mut stack = ImageStack::zeros(n1, n2, traj.n, dt_min, px_size)?;
    let radius = 3.0 * spec.sigma_p;
    let inv2s2 = 1.0 / (2.0 * spec.sigma_p * spec.sigma_p);
    let noise = (spec.noise_b > 0.0).then(|| Normal::new(0.0, (spec.noise_b / 2.0).sqrt()).unwrap());
    let frames: Vec<Vec<f64>> = (0..traj.n)
        .into_par_iter()
        .map(|k| {
            let mut frame = vec![0.0; n1 * n2];
            for p in 0..traj.m {
                let [x, y] = traj.positions[p * traj.n + k];
                let r_lo = (x - radius).ceil().max(0.0);
                let r_hi = (x + radius).floor().min(n1 as f64 - 1.0);
                let c_lo = (y - radius).ceil().max(0.0);
                let c_hi = (y + radius).floor().min(n2 as f64 - 1.0);
                if !(r_lo <= r_hi && c_lo <= c_hi) {
                    continue;
                }
                for r in r_lo as usize..=r_hi as usize {
                    let dx = r as f64 - x;
                    for c in c_lo as usize..=c_hi as usize {
                        let dy = c as f64 - y;
                        let d2 = dx * dx + dy * dy;
                        if d2 <= radius * radius {
                            frame[r * n2 + c] += spec.y_max * (-d2 * inv2s2).exp();
                        }
                    }
                }
            }
            if let Some(noise) = &noise {
                let mut rng = stream_rng(spec.rng_seed, NOISE_STREAM_BASE + k as u64);
                frame.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            }
            frame
        })
        .collect();
    for (k, f) in frames.into_iter().enumerate() {
        stack.frame_mut(k).copy_from_slice(&f);
    }
    Ok(stack)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub model: DynamicsModel,
    pub render: RenderSpec,
    pub particles: usize,
    pub n1: usize,
    pub n2: usize,
    pub frames: usize,
    pub dt_min: f64,
    pub px_size: f64,
}

/// Initial positions, trajectories and the rendered (unnormalized) stack.
pub fn simulate(spec: &SimulationSpec) -> Result<(TrajectorySet, ImageStack)> {
    let seed = spec.render.rng_seed;
    let mut init_rng = stream_rng(seed, INIT_STREAM);
    let init = sample_initial_positions(spec.particles, spec.n1, spec.n2, &mut init_rng)?;
    let traj = gen_trajectories(&spec.model, &init, spec.frames, spec.dt_min, seed)?;
    let stack = render(&traj, &spec.render, spec.n1, spec.n2, spec.dt_min, spec.px_size)?;
    Ok((traj, stack))
}

/// CSV dump `particle,frame,x,y`.
pub fn write_trajectories_csv(traj: &TrajectorySet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    writeln!(w, "particle,frame,x,y")?;
    for p in 0..traj.m {
        for (k, pos) in traj.particle(p).iter().enumerate() {
            writeln!(w, "{p},{k},{:.16e},{:.16e}", pos[0], pos[1])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn initial_positions_in_central_region() {
        let mut rng = stream_rng(1, 0);
        let pos = sample_initial_positions(1000, 8, 8, &mut rng).unwrap();
        assert!(pos.iter().all(|p| (1.0..=7.0).contains(&p[0]) && (1.0..=7.0).contains(&p[1])));
        assert!(sample_initial_positions(0, 8, 8, &mut rng).is_err());
    }

    #[test]
    fn initial_position_mean() {
        let mut rng = stream_rng(2, 0);
        let m = 100_000;
        let pos = sample_initial_positions(m, 512, 512, &mut rng).unwrap();
        let mean = pos.iter().map(|p| p[0]).sum::<f64>() / m as f64;
        // uniform on [64, 448]: sd = 384/√12
        let se = 384.0 / 12f64.sqrt() / (m as f64).sqrt();
        assert!((mean - 256.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn zero_variance_bm_is_constant() {
        let traj = gen_trajectories(&DynamicsModel::Bm { sigma2: 0.0 }, &[[3.0, 4.0]], 20, 1.0, 7).unwrap();
        assert!(traj.positions.iter().all(|p| *p == [3.0, 4.0]));
    }

    #[test]
    fn bm_step_variance() {
        // one particle, 10^5 steps: per-axis step variance σ²/2 = 1
        let n = 100_001;
        let traj = gen_trajectories(&DynamicsModel::Bm { sigma2: 2.0 }, &[[0.0, 0.0]], n, 1.0, 11).unwrap();
        let steps: Vec<f64> = traj.positions.windows(2).map(|w| w[1][0] - w[0][0]).collect();
        let k = steps.len() as f64;
        let mean = steps.iter().sum::<f64>() / k;
        let var = steps.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (k - 1.0);
        // SE of a Gaussian sample variance: σ²·√(2/(k−1))
        let se = (2.0 / (k - 1.0)).sqrt();
        assert!((var - 1.0).abs() < 3.0 * se, "var {var}");
    }

    #[test]
    fn fbm_cov_diagonal_is_one() {
        for h in [0.1, 0.3, 0.5, 0.9] {
            let c = fbm_increment_cov(5, 1.0, h);
            for i in 0..5 {
                assert_relative_eq!(c[(i, i)], 1.0, max_relative = 1e-14);
            }
        }
        // H = 1/2: independent increments
        let c = fbm_increment_cov(4, 1.0, 0.5);
        assert!(c[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn closed_form_msd() {
        let c = true_msd(&DynamicsModel::Bm { sigma2: 0.02 }, &[10.0]).unwrap();
        assert_relative_eq!(c.msd[0], 0.2, max_relative = 1e-14);
        let c = true_msd(&DynamicsModel::Ou { sigma2: 64.0, rho: 0.95 }, &[1.0]).unwrap();
        assert_relative_eq!(c.msd[0], 3.2, max_relative = 1e-12);
        let m = DynamicsModel::OuFbm { sigma2_ou: 9.0, rho: 0.85, sigma2_fbm: 2.0, alpha: 0.45 };
        let c = true_msd(&m, &[1.0]).unwrap();
        assert_relative_eq!(c.msd[0], 3.35, max_relative = 1e-12);
    }

    #[test]
    fn render_blob_values() {
        let spec = RenderSpec { y_max: 1.0, sigma_p: 1.0, noise_b: 0.0, rng_seed: 0 };
        let traj = TrajectorySet { m: 1, n: 3, positions: vec![[4.0, 4.0]; 3] };
        let s = render(&traj, &spec, 9, 9, 1.0, 1.0).unwrap();
        assert_eq!(s.get(0, 4, 4), 1.0);
        assert_relative_eq!(s.get(0, 5, 4), (-0.5f64).exp(), max_relative = 1e-15);
        assert!((s.get(0, 5, 4) - 0.60653).abs() < 1e-5);
        // column 1 is 3.01 σ_p away and truncated; column 7 is 2.99 σ_p away
        let traj = TrajectorySet { m: 1, n: 3, positions: vec![[4.0, 4.01]; 3] };
        let s = render(&traj, &spec, 9, 9, 1.0, 1.0).unwrap();
        assert_eq!(s.get(0, 4, 1), 0.0);
        assert!(s.get(0, 4, 7) > 0.0);
    }

    #[test]
    fn same_seed_same_output() {
        let sim = SimulationSpec {
            model: DynamicsModel::OuFbm { sigma2_ou: 9.0, rho: 0.85, sigma2_fbm: 2.0, alpha: 0.45 },
            render: RenderSpec { y_max: 255.0, sigma_p: 2.0, noise_b: 20.0, rng_seed: 42 },
            particles: 5,
            n1: 32,
            n2: 32,
            frames: 16,
            dt_min: 1.0,
            px_size: 1.0,
        };
        let (t1, s1) = simulate(&sim).unwrap();
        let (t2, s2) = simulate(&sim).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(s1, s2);
        let mut other = sim;
        other.render.rng_seed = 43;
        assert_ne!(simulate(&other).unwrap().0, t1);
    }
}
