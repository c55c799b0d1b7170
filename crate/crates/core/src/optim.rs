//! Small derivative-free and quasi-Newton minimizers.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub max_iter: usize,
    /// Stop when the projected gradient's Euclidean norm drops below this.
    pub grad_tol: f64,
    /// Also stop when an accepted step lowers `f` by less than `ftol·max(1, |f|)`,
    /// or when no step along steepest descent lowers `f` at all.
    pub ftol: f64,
    pub memory: usize,
    /// Central-difference step for the numerical gradient.
    pub fd_step: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions { max_iter: 200, grad_tol: 1e-5, ftol: 1e-12, memory: 10, fd_step: 1e-5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

fn clamp(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lower[i], upper[i]);
    }
}

/// Central differences, falling back to one-sided at an active bound.
pub fn numerical_gradient<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    x: &[f64],
    fx: f64,
    h: f64,
    lower: &[f64],
    upper: &[f64],
) -> Vec<f64> {
    let mut xp = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let xi = x[i];
        let up = (xi + h).min(upper[i]);
        let lo = (xi - h).max(lower[i]);
        let fu = if up > xi {
            xp[i] = up;
            f(&xp)
        } else {
            fx
        };
        let fl = if lo < xi {
            xp[i] = lo;
            f(&xp)
        } else {
            fx
        };
        xp[i] = xi;
        g[i] = if up > lo { (fu - fl) / (up - lo) } else { 0.0 };
    }
    g
}

fn projected_grad_norm(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .enumerate()
        .map(|(i, (&xi, &gi))| ((xi - gi).clamp(lower[i], upper[i]) - xi).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Box-constrained L-BFGS with numerical gradients.
///
/// Variables pinned at a bound with the gradient pointing outward are held
/// fixed for the step; the rest follow the two-loop direction, and the trial
/// point is projected back into the box during an Armijo backtracking search.
pub fn minimize_lbfgs<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &LbfgsOptions,
) -> OptimResult {
    let n = x0.len();
    let mut evals = 0usize;
    let mut fe = |x: &[f64]| {
        evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut x = x0.to_vec();
    clamp(&mut x, lower, upper);
    let mut fx = fe(&x);
    let mut g = numerical_gradient(&mut fe, &x, fx, opts.fd_step, lower, upper);
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut gnorm = projected_grad_norm(&x, &g, lower, upper);

    while iterations < opts.max_iter {
        if gnorm < opts.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let active: Vec<bool> = (0..n)
            .map(|i| (x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0))
            .collect();
        let gf: Vec<f64> = (0..n).map(|i| if active[i] { 0.0 } else { g[i] }).collect();

        // two-loop recursion on the free variables
        let mut q = gf.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            axpy(-a, y, &mut q);
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            let scale = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= scale);
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            axpy(a - b, s, &mut q);
        }
        let mut d: Vec<f64> = (0..n).map(|i| if active[i] { 0.0 } else { -q[i] }).collect();
        let mut slope = dot(&d, &g);
        if !(slope < 0.0) {
            hist.clear();
            d = gf.iter().map(|v| -v).collect();
            slope = dot(&d, &g);
            if !(slope < 0.0) {
                break;
            }
        }
        let mut step = if hist.is_empty() { (1.0 / norm(&d)).min(1.0) } else { 1.0 };

        let mut accepted = None;
        for _ in 0..40 {
            let mut xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            clamp(&mut xt, lower, upper);
            let ft = fe(&xt);
            let moved: f64 = xt.iter().zip(&x).zip(&g).map(|((a, b), gi)| (a - b) * gi).sum();
            if ft.is_finite() && ft <= fx + 1e-4 * moved.min(0.0) && ft <= fx {
                accepted = Some((xt, ft));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            // no descent along the search direction: retry once from steepest descent
            if !hist.is_empty() {
                hist.clear();
                continue;
            }
            // not even steepest descent lowers f: stationary to working precision
            converged = true;
            break;
        };
        let gn = numerical_gradient(&mut fe, &xn, fnew, opts.fd_step, lower, upper);
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).max(f64::MIN_POSITIVE) {
            if hist.len() == opts.memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        let decrease = fx - fnew;
        x = xn;
        fx = fnew;
        g = gn;
        gnorm = projected_grad_norm(&x, &g, lower, upper);
        if decrease <= opts.ftol * fx.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    if gnorm < opts.grad_tol {
        converged = true;
    }
    OptimResult { x, f: fx, iterations, evaluations: evals, converged, grad_norm: gnorm }
}

/// Nelder–Mead on an unconstrained problem.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    step: f64,
    max_iter: usize,
    ftol: f64,
) -> OptimResult {
    let n = x0.len();
    let mut evals = 0usize;
    let mut fe = |x: &[f64]| {
        evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), fe(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += step;
        let v = fe(&x);
        simplex.push((x, v));
    }
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[n].1);
        if (worst - best).abs() <= ftol * (best.abs() + worst.abs()).max(1e-300) || worst == best {
            converged = true;
            break;
        }
        iterations += 1;
        let mut c = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            axpy(1.0 / n as f64, x, &mut c);
        }
        let along = |t: f64| -> Vec<f64> { c.iter().zip(&simplex[n].0).map(|(ci, wi)| ci + t * (ci - wi)).collect() };
        let xr = along(1.0);
        let fr = fe(&xr);
        if fr < simplex[0].1 {
            let xe = along(2.0);
            let fexp = fe(&xe);
            simplex[n] = if fexp < fr { (xe, fexp) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst {
                let xc = along(0.5);
                let v = fe(&xc);
                (xc, v)
            } else {
                let xc = along(-0.5);
                let v = fe(&xc);
                (xc, v)
            };
            if fc < worst.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for (x, v) in simplex.iter_mut().skip(1) {
                    for (xi, bi) in x.iter_mut().zip(&x_best) {
                        *xi = bi + 0.5 * (*xi - bi);
                    }
                    *v = fe(x);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, fx) = simplex.swap_remove(0);
    OptimResult { x, f: fx, iterations, evaluations: evals, converged, grad_norm: f64::NAN }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}
