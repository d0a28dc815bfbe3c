//! Box-constrained quasi-Newton minimisation.
//!
//! Projected L-BFGS: the two-loop direction is restricted to the variables
//! that are not held at a bound, and steps are projected back onto the box.
//! Objective evaluations that return a non-finite value count as `+inf`.

use std::collections::VecDeque;

#[derive(Clone, Debug)]
pub struct LbfgsOptions {
    pub max_iter: usize,
    pub memory: usize,
    /// Stop when the projected gradient's max-norm falls below this.
    pub grad_tol: f64,
    /// Stop when the relative decrease of one step falls below this.
    pub f_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self { max_iter: 200, memory: 8, grad_tol: 1e-6, f_tol: 1e-10 }
    }
}

#[derive(Clone, Debug)]
pub struct OptResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iters: usize,
    pub evals: usize,
    pub converged: bool,
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimise `f` over `[lo, hi]` from `x0`. `f(x, g)` returns the value and writes the gradient into `g`.
pub fn minimize_box<F>(mut f: F, x0: &[f64], lo: &[f64], hi: &[f64], opts: &LbfgsOptions) -> OptResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, lo, hi);
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut evals = 1;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return OptResult { x, f: f64::INFINITY, iters: 0, evals, converged: false };
    }
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut free = vec![true; n];
    let mut d = vec![0.0; n];
    let mut xn = vec![0.0; n];
    let mut gn = vec![0.0; n];
    let mut converged = false;
    let mut iters = 0;

    while iters < opts.max_iter {
        iters += 1;
        let mut pg_norm: f64 = 0.0;
        for i in 0..n {
            let at_lo = x[i] <= lo[i] && g[i] > 0.0;
            let at_hi = x[i] >= hi[i] && g[i] < 0.0;
            free[i] = !(at_lo || at_hi) && lo[i] < hi[i];
            if free[i] {
                pg_norm = pg_norm.max(g[i].abs());
            }
        }
        if pg_norm < opts.grad_tol {
            converged = true;
            break;
        }

        // two-loop recursion on the free subspace
        for i in 0..n {
            d[i] = if free[i] { -g[i] } else { 0.0 };
        }
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot_masked(s, &d, &free);
            for i in 0..n {
                if free[i] {
                    d[i] -= a * y[i];
                }
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            let yy = dot_masked(y, y, &free);
            if yy > 0.0 {
                let gamma = dot_masked(s, y, &free) / yy;
                if gamma > 0.0 {
                    d.iter_mut().for_each(|v| *v *= gamma);
                }
            }
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot_masked(y, &d, &free);
            for i in 0..n {
                if free[i] {
                    d[i] += (a - b) * s[i];
                }
            }
        }
        if !(dot(&d, &g) < 0.0) {
            hist.clear();
            for i in 0..n {
                d[i] = if free[i] { -g[i] } else { 0.0 };
            }
        }

        let mut step = if hist.is_empty() {
            let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let span = (0..n)
                .filter(|&i| free[i])
                .map(|i| hi[i] - lo[i])
                .fold(f64::INFINITY, f64::min);
            if dmax > 0.0 { (0.1 * span.min(1e3) / dmax).min(1.0) } else { 1.0 }
        } else {
            1.0
        };
        let mut accepted = false;
        let mut fnew = f64::INFINITY;
        for _ in 0..50 {
            for i in 0..n {
                xn[i] = x[i] + step * d[i];
            }
            project(&mut xn, lo, hi);
            let decrease: f64 = (0..n).map(|i| g[i] * (xn[i] - x[i])).sum();
            if decrease == 0.0 {
                break;
            }
            fnew = f(&xn, &mut gn);
            evals += 1;
            if fnew.is_finite()
                && gn.iter().all(|v| v.is_finite())
                && fnew <= fx + 1e-4 * decrease.min(0.0)
            {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // no descent along this direction; retry once as steepest descent
            if !hist.is_empty() {
                hist.clear();
                continue;
            }
            converged = true;
            break;
        }

        let s: Vec<f64> = (0..n).map(|i| xn[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| gn[i] - g[i]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if hist.len() == opts.memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        let small = (fx - fnew) <= opts.f_tol * fx.abs().max(fnew.abs()).max(1.0);
        x.copy_from_slice(&xn);
        g.copy_from_slice(&gn);
        fx = fnew;
        if small {
            converged = true;
            break;
        }
    }
    OptResult { x, f: fx, iters, evals, converged }
}

fn dot_masked(a: &[f64], b: &[f64], m: &[bool]) -> f64 {
    (0..a.len()).filter(|&i| m[i]).map(|i| a[i] * b[i]).sum()
}

/// Run [`minimize_box`] from each start and keep the lowest value. Ties go to
/// the earliest start. `None` when every start fails.
pub fn minimize_multistart<F>(
    mut f: F,
    starts: &[Vec<f64>],
    lo: &[f64],
    hi: &[f64],
    opts: &LbfgsOptions,
) -> Option<OptResult>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let mut best: Option<OptResult> = None;
    for s in starts {
        let r = minimize_box(&mut f, s, lo, hi, opts);
        if !r.f.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|b| r.f < b.f) {
            best = Some(r);
        }
    }
    best
}

/// Central-difference gradient, one-sided at the box edges.
pub fn fd_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], lo: &[f64], hi: &[f64], g: &mut [f64]) {
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-6 * (hi[i] - lo[i]).max(1e-8);
        let up = (x[i] + h).min(hi[i]);
        let dn = (x[i] - h).max(lo[i]);
        xp[i] = up;
        let fu = f(&xp);
        xp[i] = dn;
        let fd = f(&xp);
        xp[i] = x[i];
        g[i] = if up > dn { (fu - fd) / (up - dn) } else { 0.0 };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(x: &[f64], g: &mut [f64]) -> f64 {
        // (x0-1)^2 + 10 (x1+2)^2 + (x0 - x1)^2 / 2
        g[0] = 2.0 * (x[0] - 1.0) + (x[0] - x[1]);
        g[1] = 20.0 * (x[1] + 2.0) - (x[0] - x[1]);
        (x[0] - 1.0).powi(2) + 10.0 * (x[1] + 2.0).powi(2) + 0.5 * (x[0] - x[1]).powi(2)
    }

    #[test]
    fn interior_quadratic() {
        let r = minimize_box(quad, &[3.0, 3.0], &[-5.0, -5.0], &[5.0, 5.0], &LbfgsOptions::default());
        // solve the 2x2 system by hand: 3x0 - x1 = 2, -x0 + 21x1 = -40
        let x1 = (-40.0 + 2.0 / 3.0) / (21.0 - 1.0 / 3.0);
        let x0 = (2.0 + x1) / 3.0;
        assert!((r.x[0] - x0).abs() < 1e-6 && (r.x[1] - x1).abs() < 1e-6, "{:?}", r.x);
    }

    #[test]
    fn active_bound() {
        let r = minimize_box(quad, &[0.5, 0.5], &[-5.0, -1.0], &[5.0, 5.0], &LbfgsOptions::default());
        assert_eq!(r.x[1], -1.0);
        // x0 minimises with x1 fixed at -1: 3x0 = 2 + x1
        assert!((r.x[0] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn failed_starts_are_skipped() {
        let f = |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * x[0];
            if x[0] > 0.9 { f64::NAN } else { x[0] * x[0] }
        };
        let r = minimize_multistart(f, &[vec![0.95], vec![0.5]], &[-1.0], &[1.0], &LbfgsOptions::default())
            .unwrap();
        assert!(r.x[0].abs() < 1e-6);
        assert!(minimize_multistart(f, &[vec![0.95]], &[-1.0], &[1.0], &LbfgsOptions::default()).is_none());
    }
}
