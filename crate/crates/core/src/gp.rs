//! Zero-mean GP regression with a squared-exponential kernel.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::Bounds;
use crate::error::{Error, Result};
use crate::optim::{minimize_multistart, LbfgsOptions};

/// GP hyperparameters `(σ_f², l_1..l_p, σ_n²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub signal_var: f64,
    pub lengthscales: Vec<f64>,
    pub noise_var: f64,
}

impl Hyper {
    pub fn new(signal_var: f64, lengthscales: Vec<f64>, noise_var: f64) -> Result<Self> {
        let h = Self { signal_var, lengthscales, noise_var };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if self.lengthscales.is_empty()
            || !ok(self.signal_var)
            || !ok(self.noise_var)
            || !self.lengthscales.iter().all(|&l| ok(l))
        {
            return Err(Error::Invalid(format!("hyperparameters must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// `[ln σ_f², ln l_1, .., ln l_p, ln σ_n²]`.
    pub fn to_log(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim() + 2);
        v.push(self.signal_var.ln());
        v.extend(self.lengthscales.iter().map(|l| l.ln()));
        v.push(self.noise_var.ln());
        v
    }

    pub fn from_log(eta: &[f64]) -> Self {
        let n = eta.len();
        Self {
            signal_var: eta[0].exp(),
            lengthscales: eta[1..n - 1].iter().map(|e| e.exp()).collect(),
            noise_var: eta[n - 1].exp(),
        }
    }

    fn inv_l2(&self) -> Vec<f64> {
        self.lengthscales.iter().map(|l| 1.0 / (l * l)).collect()
    }
}

/// Squared-exponential covariance `σ_f² exp(-Σ (x_i - y_i)² / (2 l_i²))`.
pub fn se_kernel(x: &[f64], y: &[f64], h: &Hyper) -> Result<f64> {
    if x.len() != h.dim() || y.len() != h.dim() {
        return Err(Error::Dimension { expected: h.dim(), got: if x.len() != h.dim() { x.len() } else { y.len() } });
    }
    Ok(kern(x, y, h.signal_var, &h.inv_l2()))
}

#[inline]
fn kern(x: &[f64], y: &[f64], sf2: f64, inv_l2: &[f64]) -> f64 {
    let mut r = 0.0;
    for i in 0..x.len() {
        let d = x[i] - y[i];
        r += d * d * inv_l2[i];
    }
    sf2 * (-0.5 * r).exp()
}

/// Ordered parameter/discrepancy pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub bounds: Bounds,
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

impl TrainingSet {
    pub fn new(bounds: Bounds) -> Self {
        Self { bounds, points: Vec::new(), values: Vec::new() }
    }

    pub fn from_parts(bounds: Bounds, points: Vec<Vec<f64>>, values: Vec<f64>) -> Result<Self> {
        let mut ts = Self::new(bounds);
        if points.len() != values.len() {
            return Err(Error::Dimension { expected: points.len(), got: values.len() });
        }
        for (x, y) in points.into_iter().zip(values) {
            ts.push(x, y)?;
        }
        Ok(ts)
    }

    pub fn push(&mut self, x: Vec<f64>, y: f64) -> Result<()> {
        if x.len() != self.bounds.dim() {
            return Err(Error::Dimension { expected: self.bounds.dim(), got: x.len() });
        }
        if !y.is_finite() {
            return Err(Error::Invalid(format!("non-finite discrepancy {y}")));
        }
        self.points.push(x);
        self.values.push(y);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub var: f64,
}

/// Mean and variance with their gradients in θ.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionGrad {
    pub mean: f64,
    pub var: f64,
    pub dmean: Vec<f64>,
    pub dvar: Vec<f64>,
}

/// Pre-observation view of one more observation at `θ*`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lookahead {
    /// Deterministic variance reduction at θ.
    pub tau2: f64,
    /// The updated mean at θ is `N(mean, tau2)` before Δ* is seen.
    pub mean: f64,
    /// `v²_{t+1}(θ) = v²_t(θ) - τ²`.
    pub new_var: f64,
}

const JITTER_LADDER: [f64; 8] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

fn cholesky_with_jitter(k: &DMatrix<f64>, sf2: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    for &j in &JITTER_LADDER {
        let mut kj = k.clone();
        if j > 0.0 {
            for i in 0..kj.nrows() {
                kj[(i, i)] += j * sf2;
            }
        }
        if let Some(c) = Cholesky::new(kj) {
            return Ok((c, j * sf2));
        }
    }
    let max_diag = (0..k.nrows()).map(|i| k[(i, i)]).fold(0.0, f64::max);
    Err(Error::Cholesky { jitter: 1e-4 * sf2, t: k.nrows(), max_diag })
}

/// A GP conditioned on a training set. Immutable once built.
#[derive(Clone, Debug)]
pub struct FittedGp {
    hyper: Hyper,
    inv_l2: Vec<f64>,
    bounds: Bounds,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    chol: Option<Cholesky<f64, Dyn>>,
    /// `L⁻¹ y`
    beta: Vec<f64>,
    /// `K⁻¹ y`
    alpha: Vec<f64>,
    jitter: f64,
}

/// Condition the GP on `ts`. An empty set gives the prior GP.
pub fn fit(ts: &TrainingSet, hyper: &Hyper) -> Result<FittedGp> {
    hyper.validate()?;
    if hyper.dim() != ts.dim() {
        return Err(Error::Dimension { expected: ts.dim(), got: hyper.dim() });
    }
    let t = ts.len();
    let inv_l2 = hyper.inv_l2();
    let mut gp = FittedGp {
        hyper: hyper.clone(),
        inv_l2,
        bounds: ts.bounds.clone(),
        x: ts.points.clone(),
        y: ts.values.clone(),
        chol: None,
        beta: Vec::new(),
        alpha: Vec::new(),
        jitter: 0.0,
    };
    if t == 0 {
        return Ok(gp);
    }
    let k = gp.gram();
    let (chol, jitter) = cholesky_with_jitter(&k, hyper.signal_var)?;
    if jitter > 0.0 {
        log::debug!("gp fit needed jitter {jitter:e} at t={t}");
    }
    gp.chol = Some(chol);
    gp.jitter = jitter;
    gp.solve_data();
    Ok(gp)
}

impl FittedGp {
    fn gram(&self) -> DMatrix<f64> {
        let t = self.x.len();
        let sf2 = self.hyper.signal_var;
        let mut k = DMatrix::zeros(t, t);
        for j in 0..t {
            for i in j..t {
                let v = kern(&self.x[i], &self.x[j], sf2, &self.inv_l2);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
            k[(j, j)] += self.hyper.noise_var;
        }
        k
    }

    fn solve_data(&mut self) {
        let mut beta = self.y.clone();
        self.fwd(&mut beta);
        let mut alpha = beta.clone();
        self.bwd(&mut alpha);
        self.beta = beta;
        self.alpha = alpha;
    }

    pub fn hyper(&self) -> &Hyper {
        &self.hyper
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.hyper.dim()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.x
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    pub fn noise_var(&self) -> f64 {
        self.hyper.noise_var
    }

    pub fn signal_var(&self) -> f64 {
        self.hyper.signal_var
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `L⁻¹ Δ_{1:t}`.
    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// `K⁻¹ Δ_{1:t}`.
    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn training_set(&self) -> TrainingSet {
        TrainingSet { bounds: self.bounds.clone(), points: self.x.clone(), values: self.y.clone() }
    }

    /// Entry `(i, j)`, `j <= i`, of the lower Cholesky factor.
    pub fn l_entry(&self, i: usize, j: usize) -> f64 {
        let c = self.chol.as_ref().expect("empty GP has no factor");
        c.l_dirty()[(i, j)]
    }

    #[inline]
    pub fn kernel(&self, x: &[f64], y: &[f64]) -> f64 {
        kern(x, y, self.hyper.signal_var, &self.inv_l2)
    }

    /// `k(X, θ)` into `out`.
    pub fn kvec(&self, theta: &[f64], out: &mut [f64]) {
        for (o, xi) in out.iter_mut().zip(&self.x) {
            *o = self.kernel(xi, theta);
        }
    }

    /// In-place `b ← L⁻¹ b`.
    pub fn fwd(&self, b: &mut [f64]) {
        let Some(c) = &self.chol else { return };
        let t = b.len();
        let l = c.l_dirty().as_slice();
        for j in 0..t {
            let col = &l[j * t..(j + 1) * t];
            let v = b[j] / col[j];
            b[j] = v;
            if v != 0.0 {
                for i in j + 1..t {
                    b[i] -= col[i] * v;
                }
            }
        }
    }

    /// In-place `b ← L⁻ᵀ b`.
    pub fn bwd(&self, b: &mut [f64]) {
        let Some(c) = &self.chol else { return };
        let t = b.len();
        let l = c.l_dirty().as_slice();
        for j in (0..t).rev() {
            let col = &l[j * t..(j + 1) * t];
            let mut s = b[j];
            for i in j + 1..t {
                s -= col[i] * b[i];
            }
            b[j] = s / col[j];
        }
    }

    fn clamp_var(&self, v: f64) -> f64 {
        let sf2 = self.hyper.signal_var;
        if v < -1e-8 * sf2 {
            log::warn!("predictive variance {v:e} below round-off level, clamped");
        }
        v.clamp(0.0, sf2)
    }

    /// Predict at θ, leaving `u = L⁻¹ k(X, θ)` in `u`.
    pub fn predict_with(&self, theta: &[f64], u: &mut Vec<f64>) -> Prediction {
        let t = self.len();
        u.resize(t, 0.0);
        self.kvec(theta, u);
        self.fwd(u);
        let mut mean = 0.0;
        let mut q = 0.0;
        for i in 0..t {
            mean += u[i] * self.beta[i];
            q += u[i] * u[i];
        }
        Prediction { mean, var: self.clamp_var(self.hyper.signal_var - q) }
    }

    pub fn predict(&self, theta: &[f64]) -> Prediction {
        let mut u = Vec::with_capacity(self.len());
        self.predict_with(theta, &mut u)
    }

    /// Checked prediction: errors when cancellation drove the variance far below zero.
    pub fn try_predict(&self, theta: &[f64]) -> Result<Prediction> {
        if theta.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: theta.len() });
        }
        let mut u = vec![0.0; self.len()];
        self.kvec(theta, &mut u);
        self.fwd(&mut u);
        let raw = self.hyper.signal_var - u.iter().map(|v| v * v).sum::<f64>();
        if raw < -1e-8 * self.hyper.signal_var {
            return Err(Error::NegativeVariance(raw));
        }
        let mean = u.iter().zip(&self.beta).map(|(a, b)| a * b).sum();
        Ok(Prediction { mean, var: raw.clamp(0.0, self.hyper.signal_var) })
    }

    pub fn predict_grad(&self, theta: &[f64]) -> PredictionGrad {
        let t = self.len();
        let p = self.dim();
        let mut k = vec![0.0; t];
        self.kvec(theta, &mut k);
        let mut u = k.clone();
        self.fwd(&mut u);
        let mut w = u.clone();
        self.bwd(&mut w);
        let mut mean = 0.0;
        let mut q = 0.0;
        for i in 0..t {
            mean += u[i] * self.beta[i];
            q += u[i] * u[i];
        }
        let raw = self.hyper.signal_var - q;
        let var = self.clamp_var(raw);
        let mut dmean = vec![0.0; p];
        let mut dvar = vec![0.0; p];
        for i in 0..t {
            for d in 0..p {
                // ∂k(x_i, θ)/∂θ_d
                let dk = k[i] * (self.x[i][d] - theta[d]) * self.inv_l2[d];
                dmean[d] += dk * self.alpha[i];
                dvar[d] -= 2.0 * dk * w[i];
            }
        }
        if raw <= 0.0 || raw >= self.hyper.signal_var {
            dvar.iter_mut().for_each(|v| *v = 0.0);
        }
        PredictionGrad { mean, var, dmean, dvar }
    }

    /// Posterior covariance `k(θ,θ*) - k(θ,X) K⁻¹ k(X,θ*)`.
    pub fn predict_cov(&self, theta: &[f64], theta_star: &[f64]) -> f64 {
        let t = self.len();
        let mut u = vec![0.0; t];
        let mut us = vec![0.0; t];
        self.kvec(theta, &mut u);
        self.fwd(&mut u);
        self.kvec(theta_star, &mut us);
        self.fwd(&mut us);
        self.kernel(theta, theta_star) - u.iter().zip(&us).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn lookahead(&self, theta: &[f64], theta_star: &[f64]) -> Lookahead {
        let pr = self.predict(theta);
        let ps = self.predict(theta_star);
        let c = self.predict_cov(theta, theta_star);
        let tau2 = (c * c / (self.hyper.noise_var + ps.var)).min(pr.var);
        Lookahead { tau2, mean: pr.mean, new_var: (pr.var - tau2).max(0.0) }
    }

    /// The same GP with one more observation, by extending the Cholesky factor.
    pub fn append(&self, x: Vec<f64>, y: f64) -> Result<FittedGp> {
        if x.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: x.len() });
        }
        if !y.is_finite() {
            return Err(Error::Invalid(format!("non-finite discrepancy {y}")));
        }
        let Some(c) = &self.chol else {
            let ts = TrainingSet::from_parts(self.bounds.clone(), vec![x], vec![y])?;
            return fit(&ts, &self.hyper);
        };
        let t = self.len();
        let mut col = DVector::zeros(t + 1);
        for i in 0..t {
            col[i] = self.kernel(&self.x[i], &x);
        }
        col[t] = self.hyper.signal_var + self.hyper.noise_var + self.jitter;
        let mut l_new = col.rows(0, t).clone_owned();
        self.fwd(l_new.as_mut_slice());
        let d2 = col[t] - l_new.norm_squared();
        if !(d2 > 1e-12 * self.hyper.signal_var) {
            // ill-conditioned extension: fall back to a fresh factorisation
            let mut ts = self.training_set();
            ts.push(x, y)?;
            return fit(&ts, &self.hyper);
        }
        let chol = c.insert_column(t, col);
        let mut gp = FittedGp {
            hyper: self.hyper.clone(),
            inv_l2: self.inv_l2.clone(),
            bounds: self.bounds.clone(),
            x: self.x.clone(),
            y: self.y.clone(),
            chol: Some(chol),
            beta: Vec::new(),
            alpha: Vec::new(),
            jitter: self.jitter,
        };
        gp.x.push(x);
        gp.y.push(y);
        gp.solve_data();
        Ok(gp)
    }

    /// `-½ Δᵀ K⁻¹ Δ - ½ log det K` (constant dropped).
    pub fn log_marginal(&self) -> f64 {
        let Some(c) = &self.chol else { return 0.0 };
        let q: f64 = self.beta.iter().map(|b| b * b).sum();
        let logdet: f64 = (0..self.len()).map(|i| c.l_dirty()[(i, i)].ln()).sum::<f64>() * 2.0;
        -0.5 * q - 0.5 * logdet
    }
}

/// Independent normal priors on the log hyperparameters, in the order of
/// [`Hyper::to_log`]. A zero sd pins that coordinate at its mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperPrior {
    pub mu: Vec<f64>,
    pub sd: Vec<f64>,
}

impl HyperPrior {
    /// Weakly informative default scaled to the data and the box.
    pub fn default_for(ts: &TrainingSet) -> Self {
        let p = ts.dim();
        let n = ts.len().max(1) as f64;
        let mean = ts.values.iter().sum::<f64>() / n;
        let ms = ts.values.iter().map(|v| v * v).sum::<f64>() / n;
        let var = ts.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let ms = if ms > 0.0 { ms } else { 1.0 };
        let var = if var > 0.0 { var } else { 1e-2 * ms };
        let mut mu = vec![ms.ln()];
        mu.extend((0..p).map(|i| ts.bounds.width(i).ln()));
        mu.push((var / 4.0).ln());
        let mut sd = vec![2.0];
        sd.extend(std::iter::repeat_n(1.5, p));
        sd.push(2.0);
        Self { mu, sd }
    }

    pub fn point_mass(h: &Hyper) -> Self {
        let mu = h.to_log();
        let sd = vec![0.0; mu.len()];
        Self { mu, sd }
    }

    pub fn free(&self) -> Vec<usize> {
        (0..self.mu.len()).filter(|&i| self.sd[i] > 0.0).collect()
    }

    /// Log density of η (constant dropped), counting free coordinates only.
    pub fn ln_density(&self, eta: &[f64]) -> f64 {
        self.free().iter().map(|&i| -0.5 * ((eta[i] - self.mu[i]) / self.sd[i]).powi(2)).sum()
    }

    /// Optimisation box `mu ± 5 sd`.
    pub fn search_box(&self) -> (Vec<f64>, Vec<f64>) {
        let lo = self.mu.iter().zip(&self.sd).map(|(m, s)| m - 5.0 * s).collect();
        let hi = self.mu.iter().zip(&self.sd).map(|(m, s)| m + 5.0 * s).collect();
        (lo, hi)
    }
}

/// `K⁻¹ = L⁻ᵀ L⁻¹` from the lower factor. Only the lower triangle of `l` is read.
fn inverse_from_factor(l: &DMatrix<f64>) -> DMatrix<f64> {
    let t = l.nrows();
    let ls = l.as_slice();
    let mut inv = DMatrix::zeros(t, t);
    let is = inv.as_mut_slice();
    // column j of L⁻¹ by column-oriented forward substitution on e_j
    for j in 0..t {
        let x = &mut is[j * t..(j + 1) * t];
        x[j] = 1.0;
        for k in j..t {
            let col = &ls[k * t..(k + 1) * t];
            let xk = x[k] / col[k];
            x[k] = xk;
            for (xi, li) in x[k + 1..].iter_mut().zip(&col[k + 1..]) {
                *xi -= li * xk;
            }
        }
    }
    inv.transpose() * &inv
}

/// Log marginal posterior of the log hyperparameters and its gradient.
///
/// `log π(η) - ½ Δᵀ K⁻¹ Δ - ½ log det K`; the gradient is with respect to
/// every coordinate of η, pinned or not.
pub fn map_objective(ts: &TrainingSet, prior: &HyperPrior, eta: &[f64]) -> Result<(f64, Vec<f64>)> {
    let p = ts.dim();
    if eta.len() != p + 2 {
        return Err(Error::Dimension { expected: p + 2, got: eta.len() });
    }
    let h = Hyper::from_log(eta);
    h.validate()?;
    let t = ts.len();
    let inv_l2 = h.inv_l2();
    let sf2 = h.signal_var;
    // kernel part of K, kept for the gradient
    let mut kf = DMatrix::zeros(t, t);
    for j in 0..t {
        for i in j..t {
            let v = kern(&ts.points[i], &ts.points[j], sf2, &inv_l2);
            kf[(i, j)] = v;
            kf[(j, i)] = v;
        }
    }
    let mut k = kf.clone();
    for i in 0..t {
        k[(i, i)] += h.noise_var;
    }
    let (chol, _) = cholesky_with_jitter(&k, sf2)?;
    let y = DVector::from_column_slice(&ts.values);
    let alpha = chol.solve(&y);
    let logdet: f64 = 2.0 * (0..t).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>();
    let value = prior.ln_density(eta) - 0.5 * y.dot(&alpha) - 0.5 * logdet;

    let kinv = inverse_from_factor(chol.l_dirty());
    let mut grad = vec![0.0; p + 2];
    for j in 0..t {
        for i in j..t {
            let w = alpha[i] * alpha[j] - kinv[(i, j)];
            let scale = if i == j { 0.5 } else { 1.0 };
            let kij = kf[(i, j)] * w * scale;
            grad[0] += kij;
            if i != j {
                for d in 0..p {
                    let dx = ts.points[i][d] - ts.points[j][d];
                    grad[1 + d] += kij * dx * dx * inv_l2[d];
                }
            } else {
                grad[p + 1] += w * h.noise_var * 0.5;
            }
        }
    }
    for &i in &prior.free() {
        grad[i] -= (eta[i] - prior.mu[i]) / (prior.sd[i] * prior.sd[i]);
    }
    Ok((value, grad))
}

#[derive(Clone, Debug)]
pub struct MapOptions {
    /// Random starts drawn from the hyperprior, on top of the initial point.
    pub restarts: usize,
    pub lbfgs: LbfgsOptions,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self { restarts: 10, lbfgs: LbfgsOptions { max_iter: 100, grad_tol: 1e-5, ..Default::default() } }
    }
}

#[derive(Clone, Debug)]
pub struct MapFit {
    pub hyper: Hyper,
    pub objective: f64,
}

/// Maximise [`map_objective`] over the free log hyperparameters with multistart L-BFGS.
pub fn map_hyperparams<R: Rng + ?Sized>(
    ts: &TrainingSet,
    prior: &HyperPrior,
    init: Option<&Hyper>,
    opts: &MapOptions,
    rng: &mut R,
) -> Result<MapFit> {
    if ts.len() < 2 {
        return Err(Error::Invalid(format!("MAP needs at least 2 observations, got {}", ts.len())));
    }
    let free = prior.free();
    let full0 = prior.mu.clone();
    if free.is_empty() {
        let hyper = Hyper::from_log(&full0);
        let objective = map_objective(ts, prior, &full0)?.0;
        return Ok(MapFit { hyper, objective });
    }
    let (lo_full, hi_full) = prior.search_box();
    let lo: Vec<f64> = free.iter().map(|&i| lo_full[i]).collect();
    let hi: Vec<f64> = free.iter().map(|&i| hi_full[i]).collect();

    let mut starts = Vec::with_capacity(opts.restarts + 1);
    let init_eta = init.map(|h| h.to_log()).unwrap_or_else(|| prior.mu.clone());
    starts.push(free.iter().map(|&i| init_eta[i]).collect::<Vec<_>>());
    for _ in 0..opts.restarts {
        starts.push(
            free.iter()
                .map(|&i| {
                    let z: f64 = StandardNormal.sample(rng);
                    (prior.mu[i] + prior.sd[i] * z).clamp(lo_full[i], hi_full[i])
                })
                .collect(),
        );
    }

    let expand = |xf: &[f64]| {
        let mut eta = full0.clone();
        for (k, &i) in free.iter().enumerate() {
            eta[i] = xf[k];
        }
        eta
    };
    let neg = |xf: &[f64], g: &mut [f64]| -> f64 {
        match map_objective(ts, prior, &expand(xf)) {
            Ok((v, gfull)) => {
                for (k, &i) in free.iter().enumerate() {
                    g[k] = -gfull[i];
                }
                -v
            }
            Err(_) => f64::INFINITY,
        }
    };
    match minimize_multistart(neg, &starts, &lo, &hi, &opts.lbfgs) {
        Some(r) => Ok(MapFit { hyper: Hyper::from_log(&expand(&r.x)), objective: -r.f }),
        None => Err(Error::MapFailed { best: Box::new(Hyper::from_log(&expand(&starts[0]))) }),
    }
}
