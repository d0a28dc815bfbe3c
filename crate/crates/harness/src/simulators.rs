//! Test problems: synthetic 2-D discrepancies, the Gaussian model and Lotka-Volterra,
//! plus an adapter for simulators running as child processes.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use gpabc_core::special::norm_cdf;
use gpabc_core::{Bounds, Prior};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::tv::GridDensity;

#[derive(Clone, Debug, PartialEq)]
pub enum SimError {
    /// The simulation diverged; carries a description of where.
    BlowUp(String),
    NonFinite(f64),
    External(String),
}

impl std::fmt::Display for SimError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SimError::BlowUp(s) => write!(f, "simulation blew up: {s}"),
            SimError::NonFinite(v) => write!(f, "non-finite discrepancy {v}"),
            SimError::External(s) => write!(f, "external simulator: {s}"),
        }
    }
}

/// Ground truth for TV evaluation.
#[derive(Clone, Debug)]
pub enum Reference {
    /// Normalised grid density (`p <= 2`).
    Grid(GridDensity),
    /// Normalised 1-D marginals on `resolution` cells per axis (`p > 2`).
    Marginals(Vec<Vec<f64>>),
}

pub trait Simulator: Send + Sync {
    fn name(&self) -> &str;
    fn prior(&self) -> &Prior;
    fn dim(&self) -> usize {
        self.prior().bounds().dim()
    }
    /// One discrepancy draw at `theta`.
    fn draw(&self, theta: &[f64], rng: &mut ChaCha8Rng) -> Result<f64, SimError>;
    /// Reference posterior tabulated at `resolution` cells per axis; `None` when unknown.
    fn reference(&self, eps: f64, resolution: usize) -> Option<Reference>;
    /// Whether [`Simulator::reference`] depends on `eps`.
    fn reference_uses_eps(&self) -> bool {
        false
    }
}

fn guard(d: f64) -> Result<f64, SimError> {
    if d.is_finite() {
        Ok(d)
    } else {
        Err(SimError::NonFinite(d))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    Unimodal,
    Bimodal,
    Unidentifiable,
    Banana,
}

impl SyntheticKind {
    pub const ALL: [SyntheticKind; 4] =
        [SyntheticKind::Unimodal, SyntheticKind::Bimodal, SyntheticKind::Unidentifiable, SyntheticKind::Banana];

    pub fn name(&self) -> &'static str {
        match self {
            SyntheticKind::Unimodal => "unimodal",
            SyntheticKind::Bimodal => "bimodal",
            SyntheticKind::Unidentifiable => "unidentifiable",
            SyntheticKind::Banana => "banana",
        }
    }

    pub fn default_bounds(&self) -> Bounds {
        let (lo, hi) = match self {
            SyntheticKind::Unimodal => ([-4.0, -4.0], [4.0, 4.0]),
            SyntheticKind::Bimodal => ([-4.0, -2.0], [4.0, 8.0]),
            SyntheticKind::Unidentifiable => ([-10.0, -4.0], [10.0, 4.0]),
            SyntheticKind::Banana => ([-2.0, -1.0], [3.0, 6.0]),
        };
        Bounds::new(lo.to_vec(), hi.to_vec()).expect("static bounds")
    }
}

/// `Δ_θ ~ N(m(θ), σ²)` with a fixed mean curve.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub kind: SyntheticKind,
    pub sigma: f64,
    prior: Prior,
}

impl Synthetic {
    pub fn new(kind: SyntheticKind, sigma: f64, bounds: Option<Bounds>) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(HarnessError::Config(format!("synthetic sigma must be positive, got {sigma}")));
        }
        let bounds = bounds.unwrap_or_else(|| kind.default_bounds());
        if bounds.dim() != 2 {
            return Err(HarnessError::Config("synthetic problems are two-dimensional".into()));
        }
        Ok(Self { kind, sigma, prior: Prior::uniform(bounds) })
    }

    pub fn mean(&self, t: &[f64]) -> f64 {
        let base = 3.0 * self.sigma;
        let (a, b) = (t[0], t[1]);
        base + match self.kind {
            SyntheticKind::Unimodal => a * a + b * b + a * b,
            SyntheticKind::Bimodal => 0.2 * (b - a * a).powi(2) + 0.75 * (b - a - 2.0).powi(2),
            SyntheticKind::Unidentifiable => 0.01 * a * a + b * b,
            SyntheticKind::Banana => (1.0 - a).powi(2) + 10.0 * (b - a * a).powi(2),
        }
    }

    /// Unnormalised exact ABC posterior `π(θ) Φ((ε - m(θ))/σ)`.
    pub fn exact_abc(&self, t: &[f64], eps: f64) -> f64 {
        self.prior.pdf(t) * norm_cdf((eps - self.mean(t)) / self.sigma)
    }
}

impl Simulator for Synthetic {
    fn name(&self) -> &str {
        self.kind.name()
    }

    fn prior(&self) -> &Prior {
        &self.prior
    }

    fn draw(&self, theta: &[f64], rng: &mut ChaCha8Rng) -> Result<f64, SimError> {
        let z: f64 = StandardNormal.sample(rng);
        guard(self.mean(theta) + self.sigma * z)
    }

    fn reference(&self, eps: f64, resolution: usize) -> Option<Reference> {
        let g = GridDensity::from_log_fn_averaged(self.prior.bounds().clone(), resolution, 4, |t| {
            gpabc_core::special::log_norm_cdf((eps - self.mean(t)) / self.sigma) + self.prior.ln_pdf(t)
        });
        g.normalised().ok().map(Reference::Grid)
    }

    fn reference_uses_eps(&self) -> bool {
        true
    }
}

/// `n` draws from `N(θ, Σ)` compared to the observed sample mean by Mahalanobis distance.
#[derive(Clone, Debug)]
pub struct GaussianModel {
    pub n: usize,
    pub sigma: DMatrix<f64>,
    sigma_chol: DMatrix<f64>,
    sigma_inv: DMatrix<f64>,
    pub x_obs: DVector<f64>,
    prior: Prior,
    /// Conjugate posterior mean and covariance before truncation.
    pub post_mean: DVector<f64>,
    pub post_cov: DMatrix<f64>,
}

impl GaussianModel {
    /// `prior_sd = None` means a uniform prior on `bounds`.
    pub fn new(
        n: usize,
        sigma: DMatrix<f64>,
        bounds: Bounds,
        prior_mean: Option<Vec<f64>>,
        prior_sd: Option<f64>,
        theta_true: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let p = bounds.dim();
        if sigma.nrows() != p || sigma.ncols() != p || theta_true.len() != p {
            return Err(HarnessError::Config("Σ, θ_true and bounds disagree in dimension".into()));
        }
        if n == 0 {
            return Err(HarnessError::Config("gaussian model needs n >= 1".into()));
        }
        if (&sigma - sigma.transpose()).amax() > 1e-12 * sigma.amax() {
            return Err(HarnessError::Config("Σ must be symmetric".into()));
        }
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| HarnessError::Config("Σ must be positive definite".into()))?;
        let sigma_inv = chol.inverse();
        let sigma_chol = chol.l();
        let draw_mean = |rng: &mut ChaCha8Rng, centre: &[f64]| {
            let mut acc = DVector::zeros(p);
            for _ in 0..n {
                let z = DVector::from_fn(p, |_, _| StandardNormal.sample(rng));
                acc += DVector::from_column_slice(centre) + &sigma_chol * z;
            }
            acc / n as f64
        };
        let x_obs = draw_mean(rng, theta_true);
        let nf = n as f64;
        let (prior, prec_prior, prec_mean) = match prior_sd {
            Some(b) => {
                let a = prior_mean.ok_or_else(|| HarnessError::Config("gaussian prior needs prior_mean".into()))?;
                if a.len() != p {
                    return Err(HarnessError::Config("prior_mean has the wrong length".into()));
                }
                let prior = Prior::trunc_gaussian(bounds, a.clone(), vec![b; p])?;
                let prec = DMatrix::identity(p, p) / (b * b);
                let pm = &prec * DVector::from_vec(a);
                (prior, prec, pm)
            }
            None => (Prior::uniform(bounds), DMatrix::zeros(p, p), DVector::zeros(p)),
        };
        let post_prec = prec_prior + &sigma_inv * nf;
        let post_cov = post_prec
            .cholesky()
            .ok_or_else(|| HarnessError::Config("posterior precision is not positive definite".into()))?
            .inverse();
        let post_mean = &post_cov * (prec_mean + &sigma_inv * &x_obs * nf);
        Ok(Self { n, sigma, sigma_chol, sigma_inv, x_obs, prior, post_mean, post_cov })
    }

    /// `Σ_ii = 1`, `Σ_ij = corr`.
    pub fn equicorrelated(p: usize, corr: f64) -> DMatrix<f64> {
        DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { corr })
    }

    fn discrepancy(&self, xbar: &DVector<f64>) -> f64 {
        let d = &self.x_obs - xbar;
        (d.transpose() * &self.sigma_inv * &d)[(0, 0)].max(0.0).sqrt()
    }
}

impl Simulator for GaussianModel {
    fn name(&self) -> &str {
        "gaussian"
    }

    fn prior(&self) -> &Prior {
        &self.prior
    }

    fn draw(&self, theta: &[f64], rng: &mut ChaCha8Rng) -> Result<f64, SimError> {
        let p = theta.len();
        let mut acc = DVector::zeros(p);
        for _ in 0..self.n {
            let z = DVector::from_fn(p, |_, _| StandardNormal.sample(rng));
            acc += DVector::from_column_slice(theta) + &self.sigma_chol * z;
        }
        guard(self.discrepancy(&(acc / self.n as f64)))
    }

    fn reference(&self, _eps: f64, resolution: usize) -> Option<Reference> {
        let bounds = self.prior.bounds().clone();
        let p = bounds.dim();
        if p <= 2 {
            let prec = self.post_cov.clone().cholesky()?.inverse();
            let g = GridDensity::from_log_fn_averaged(bounds, resolution, 4, |t| {
                let d = DVector::from_column_slice(t) - &self.post_mean;
                -0.5 * (d.transpose() * &prec * &d)[(0, 0)]
            });
            return g.normalised().ok().map(Reference::Grid);
        }
        // marginals of the truncated normal from accepted draws
        let chol = self.post_cov.clone().cholesky()?.l();
        let mut rng = gpabc_core::rng::stream(0x7e57, &[p as u64]);
        let mut hist = vec![vec![0.0; resolution]; p];
        let mut kept = 0usize;
        let mut tries = 0usize;
        while kept < 200_000 && tries < 50_000_000 {
            tries += 1;
            let z = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
            let x = &self.post_mean + &chol * z;
            if !bounds.contains(x.as_slice()) {
                continue;
            }
            kept += 1;
            for i in 0..p {
                let f = (x[i] - bounds.lo[i]) / bounds.width(i);
                let j = ((f * resolution as f64) as usize).min(resolution - 1);
                hist[i][j] += 1.0;
            }
        }
        if kept == 0 {
            return None;
        }
        for (i, h) in hist.iter_mut().enumerate() {
            let cell = bounds.width(i) / resolution as f64;
            h.iter_mut().for_each(|v| *v /= kept as f64 * cell);
        }
        Some(Reference::Marginals(hist))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LvSetup {
    pub init: [f64; 2],
    pub horizon: f64,
    pub n_obs: usize,
    pub noise_sd: f64,
    /// Observation noise added to simulated trajectories.
    pub sim_noise_sd: f64,
    pub step: f64,
    pub theta_true: [f64; 2],
}

impl Default for LvSetup {
    fn default() -> Self {
        Self { init: [1.0, 0.5], horizon: 15.0, n_obs: 8, noise_sd: 0.5, sim_noise_sd: 0.5, step: 0.01, theta_true: [1.0, 1.0] }
    }
}

const LV_BLOWUP: f64 = 1e9;
const SSE_FLOOR: f64 = 1e-300;

/// Fixed-step RK4 for `x₁' = θ₁x₁ - x₁x₂`, `x₂' = θ₂x₁x₂ - x₂`, sampled at `times`
/// (ascending, each a multiple of `step` up to rounding).
pub fn lv_solve(theta: &[f64], init: [f64; 2], step: f64, times: &[f64]) -> Result<Vec<[f64; 2]>, SimError> {
    let f = |x: [f64; 2]| [theta[0] * x[0] - x[0] * x[1], theta[1] * x[0] * x[1] - x[1]];
    let mut x = init;
    let mut t = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        let n = ((target - t) / step).round().max(0.0) as usize;
        let h = if n > 0 { (target - t) / n as f64 } else { 0.0 };
        for _ in 0..n {
            let k1 = f(x);
            let k2 = f([x[0] + 0.5 * h * k1[0], x[1] + 0.5 * h * k1[1]]);
            let k3 = f([x[0] + 0.5 * h * k2[0], x[1] + 0.5 * h * k2[1]]);
            let k4 = f([x[0] + h * k3[0], x[1] + h * k3[1]]);
            for i in 0..2 {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if !(x[0].abs() < LV_BLOWUP && x[1].abs() < LV_BLOWUP) {
                return Err(SimError::BlowUp(format!("state {x:?} at θ = {theta:?}")));
            }
        }
        t = target;
        out.push(x);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct LotkaVolterra {
    pub setup: LvSetup,
    pub times: Vec<f64>,
    pub observed: Vec<[f64; 2]>,
    prior: Prior,
}

impl LotkaVolterra {
    pub fn new(setup: LvSetup, bounds: Option<Bounds>, rng: &mut ChaCha8Rng) -> Result<Self> {
        if setup.n_obs == 0 || !(setup.horizon > 0.0) || !(setup.step > 0.0) || !(setup.noise_sd > 0.0) {
            return Err(HarnessError::Config(format!("bad Lotka-Volterra setup {setup:?}")));
        }
        let bounds = bounds.unwrap_or_else(|| Bounds::cube(2, 0.0, 5.0));
        if bounds.dim() != 2 {
            return Err(HarnessError::Config("Lotka-Volterra has two parameters".into()));
        }
        let times: Vec<f64> = (1..=setup.n_obs).map(|i| setup.horizon * i as f64 / setup.n_obs as f64).collect();
        let clean = lv_solve(&setup.theta_true, setup.init, setup.step, &times)
            .map_err(|e| HarnessError::Config(format!("true parameters do not simulate: {e}")))?;
        let observed = clean
            .iter()
            .map(|x| {
                let z1: f64 = StandardNormal.sample(rng);
                let z2: f64 = StandardNormal.sample(rng);
                [x[0] + setup.noise_sd * z1, x[1] + setup.noise_sd * z2]
            })
            .collect();
        Ok(Self { setup, times, observed, prior: Prior::uniform(bounds) })
    }

    pub fn sse(&self, traj: &[[f64; 2]]) -> f64 {
        traj.iter()
            .zip(&self.observed)
            .map(|(m, o)| (o[0] - m[0]).powi(2) + (o[1] - m[1]).powi(2))
            .sum()
    }

    /// Log-likelihood of the observations under the deterministic model.
    pub fn log_lik(&self, theta: &[f64]) -> f64 {
        match lv_solve(theta, self.setup.init, self.setup.step, &self.times) {
            Ok(tr) => -self.sse(&tr) / (2.0 * self.setup.noise_sd * self.setup.noise_sd),
            Err(_) => f64::NEG_INFINITY,
        }
    }
}

/// `log(max(SSE, 1e-300))`.
pub fn log_sse(sse: f64) -> f64 {
    sse.max(SSE_FLOOR).ln()
}

impl Simulator for LotkaVolterra {
    fn name(&self) -> &str {
        "lotka_volterra"
    }

    fn prior(&self) -> &Prior {
        &self.prior
    }

    fn draw(&self, theta: &[f64], rng: &mut ChaCha8Rng) -> Result<f64, SimError> {
        let mut tr = lv_solve(theta, self.setup.init, self.setup.step, &self.times)?;
        if self.setup.sim_noise_sd > 0.0 {
            for x in tr.iter_mut() {
                for v in x.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += self.setup.sim_noise_sd * z;
                }
            }
        }
        guard(log_sse(self.sse(&tr)))
    }

    fn reference(&self, _eps: f64, resolution: usize) -> Option<Reference> {
        let g = GridDensity::from_log_fn_averaged(self.prior.bounds().clone(), resolution, 8, |t| {
            self.log_lik(t) + self.prior.ln_pdf(t)
        });
        g.normalised().ok().map(Reference::Grid)
    }
}

/// A simulator in a child process: one line `θ₁ θ₂ … θ_p` in, one line with Δ out.
pub struct External {
    command: String,
    prior: Prior,
    io: Mutex<Option<(Child, ChildStdin, BufReader<ChildStdout>)>>,
}

impl External {
    pub fn new(command: &str, bounds: Bounds) -> Result<Self> {
        if command.trim().is_empty() {
            return Err(HarnessError::Config("external simulator needs a command".into()));
        }
        Ok(Self { command: command.to_string(), prior: Prior::uniform(bounds), io: Mutex::new(None) })
    }

    fn spawn(&self) -> Result<(Child, ChildStdin, BufReader<ChildStdout>), SimError> {
        let mut parts = self.command.split_whitespace();
        let prog = parts.next().unwrap_or_default();
        let mut child = Command::new(prog)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| SimError::External(format!("cannot start '{}': {e}", self.command)))?;
        let stdin = child.stdin.take().ok_or_else(|| SimError::External("no stdin".into()))?;
        let stdout = BufReader::new(child.stdout.take().ok_or_else(|| SimError::External("no stdout".into()))?);
        Ok((child, stdin, stdout))
    }
}

impl Drop for External {
    fn drop(&mut self) {
        if let Ok(mut g) = self.io.lock() {
            if let Some((mut child, stdin, _)) = g.take() {
                drop(stdin);
                let _ = child.wait();
            }
        }
    }
}

impl Simulator for External {
    fn name(&self) -> &str {
        "external"
    }

    fn prior(&self) -> &Prior {
        &self.prior
    }

    fn draw(&self, theta: &[f64], _rng: &mut ChaCha8Rng) -> Result<f64, SimError> {
        let mut g = self.io.lock().map_err(|_| SimError::External("adapter lock poisoned".into()))?;
        if g.is_none() {
            *g = Some(self.spawn()?);
        }
        let (_, stdin, stdout) = g.as_mut().expect("spawned above");
        let line: Vec<String> = theta.iter().map(|v| v.to_string()).collect();
        let sent = writeln!(stdin, "{}", line.join(" ")).and_then(|_| stdin.flush());
        let mut reply = String::new();
        let got = sent.and_then(|_| stdout.read_line(&mut reply));
        match got {
            Ok(n) if n > 0 => {}
            Ok(_) | Err(_) => {
                // the child is gone; the next call starts a fresh one
                *g = None;
                return Err(SimError::External("simulator closed its output".into()));
            }
        }
        let v: f64 = reply
            .trim()
            .parse()
            .map_err(|_| SimError::External(format!("unparseable reply '{}'", reply.trim())))?;
        guard(v)
    }

    fn reference(&self, _eps: f64, _resolution: usize) -> Option<Reference> {
        None
    }
}

/// Uniform draw helper shared by tests and the CLI.
pub fn random_theta(prior: &Prior, rng: &mut impl Rng) -> Vec<f64> {
    prior.sample(rng)
}
