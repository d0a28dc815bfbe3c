//! Acquisition rules and their optimisation.
//!
//! expintvar minimises the expected integrated variance of `π p_a` after one
//! more simulation. The other rules (expdiffvar, maxvar, rand_maxvar, LCB,
//! EI, unif) are the baselines it is compared against.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Bounds, Prior};
use crate::error::{Error, Result};
use crate::gp::FittedGp;
use crate::optim::{fd_gradient, minimize_box, LbfgsOptions};
use crate::posterior::{ab, pa_moments, pa_var, Ensemble, Threshold};
use crate::samplers::{adaptive_metropolis, grid_scheme, sample_pi_q, IntegrationScheme, McmcConfig, SchemeKind};
use crate::special::{norm_cdf, norm_pdf, owens_t};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Expintvar,
    Expdiffvar,
    Maxvar,
    RandMaxvar,
    Lcb,
    Ei,
    Unif,
}

impl Rule {
    pub const ALL: [Rule; 7] =
        [Rule::Expintvar, Rule::Expdiffvar, Rule::Maxvar, Rule::RandMaxvar, Rule::Lcb, Rule::Ei, Rule::Unif];

    pub fn name(&self) -> &'static str {
        match self {
            Rule::Expintvar => "expintvar",
            Rule::Expdiffvar => "expdiffvar",
            Rule::Maxvar => "maxvar",
            Rule::RandMaxvar => "rand_maxvar",
            Rule::Lcb => "lcb",
            Rule::Ei => "ei",
            Rule::Unif => "unif",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Rule::ALL
            .iter()
            .find(|r| r.name() == s.to_ascii_lowercase())
            .copied()
            .ok_or_else(|| Error::Invalid(format!("unknown acquisition rule '{s}'")))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AcqSpec {
    pub rule: Rule,
    /// Importance samples for expintvar when `p > 2`.
    pub is_samples: usize,
    /// Local optimisations per acquisition.
    pub restarts: usize,
    /// Uniform candidates screened to pick the restart points.
    pub candidates: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Confidence parameter δ in the LCB schedule.
    pub lcb_delta: f64,
    /// Grid resolution per axis for `p ≤ 2`.
    pub grid_resolution: usize,
    /// Integration points whose share of the current integrated variance is
    /// below this are folded into a constant.
    pub prune_tol: f64,
    pub mcmc: McmcConfig,
}

impl Default for AcqSpec {
    fn default() -> Self {
        Self {
            rule: Rule::Expintvar,
            is_samples: 500,
            restarts: 3,
            candidates: 100,
            max_iter: 50,
            grad_tol: 1e-9,
            lcb_delta: 0.1,
            grid_resolution: 50,
            prune_tol: 1e-10,
            mcmc: McmcConfig::default(),
        }
    }
}

impl AcqSpec {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::Invalid("restarts must be at least 1".into()));
        }
        if self.is_samples < 10 {
            return Err(Error::Invalid("is_samples must be at least 10".into()));
        }
        self.mcmc.validate()
    }
}

/// `L⁻¹ k(X, θ_g)` for a fixed set of points, with the GP mean and variance there.
///
/// When the GP grows by one observation under the same hyperparameters the
/// cache is extended in `O(t G)` instead of recomputed.
#[derive(Clone, Debug)]
pub struct PointCache {
    pub points: Vec<Vec<f64>>,
    t: usize,
    u: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl PointCache {
    pub fn new(gp: &FittedGp, points: Vec<Vec<f64>>) -> Self {
        let t = gp.len();
        let g = points.len();
        let mut u = vec![0.0; g * t];
        let mut mean = vec![0.0; g];
        let mut var = vec![0.0; g];
        let mut buf = Vec::with_capacity(t);
        for (i, x) in points.iter().enumerate() {
            let pr = gp.predict_with(x, &mut buf);
            u[i * t..(i + 1) * t].copy_from_slice(&buf);
            mean[i] = pr.mean;
            var[i] = pr.var;
        }
        Self { points, t, u, mean, var }
    }

    pub fn len_train(&self) -> usize {
        self.t
    }

    pub fn u(&self, g: usize) -> &[f64] {
        &self.u[g * self.t..(g + 1) * self.t]
    }

    /// Bring the cache up to `gp`, which must equal the cached GP with one
    /// observation appended under the same hyperparameters.
    pub fn extend(&mut self, gp: &FittedGp) {
        let t = self.t;
        assert_eq!(gp.len(), t + 1, "cache extension expects exactly one new observation");
        let lrow: Vec<f64> = (0..t).map(|j| gp.l_entry(t, j)).collect();
        let d = gp.l_entry(t, t);
        let bt = gp.beta()[t];
        let xn = &gp.points()[t];
        let sf2 = gp.signal_var();
        let g = self.points.len();
        let mut u = vec![0.0; g * (t + 1)];
        for i in 0..g {
            let old = &self.u[i * t..(i + 1) * t];
            let dotp: f64 = old.iter().zip(&lrow).map(|(a, b)| a * b).sum();
            let unew = (gp.kernel(xn, &self.points[i]) - dotp) / d;
            let dst = &mut u[i * (t + 1)..(i + 1) * (t + 1)];
            dst[..t].copy_from_slice(old);
            dst[t] = unew;
            self.mean[i] += unew * bt;
            self.var[i] = (self.var[i] - unew * unew).clamp(0.0, sf2);
        }
        self.u = u;
        self.t = t + 1;
    }
}

/// `ln(β_t)` schedule: `β_t² = 2 log(t^{p/2+2} π² / (3δ))`.
pub fn lcb_beta(t: usize, p: usize, delta: f64) -> f64 {
    let t = t.max(1) as f64;
    let b2 = 2.0 * ((p as f64 / 2.0 + 2.0) * t.ln() + (PI * PI / (3.0 * delta)).ln());
    b2.max(0.0).sqrt()
}

/// `∂T(h, c)/∂τ²` at `c = √((s - τ²)/(s + τ²))`, with `h² s = d²`.
#[inline]
fn dt_dtau2(d2: f64, s: f64, tau2: f64) -> f64 {
    -(-d2 / (s + tau2)).exp() / (4.0 * PI * (s - tau2).sqrt() * (s + tau2).sqrt())
}

#[derive(Clone, Debug)]
enum Variant {
    Uniform { eps: f64 },
    Gaussian { m_eps: f64, s2: f64 },
}

/// Expected integrated variance after one more simulation, over a fixed
/// integration scheme. Holds everything that does not depend on `θ*`.
#[derive(Clone, Debug)]
pub struct ExpIntVar<'a> {
    gp: &'a FittedGp,
    variant: Variant,
    points: Vec<Vec<f64>>,
    /// `volume · w_g · π²(θ_g)`
    w: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
    a: Vec<f64>,
    u: Vec<f64>,
    /// θ*-independent part of the objective.
    constant: f64,
    current: f64,
}

impl<'a> ExpIntVar<'a> {
    /// `cache`, when given, must hold the scheme's points in order.
    pub fn new(
        gp: &'a FittedGp,
        threshold: Threshold,
        prior: &Prior,
        scheme: &IntegrationScheme,
        cache: Option<&PointCache>,
        prune_tol: f64,
    ) -> Result<Self> {
        let t = gp.len();
        let sn2 = gp.noise_var();
        let variant = match threshold {
            Threshold::Uniform { eps } => Variant::Uniform { eps },
            Threshold::Gaussian { mean, var } => Variant::Gaussian { m_eps: mean, s2: var + sn2 },
        };
        let owned;
        let cache = match cache {
            Some(c) => {
                if c.points.len() != scheme.len() || c.len_train() != t {
                    return Err(Error::Invalid("point cache does not match scheme or GP".into()));
                }
                c
            }
            None => {
                owned = PointCache::new(gp, scheme.points.clone());
                &owned
            }
        };
        let g = scheme.len();
        let mut wt = vec![0.0; g];
        let mut cur = vec![0.0; g];
        let mut total = 0.0;
        for i in 0..g {
            let pi = prior.pdf(&scheme.points[i]);
            wt[i] = scheme.volume * scheme.weights[i] * pi * pi;
            if wt[i] > 0.0 {
                cur[i] = wt[i] * point_var(&variant, cache.mean[i], cache.var[i], sn2);
                total += cur[i];
            }
        }
        if !(scheme.weights.iter().any(|&w| w > 0.0)) {
            return Err(Error::DegenerateScheme);
        }
        let cut = prune_tol * total;
        let mut out = Self {
            gp,
            variant,
            points: Vec::new(),
            w: Vec::new(),
            mean: Vec::new(),
            var: Vec::new(),
            a: Vec::new(),
            u: Vec::new(),
            constant: 0.0,
            current: total,
        };
        for i in 0..g {
            if wt[i] == 0.0 {
                continue;
            }
            if cur[i] <= cut || cache.var[i] == 0.0 {
                // reduction at these points is bounded by their tiny current variance
                out.constant += cur[i];
                continue;
            }
            let (m, v2) = (cache.mean[i], cache.var[i]);
            out.points.push(scheme.points[i].clone());
            out.w.push(wt[i]);
            out.mean.push(m);
            out.var.push(v2);
            out.u.extend_from_slice(cache.u(i));
            match out.variant {
                Variant::Uniform { eps } => {
                    let (a, b) = ab(m, v2, sn2, eps);
                    out.a.push(a);
                    out.constant -= 2.0 * wt[i] * owens_t(a, b);
                }
                Variant::Gaussian { m_eps, s2 } => {
                    out.a.push(0.0);
                    let first = normal_density(m_eps, m, 0.5 * s2 + v2) / (2.0 * (PI * s2).sqrt());
                    out.constant += wt[i] * first;
                }
            }
        }
        Ok(out)
    }

    /// Integrated variance under the current data.
    pub fn current(&self) -> f64 {
        self.current
    }

    /// Number of integration points that are evaluated per call.
    pub fn active_points(&self) -> usize {
        self.w.len()
    }

    fn star(&self, star: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let t = self.gp.len();
        let mut k = vec![0.0; t];
        self.gp.kvec(star, &mut k);
        let mut us = k.clone();
        self.gp.fwd(&mut us);
        let vs2 = (self.gp.signal_var() - us.iter().map(|v| v * v).sum::<f64>()).clamp(0.0, self.gp.signal_var());
        (k, us, vs2)
    }

    /// The integrand at active point `i` given `τ²`.
    #[inline]
    fn integrand(&self, i: usize, tau2: f64) -> f64 {
        let sn2 = self.gp.noise_var();
        match self.variant {
            Variant::Uniform { .. } => {
                let s = sn2 + self.var[i];
                let c = ((s - tau2) / (s + tau2)).sqrt();
                2.0 * self.w[i] * owens_t(self.a[i], c)
            }
            Variant::Gaussian { m_eps, s2 } => {
                let sv = s2 + self.var[i];
                -self.w[i] * normal_density(m_eps, self.mean[i], 0.5 * (sv + tau2))
                    / (2.0 * PI.sqrt() * (sv - tau2).sqrt())
            }
        }
    }

    /// `τ²` at every active point for candidate `θ*`.
    fn tau2_all(&self, star: &[f64], us: &[f64], vs2: f64) -> (Vec<f64>, Vec<f64>) {
        let t = self.gp.len();
        let denom = self.gp.noise_var() + vs2;
        let n = self.w.len();
        let mut tau2 = vec![0.0; n];
        let mut cov = vec![0.0; n];
        for i in 0..n {
            let ui = &self.u[i * t..(i + 1) * t];
            let mut dotp = 0.0;
            for j in 0..t {
                dotp += ui[j] * us[j];
            }
            let c = self.gp.kernel(&self.points[i], star) - dotp;
            cov[i] = c;
            tau2[i] = (c * c / denom).min(self.var[i]);
        }
        (tau2, cov)
    }

    pub fn value(&self, star: &[f64]) -> f64 {
        let (_, us, vs2) = self.star(star);
        let (tau2, _) = self.tau2_all(star, &us, vs2);
        let mut acc = 0.0;
        for (i, &t2) in tau2.iter().enumerate() {
            acc += self.integrand(i, t2);
        }
        acc + self.constant
    }

    /// Value and gradient in `θ*` (uniform threshold).
    pub fn value_grad(&self, star: &[f64]) -> (f64, Vec<f64>) {
        let Variant::Uniform { .. } = self.variant else {
            let v = self.value(star);
            let b = self.gp.bounds();
            let mut g = vec![0.0; star.len()];
            fd_gradient(|x| self.value(x), star, &b.lo, &b.hi, &mut g);
            return (v, g);
        };
        let t = self.gp.len();
        let p = star.len();
        let sn2 = self.gp.noise_var();
        let inv_l2: Vec<f64> = self.gp.hyper().lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
        let (k, us, vs2) = self.star(star);
        let denom = sn2 + vs2;
        // L⁻¹ ∂k(X,θ*)/∂θ*_d and ∂v*²/∂θ*_d
        let mut dus = vec![vec![0.0; t]; p];
        let mut dvs2 = vec![0.0; p];
        for d in 0..p {
            for j in 0..t {
                dus[d][j] = k[j] * (self.gp.points()[j][d] - star[d]) * inv_l2[d];
            }
            self.gp.fwd(&mut dus[d]);
            dvs2[d] = -2.0 * dus[d].iter().zip(&us).map(|(a, b)| a * b).sum::<f64>();
        }
        let (tau2, cov) = self.tau2_all(star, &us, vs2);
        let mut acc = 0.0;
        let mut grad = vec![0.0; p];
        for i in 0..tau2.len() {
            acc += self.integrand(i, tau2[i]);
            if tau2[i] >= self.var[i] || cov[i] == 0.0 {
                continue;
            }
            let s = sn2 + self.var[i];
            let d2 = self.a[i] * self.a[i] * s;
            let coef = 2.0 * self.w[i] * dt_dtau2(d2, s, tau2[i]);
            let ui = &self.u[i * t..(i + 1) * t];
            let ks = self.gp.kernel(&self.points[i], star);
            for d in 0..p {
                let mut dotp = 0.0;
                let du = &dus[d];
                for j in 0..t {
                    dotp += ui[j] * du[j];
                }
                let dcov = ks * (self.points[i][d] - star[d]) * inv_l2[d] - dotp;
                let dtau2 = 2.0 * cov[i] / denom * dcov - cov[i] * cov[i] / (denom * denom) * dvs2[d];
                grad[d] += coef * dtau2;
            }
        }
        (acc + self.constant, grad)
    }

    /// Active integration points ordered by current contribution, largest first.
    pub fn top_points(&self, n: usize) -> Vec<Vec<f64>> {
        let sn2 = self.gp.noise_var();
        let mut idx: Vec<(usize, f64)> = (0..self.w.len())
            .map(|i| (i, self.w[i] * point_var(&self.variant, self.mean[i], self.var[i], sn2)))
            .collect();
        idx.sort_by(|a, b| b.1.total_cmp(&a.1));
        idx.into_iter().take(n).map(|(i, _)| self.points[i].clone()).collect()
    }
}

#[inline]
fn normal_density(x: f64, mean: f64, var: f64) -> f64 {
    norm_pdf((x - mean) / var.sqrt()) / var.sqrt()
}

/// Variance of `p_a` (π = 1) under either threshold.
fn point_var(variant: &Variant, m: f64, v2: f64, sn2: f64) -> f64 {
    use crate::gp::Prediction;
    let pr = Prediction { mean: m, var: v2 };
    match *variant {
        Variant::Uniform { eps } => pa_moments(pr, sn2, eps, 1.0).var,
        Variant::Gaussian { m_eps, s2 } => {
            crate::posterior::gaussian_threshold_moments(pr, sn2, m_eps, s2 - sn2, 1.0).var
        }
    }
}

/// Expected variance of `π p_a` at a point after a simulation that shrinks
/// its GP variance by `τ²`.
pub fn lookahead_var(pred: crate::gp::Prediction, tau2: f64, sn2: f64, threshold: Threshold, pi: f64) -> f64 {
    let (m, v2) = (pred.mean, pred.var);
    let tau2 = tau2.clamp(0.0, v2);
    match threshold {
        Threshold::Uniform { eps } => {
            if v2 == 0.0 {
                return 0.0;
            }
            let (a, b) = ab(m, v2, sn2, eps);
            let s = sn2 + v2;
            let c = ((s - tau2) / (s + tau2)).sqrt();
            2.0 * pi * pi * (owens_t(a, c) - owens_t(a, b))
        }
        Threshold::Gaussian { mean, var } => {
            let s2 = var + sn2;
            let sv = s2 + v2;
            let first = normal_density(mean, m, 0.5 * s2 + v2) / (2.0 * (PI * s2).sqrt());
            let second = normal_density(mean, m, 0.5 * (sv + tau2)) / (2.0 * PI.sqrt() * (sv - tau2).sqrt());
            pi * pi * (first - second)
        }
    }
}

/// Expected integrated variance at `θ*` (no pruning).
pub fn expintvar_value(
    gp: &FittedGp,
    star: &[f64],
    threshold: Threshold,
    prior: &Prior,
    scheme: &IntegrationScheme,
) -> Result<f64> {
    Ok(ExpIntVar::new(gp, threshold, prior, scheme, None, 0.0)?.value(star))
}

pub fn expintvar_grad(
    gp: &FittedGp,
    star: &[f64],
    eps: f64,
    prior: &Prior,
    scheme: &IntegrationScheme,
) -> Result<Vec<f64>> {
    Ok(ExpIntVar::new(gp, Threshold::uniform(eps), prior, scheme, None, 0.0)?.value_grad(star).1)
}

/// Expected reduction of the variance of `π p_a` at the candidate itself.
pub fn expdiffvar_value(gp: &FittedGp, star: &[f64], eps: f64, prior: &Prior) -> f64 {
    let pr = gp.predict(star);
    let pi = prior.pdf(star);
    let sn2 = gp.noise_var();
    if pr.var == 0.0 || pi == 0.0 {
        return 0.0;
    }
    let (a, b) = ab(pr.mean, pr.var, sn2, eps);
    let tau2 = pr.var * pr.var / (sn2 + pr.var);
    let s = sn2 + pr.var;
    let c = ((s - tau2) / (s + tau2)).sqrt();
    (2.0 * pi * pi * (owens_t(a, b) - owens_t(a, c))).max(0.0)
}

/// `log π(θ) + ½ log V(p_a(θ))` and its gradient, with the ensemble variance.
pub fn maxvar_value_grad(ens: &Ensemble, theta: &[f64], eps: f64, prior: &Prior) -> (f64, Vec<f64>) {
    let p = theta.len();
    let mut mu = 0.0;
    let mut within = 0.0;
    let mut phis = Vec::with_capacity(ens.len());
    let mut dj = vec![0.0; p];
    let mut dmu = vec![0.0; p];
    for m in ens.members() {
        let pg = m.gp.predict_grad(theta);
        let sn2 = m.gp.noise_var();
        let s = sn2 + pg.var;
        let (a, b) = ab(pg.mean, pg.var, sn2, eps);
        let phi = norm_cdf(a);
        mu += m.weight * phi;
        phis.push(phi);
        within += m.weight * pa_var(pg.var, sn2, a);
        let dj_da = 2.0 * norm_pdf(a) * norm_cdf(a * b);
        let dj_db = -(-0.5 * a * a * (1.0 + b * b)).exp() / (PI * (1.0 + b * b));
        for d in 0..p {
            let da = -pg.dmean[d] / s.sqrt() - (eps - pg.mean) * pg.dvar[d] / (2.0 * s * s.sqrt());
            let db = -sn2.sqrt() * pg.dvar[d] / (sn2 + 2.0 * pg.var).powf(1.5);
            dj[d] += m.weight * (dj_da * da + dj_db * db);
            dmu[d] += m.weight * norm_pdf(a) * da;
        }
    }
    let between: f64 = ens.members().iter().zip(&phis).map(|(m, ph)| m.weight * (ph - mu).powi(2)).sum();
    let var = (within + between).max(0.0);
    let lp = prior.ln_pdf(theta);
    if var == 0.0 || !lp.is_finite() {
        return (f64::NEG_INFINITY, vec![0.0; p]);
    }
    let gp_ = prior.grad_ln_pdf(theta);
    let grad = (0..p).map(|d| gp_[d] + (dj[d] - 2.0 * mu * dmu[d]) / (2.0 * var)).collect();
    (lp + 0.5 * var.ln(), grad)
}

pub fn maxvar_value(ens: &Ensemble, theta: &[f64], eps: f64, prior: &Prior) -> f64 {
    maxvar_value_grad(ens, theta, eps, prior).0
}

pub fn maxvar_grad(ens: &Ensemble, theta: &[f64], eps: f64, prior: &Prior) -> Vec<f64> {
    maxvar_value_grad(ens, theta, eps, prior).1
}

/// `m(θ) - β v(θ)` and its gradient.
pub fn lcb_value_grad(gp: &FittedGp, theta: &[f64], beta: f64) -> (f64, Vec<f64>) {
    let pg = gp.predict_grad(theta);
    let v = pg.var.sqrt();
    let g = (0..theta.len())
        .map(|d| pg.dmean[d] - if v > 0.0 { beta * pg.dvar[d] / (2.0 * v) } else { 0.0 })
        .collect();
    (pg.mean - beta * v, g)
}

/// Lowest GP mean over the training inputs.
pub fn ei_incumbent(gp: &FittedGp) -> f64 {
    gp.points().iter().map(|x| gp.predict(x).mean).fold(f64::INFINITY, f64::min)
}

/// Expected improvement below `incumbent` and its gradient.
pub fn ei_value_grad(gp: &FittedGp, theta: &[f64], incumbent: f64) -> (f64, Vec<f64>) {
    let pg = gp.predict_grad(theta);
    let p = theta.len();
    let v = pg.var.sqrt();
    if v == 0.0 {
        let imp = incumbent - pg.mean;
        return if imp > 0.0 { (imp, pg.dmean.iter().map(|d| -d).collect()) } else { (0.0, vec![0.0; p]) };
    }
    let z = (incumbent - pg.mean) / v;
    let (pdf, cdf) = (norm_pdf(z), norm_cdf(z));
    let value = (incumbent - pg.mean) * cdf + v * pdf;
    let g = (0..p).map(|d| -pg.dmean[d] * cdf + pdf * pg.dvar[d] / (2.0 * v)).collect();
    (value, g)
}

/// Minimise `f` over `bounds`: screen `candidates` uniform draws plus
/// `extra` points, then run box L-BFGS from the `restarts` best of them.
pub fn optimize_acquisition<F, R>(
    mut f: F,
    bounds: &Bounds,
    spec: &AcqSpec,
    extra: &[Vec<f64>],
    rng: &mut R,
) -> Vec<f64>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    R: Rng + ?Sized,
{
    let p = bounds.dim();
    let mut g = vec![0.0; p];
    let mut cands: Vec<Vec<f64>> = extra.iter().filter(|x| bounds.contains(x)).cloned().collect();
    cands.extend((0..spec.candidates.max(spec.restarts)).map(|_| bounds.sample_uniform(rng)));
    let mut scored: Vec<(usize, f64)> = cands
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let v = f(x, &mut g);
            (i, if v.is_finite() { v } else { f64::INFINITY })
        })
        .collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let opts = LbfgsOptions { max_iter: spec.max_iter, grad_tol: spec.grad_tol, ..Default::default() };
    let mut best: Option<(Vec<f64>, f64)> = None;
    for &(i, v0) in scored.iter().take(spec.restarts) {
        if !v0.is_finite() {
            continue;
        }
        let r = minimize_box(&mut f, &cands[i], &bounds.lo, &bounds.hi, &opts);
        let (x, v) = if r.f.is_finite() && r.f <= v0 { (r.x, r.f) } else { (cands[i].clone(), v0) };
        if best.as_ref().is_none_or(|b| v < b.1) {
            best = Some((x, v));
        }
    }
    match best {
        Some((x, _)) => x,
        None => {
            log::warn!("acquisition optimiser found no finite value; using a screened candidate");
            cands[scored[0].0].clone()
        }
    }
}

/// Everything an acquisition needs about the current iteration.
pub struct AcqContext<'a> {
    pub ensemble: &'a Ensemble,
    pub threshold: Threshold,
    pub prior: &'a Prior,
    /// Integration scheme for expintvar; built on demand when absent.
    pub scheme: Option<&'a IntegrationScheme>,
    /// Cache aligned with `scheme`.
    pub cache: Option<&'a PointCache>,
}

/// Choose the next simulation location.
pub fn select_next<R: Rng + ?Sized>(ctx: &AcqContext, spec: &AcqSpec, rng: &mut R) -> Result<Vec<f64>> {
    let gp = ctx.ensemble.leading();
    let bounds = ctx.prior.bounds();
    let p = bounds.dim();
    let x = match spec.rule {
        Rule::Unif => bounds.sample_uniform(rng),
        Rule::Expintvar => {
            let owned;
            let (scheme, cache) = match ctx.scheme {
                Some(s) => (s, ctx.cache),
                None => {
                    owned = build_scheme(gp, ctx.threshold, ctx.prior, spec, rng)?;
                    (&owned, None)
                }
            };
            let ev = ExpIntVar::new(gp, ctx.threshold, ctx.prior, scheme, cache, spec.prune_tol)?;
            let extra = ev.top_points(3);
            optimize_acquisition(
                |x, g| {
                    let (v, gr) = ev.value_grad(x);
                    g.copy_from_slice(&gr);
                    v
                },
                bounds,
                spec,
                &extra,
                rng,
            )
        }
        Rule::Expdiffvar => {
            let eps = ctx.threshold.eps()?;
            let f = |x: &[f64]| -expdiffvar_value(gp, x, eps, ctx.prior);
            optimize_acquisition(
                |x, g| {
                    fd_gradient(f, x, &bounds.lo, &bounds.hi, g);
                    f(x)
                },
                bounds,
                spec,
                &[],
                rng,
            )
        }
        Rule::Maxvar => {
            let eps = ctx.threshold.eps()?;
            optimize_acquisition(
                |x, g| {
                    let (v, gr) = maxvar_value_grad(ctx.ensemble, x, eps, ctx.prior);
                    for d in 0..p {
                        g[d] = -gr[d];
                    }
                    -v
                },
                bounds,
                spec,
                &[],
                rng,
            )
        }
        Rule::RandMaxvar => rand_maxvar_draw(ctx.ensemble, ctx.threshold.eps()?, ctx.prior, spec, rng)?,
        Rule::Lcb => {
            let beta = lcb_beta(gp.len(), p, spec.lcb_delta);
            optimize_acquisition(
                |x, g| {
                    let (v, gr) = lcb_value_grad(gp, x, beta);
                    g.copy_from_slice(&gr);
                    v
                },
                bounds,
                spec,
                &[],
                rng,
            )
        }
        Rule::Ei => {
            let inc = ei_incumbent(gp);
            optimize_acquisition(
                |x, g| {
                    let (v, gr) = ei_value_grad(gp, x, inc);
                    for d in 0..p {
                        g[d] = -gr[d];
                    }
                    -v
                },
                bounds,
                spec,
                &[],
                rng,
            )
        }
    };
    let mut x = x;
    bounds.clamp(&mut x);
    Ok(x)
}

/// Grid for `p ≤ 2`, importance samples from `π_q` otherwise.
pub fn build_scheme<R: Rng + ?Sized>(
    gp: &FittedGp,
    threshold: Threshold,
    prior: &Prior,
    spec: &AcqSpec,
    rng: &mut R,
) -> Result<IntegrationScheme> {
    let bounds = prior.bounds();
    if bounds.dim() <= 2 {
        return grid_scheme(bounds, spec.grid_resolution);
    }
    let eps = match threshold {
        Threshold::Uniform { eps } => eps,
        Threshold::Gaussian { .. } => {
            return Err(Error::Unsupported("importance sampling for the gaussian threshold".into()))
        }
    };
    let mut cfg = spec.mcmc.clone();
    cfg.seed = rng.random();
    sample_pi_q(gp, eps, prior, spec.is_samples, &cfg)
}

/// One draw from `π_q ∝ π²(θ) V(p_a(θ))`.
pub fn rand_maxvar_draw<R: Rng + ?Sized>(
    ens: &Ensemble,
    eps: f64,
    prior: &Prior,
    spec: &AcqSpec,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let bounds = prior.bounds();
    let q = |x: &[f64]| ens.moments(x, eps, prior).var;
    if bounds.dim() <= 2 {
        let grid = grid_scheme(bounds, spec.grid_resolution)?;
        let mass: Vec<f64> = grid.points.iter().map(|x| q(x)).collect();
        let total: f64 = mass.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Sampler("π_q has no mass on the grid".into()));
        }
        let mut u = rng.random::<f64>() * total;
        let mut cell = mass.len() - 1;
        for (i, m) in mass.iter().enumerate() {
            if u < *m {
                cell = i;
                break;
            }
            u -= m;
        }
        let SchemeKind::Grid { resolution } = grid.kind else { unreachable!() };
        let centre = &grid.points[cell];
        let mut x: Vec<f64> = (0..bounds.dim())
            .map(|i| {
                let h = bounds.width(i) / resolution as f64;
                centre[i] + (rng.random::<f64>() - 0.5) * h
            })
            .collect();
        bounds.clamp(&mut x);
        return Ok(x);
    }
    let mut cfg = spec.mcmc.clone();
    cfg.seed = rng.random();
    let out = adaptive_metropolis(&|x: &[f64]| q(x).ln(), bounds, &cfg, None)?;
    let i = rng.random_range(0..out.samples.len());
    Ok(out.samples[i].clone())
}
