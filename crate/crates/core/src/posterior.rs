//! Pointwise uncertainty of the unnormalised ABC posterior `π(θ) p_a(θ)`.
//!
//! Under the GP the latent discrepancy at θ is `f ~ N(m, v²)` and a fresh
//! simulation is accepted with probability `p_a = Φ((ε - f)/σ_n)`. The
//! functions below give moments, cdf, quantiles and density of `p_a` and of
//! `π(θ) p_a(θ)`, for one GP or a weighted ensemble of GPs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::Prior;
use crate::error::{Error, Result};
use crate::gp::{self, map_objective, FittedGp, Hyper, HyperPrior, Prediction, TrainingSet};
use crate::samplers::{adaptive_metropolis, thin_to, McmcConfig};
use crate::special::{inv_mills, norm_cdf, norm_pdf, norm_ppf};

/// Acceptance threshold: a hard cut at ε or a Gaussian kernel around `mean`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Threshold {
    Uniform { eps: f64 },
    Gaussian { mean: f64, var: f64 },
}

impl Threshold {
    pub fn uniform(eps: f64) -> Self {
        Threshold::Uniform { eps }
    }

    pub fn gaussian(mean: f64, var: f64) -> Result<Self> {
        if !(var > 0.0) {
            return Err(Error::Invalid(format!("gaussian threshold needs var > 0, got {var}")));
        }
        Ok(Threshold::Gaussian { mean, var })
    }

    pub fn eps(&self) -> Result<f64> {
        match *self {
            Threshold::Uniform { eps } => Ok(eps),
            Threshold::Gaussian { .. } => Err(Error::Unsupported("operation needs a uniform threshold".into())),
        }
    }
}

/// Mean and variance of `π(θ) p_a(θ)` at one θ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub var: f64,
}

/// The standardised arguments `a = (ε - m)/√(σ_n² + v²)` and `b = σ_n/√(σ_n² + 2v²)`.
#[inline]
pub fn ab(m: f64, v2: f64, sn2: f64, eps: f64) -> (f64, f64) {
    ((eps - m) / (sn2 + v2).sqrt(), (sn2 / (sn2 + 2.0 * v2)).sqrt())
}

fn clamp_var(var: f64, scale: f64) -> f64 {
    if var < -1e-10 * scale {
        log::warn!("variance cancellation {var:e} exceeds round-off (scale {scale:e})");
    }
    var.max(0.0)
}

/// `Φ((ε - m)/√(σ_n² + v²))`.
pub fn acceptance_prob(pred: Prediction, sn2: f64, eps: f64) -> f64 {
    norm_cdf((eps - pred.mean) / (sn2 + pred.var).sqrt())
}

pub fn acceptance_prob_estimate(gp: &FittedGp, theta: &[f64], eps: f64) -> f64 {
    acceptance_prob(gp.predict(theta), gp.noise_var(), eps)
}

/// `V(p_a) = Φ(a)Φ(-a) - 2T(a, b)`, evaluated in a cancellation-free form.
#[inline]
pub fn pa_var(v2: f64, sn2: f64, a: f64) -> f64 {
    if v2 <= 0.0 {
        return 0.0;
    }
    crate::special::bvn_diag_excess(a, v2 / (sn2 + v2))
}

/// Moments of `π p_a` given the GP prediction at θ and the prior density value `pi`.
pub fn pa_moments(pred: Prediction, sn2: f64, eps: f64, pi: f64) -> Moments {
    let (a, _) = ab(pred.mean, pred.var, sn2, eps);
    let mean = pi * norm_cdf(a);
    if pred.var == 0.0 || pi == 0.0 {
        return Moments { mean, var: 0.0 };
    }
    Moments { mean, var: pi * pi * pa_var(pred.var, sn2, a) }
}

pub fn unnorm_post_moments(gp: &FittedGp, theta: &[f64], eps: f64, prior: &Prior) -> Moments {
    pa_moments(gp.predict(theta), gp.noise_var(), eps, prior.pdf(theta))
}

/// cdf of `π p_a` at `z`; a step at the point value when `v = 0` or `π = 0`.
pub fn post_cdf(pred: Prediction, sn2: f64, eps: f64, pi: f64, z: f64) -> f64 {
    if z <= 0.0 && pi > 0.0 {
        return 0.0;
    }
    if z >= pi {
        return 1.0;
    }
    if pred.var == 0.0 {
        let z0 = pi * norm_cdf((eps - pred.mean) / sn2.sqrt());
        return if z >= z0 { 1.0 } else { 0.0 };
    }
    norm_cdf((sn2.sqrt() * norm_ppf(z / pi) + pred.mean - eps) / pred.var.sqrt())
}

/// `α`-quantile of `π p_a`: `π Φ((v Φ⁻¹(α) - m + ε)/σ_n)`.
pub fn post_quantile(pred: Prediction, sn2: f64, eps: f64, pi: f64, alpha: f64) -> Result<f64> {
    let q = crate::special::try_norm_ppf(alpha)?;
    if pi == 0.0 {
        return Ok(0.0);
    }
    Ok(pi * norm_cdf((pred.var.sqrt() * q - pred.mean + eps) / sn2.sqrt()))
}

pub fn unnorm_post_cdf(gp: &FittedGp, theta: &[f64], eps: f64, prior: &Prior, z: f64) -> f64 {
    post_cdf(gp.predict(theta), gp.noise_var(), eps, prior.pdf(theta), z)
}

pub fn unnorm_post_quantile(gp: &FittedGp, theta: &[f64], eps: f64, prior: &Prior, alpha: f64) -> Result<f64> {
    post_quantile(gp.predict(theta), gp.noise_var(), eps, prior.pdf(theta), alpha)
}

/// Density of `p_a` at `z ∈ (0, 1)`.
pub fn pa_pdf(pred: Prediction, sn2: f64, eps: f64, z: f64) -> f64 {
    if !(z > 0.0 && z < 1.0) || pred.var == 0.0 {
        return 0.0;
    }
    let sn = sn2.sqrt();
    let v = pred.var.sqrt();
    let q = norm_ppf(z);
    let d = eps - pred.mean;
    if sn == v {
        (-(d * d) / (2.0 * v * v) + d / v * q).exp()
    } else {
        let r = (sn * q - d) / v;
        (sn / v) * (-0.5 * r * r + 0.5 * q * q).exp()
    }
}

/// `(ε - m)²/σ_n² - log v² - 2 log π`; `+inf` when `v² = 0` or `π = 0`.
pub fn delta_log_var(pred: Prediction, sn2: f64, eps: f64, pi: f64) -> f64 {
    if pred.var <= 0.0 || pi <= 0.0 {
        return f64::INFINITY;
    }
    (eps - pred.mean).powi(2) / sn2 - pred.var.ln() - 2.0 * pi.ln()
}

#[inline]
fn normal_density(x: f64, mean: f64, var: f64) -> f64 {
    norm_pdf((x - mean) / var.sqrt()) / var.sqrt()
}

/// Moments of `π(θ) N(m_ε | f, σ_ε²)` with the noisy simulation folded in.
pub fn gaussian_threshold_moments(pred: Prediction, sn2: f64, m_eps: f64, var_eps: f64, pi: f64) -> Moments {
    let s2 = var_eps + sn2;
    let v2 = pred.var;
    let mean = pi * normal_density(m_eps, pred.mean, s2 + v2);
    if v2 == 0.0 || pi == 0.0 {
        return Moments { mean, var: 0.0 };
    }
    let first = normal_density(m_eps, pred.mean, 0.5 * s2 + v2) / (2.0 * (std::f64::consts::PI * s2).sqrt());
    let second = normal_density(m_eps, pred.mean, s2 + v2).powi(2);
    let raw = first - second;
    Moments { mean, var: pi * pi * clamp_var(raw, first) }
}

/// Gradient of `log π(θ) + log Φ(a(θ))`.
pub fn grad_log_unnorm_post(gp: &FittedGp, theta: &[f64], eps: f64, prior: &Prior) -> Result<Vec<f64>> {
    if !(prior.pdf(theta) > 0.0) {
        return Err(Error::Invalid("prior density is zero at θ".into()));
    }
    let pg = gp.predict_grad(theta);
    let s = gp.noise_var() + pg.var;
    let a = (eps - pg.mean) / s.sqrt();
    let r = inv_mills(a);
    let mut g = prior.grad_ln_pdf(theta);
    for d in 0..g.len() {
        let da = -pg.dmean[d] / s.sqrt() - (eps - pg.mean) * pg.dvar[d] / (2.0 * s * s.sqrt());
        g[d] += r * da;
    }
    Ok(g)
}

pub fn log_unnorm_post(gp: &FittedGp, theta: &[f64], eps: f64, prior: &Prior) -> f64 {
    let p = gp.predict(theta);
    prior.ln_pdf(theta) + crate::special::log_norm_cdf((eps - p.mean) / (gp.noise_var() + p.var).sqrt())
}

#[derive(Clone, Debug)]
pub struct Member {
    pub weight: f64,
    pub gp: FittedGp,
}

/// GPs at several hyperparameter values with normalised weights.
#[derive(Clone, Debug)]
pub struct Ensemble {
    members: Vec<Member>,
}

impl Ensemble {
    pub fn new(members: Vec<Member>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Invalid("empty ensemble".into()));
        }
        let total: f64 = members.iter().map(|m| m.weight).sum();
        if members.iter().any(|m| !(m.weight >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!("ensemble weights must be >= 0 and sum to 1, sum={total}")));
        }
        Ok(Self { members })
    }

    pub fn single(gp: FittedGp) -> Self {
        Self { members: vec![Member { weight: 1.0, gp }] }
    }

    /// Normalise arbitrary non-negative weights, dropping non-finite ones.
    pub fn from_unnormalised(mut members: Vec<Member>) -> Result<Self> {
        let before = members.len();
        members.retain(|m| m.weight.is_finite() && m.weight >= 0.0);
        if members.len() < before {
            log::warn!("dropped {} ensemble members with non-finite weight", before - members.len());
        }
        let total: f64 = members.iter().map(|m| m.weight).sum();
        if !(total > 0.0) {
            return Err(Error::Invalid("ensemble has no positive weight".into()));
        }
        for m in &mut members {
            m.weight /= total;
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Member with the largest weight.
    pub fn leading(&self) -> &FittedGp {
        let mut best = &self.members[0];
        for m in &self.members[1..] {
            if m.weight > best.weight {
                best = m;
            }
        }
        &best.gp
    }

    /// `Σ ω_i Φ(a_i)`, the marginal acceptance probability estimate.
    pub fn acceptance_prob(&self, theta: &[f64], eps: f64) -> f64 {
        self.members.iter().map(|m| m.weight * acceptance_prob_estimate(&m.gp, theta, eps)).sum()
    }

    /// Mean and variance of `π p_a` with the hyperparameters integrated out.
    pub fn moments(&self, theta: &[f64], eps: f64, prior: &Prior) -> Moments {
        let pi = prior.pdf(theta);
        if self.members.len() == 1 {
            return unnorm_post_moments(&self.members[0].gp, theta, eps, prior);
        }
        // within-member variance plus the spread of the member means
        let mut mu = 0.0;
        let mut within = 0.0;
        let mut phis = Vec::with_capacity(self.members.len());
        for m in &self.members {
            let pr = m.gp.predict(theta);
            let (a, _) = ab(pr.mean, pr.var, m.gp.noise_var(), eps);
            let phi = norm_cdf(a);
            mu += m.weight * phi;
            phis.push(phi);
            within += m.weight * pa_var(pr.var, m.gp.noise_var(), a);
        }
        let between: f64 = self.members.iter().zip(&phis).map(|(m, p)| m.weight * (p - mu).powi(2)).sum();
        Moments { mean: pi * mu, var: pi * pi * (within + between) }
    }

    /// Mixture density of `p_a` at `z`.
    pub fn pa_pdf(&self, theta: &[f64], eps: f64, z: f64) -> f64 {
        self.members.iter().map(|m| m.weight * pa_pdf(m.gp.predict(theta), m.gp.noise_var(), eps, z)).sum()
    }

    /// Mixture cdf of `p_a` at `z`.
    pub fn pa_cdf(&self, theta: &[f64], eps: f64, z: f64) -> f64 {
        self.members
            .iter()
            .map(|m| m.weight * post_cdf(m.gp.predict(theta), m.gp.noise_var(), eps, 1.0, z))
            .sum()
    }

    /// `α`-quantile of `π p_a` by bisection on the mixture cdf.
    pub fn quantile(&self, theta: &[f64], eps: f64, prior: &Prior, alpha: f64) -> Result<f64> {
        crate::special::try_norm_ppf(alpha)?;
        let pi = prior.pdf(theta);
        if pi == 0.0 {
            return Ok(0.0);
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.pa_cdf(theta, eps, mid) < alpha {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        Ok(pi * 0.5 * (lo + hi))
    }
}

#[derive(Clone, Debug)]
pub struct CcdOptions {
    /// Radius scaling of the design relative to `√d`.
    pub f0: f64,
    /// Only the centre point: MAP behaviour.
    pub centre_only: bool,
}

impl Default for CcdOptions {
    fn default() -> Self {
        Self { f0: 1.1, centre_only: false }
    }
}

/// Standardised CCD points for dimension `d`: centre, axial points at
/// `±f0 √d` and factorial corners scaled by `f0` (a half fraction for `d > 4`).
pub fn ccd_points(d: usize, f0: f64) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; d]];
    let r = f0 * (d as f64).sqrt();
    for i in 0..d {
        for s in [-1.0, 1.0] {
            let mut z = vec![0.0; d];
            z[i] = s * r;
            pts.push(z);
        }
    }
    let (k, half) = if d <= 4 { (d, false) } else { (d - 1, true) };
    for mask in 0..(1usize << k) {
        let mut z: Vec<f64> = (0..k).map(|i| if mask >> i & 1 == 1 { f0 } else { -f0 }).collect();
        if half {
            let sign: f64 = z.iter().map(|v| v.signum()).product();
            z.push(sign * f0);
        }
        pts.push(z);
    }
    pts
}

/// Negative Hessian of the MAP objective over `free`, by central differences of the analytic gradient.
fn neg_hessian(ts: &TrainingSet, prior: &HyperPrior, eta: &[f64], free: &[usize]) -> Result<nalgebra::DMatrix<f64>> {
    let d = free.len();
    let mut h = nalgebra::DMatrix::zeros(d, d);
    let step = 1e-4;
    for (c, &j) in free.iter().enumerate() {
        let mut ep = eta.to_vec();
        ep[j] += step;
        let mut em = eta.to_vec();
        em[j] -= step;
        let gp_ = map_objective(ts, prior, &ep)?.1;
        let gm = map_objective(ts, prior, &em)?.1;
        for (r, &i) in free.iter().enumerate() {
            h[(r, c)] = -(gp_[i] - gm[i]) / (2.0 * step);
        }
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// CCD ensemble around the MAP estimate in log-hyperparameter space.
pub fn ccd_design(ts: &TrainingSet, prior: &HyperPrior, map: &Hyper, opts: &CcdOptions) -> Result<Ensemble> {
    let free = prior.free();
    let centre = gp::fit(ts, map)?;
    if opts.centre_only || free.is_empty() {
        return Ok(Ensemble::single(centre));
    }
    let eta0 = map.to_log();
    let f_centre = map_objective(ts, prior, &eta0)?.0;
    let d = free.len();
    let a = neg_hessian(ts, prior, &eta0, &free)?;
    let eig = a.symmetric_eigen();
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if !(lmax > 0.0) {
        log::warn!("MAP objective has no curvature; using the centre point only");
        return Ok(Ensemble::single(centre));
    }
    let zs = ccd_points(d, opts.f0);
    let np = zs.len() as f64;
    let f0sq = opts.f0 * opts.f0;
    let gamma = 1.0 / ((np - 1.0) * (f0sq - 1.0) * (1.0 + (-(d as f64) * f0sq / 2.0).exp()));
    let mut members = Vec::with_capacity(zs.len());
    for (k, z) in zs.iter().enumerate() {
        if k == 0 {
            members.push(Member { weight: 1.0, gp: centre.clone() });
            continue;
        }
        let mut eta = eta0.clone();
        for (r, &i) in free.iter().enumerate() {
            let mut off = 0.0;
            for c in 0..d {
                let lam = eig.eigenvalues[c].max(1e-8 * lmax);
                off += eig.eigenvectors[(r, c)] * z[c] / lam.sqrt();
            }
            eta[i] += off;
        }
        let w = match map_objective(ts, prior, &eta) {
            Ok((f, _)) => (f - f_centre).exp() * gamma,
            Err(_) => f64::NAN,
        };
        match gp::fit(ts, &Hyper::from_log(&eta)) {
            Ok(g) => members.push(Member { weight: w, gp: g }),
            Err(e) => log::warn!("dropping CCD point {k}: {e}"),
        }
    }
    Ensemble::from_unnormalised(members)
}

/// Equal-weight ensemble of `s` MCMC draws from the hyperparameter posterior.
pub fn mc_design<R: Rng + ?Sized>(
    ts: &TrainingSet,
    prior: &HyperPrior,
    map: &Hyper,
    s: usize,
    cfg: &McmcConfig,
    rng: &mut R,
) -> Result<Ensemble> {
    let free = prior.free();
    if free.is_empty() || s == 0 {
        return Ok(Ensemble::single(gp::fit(ts, map)?));
    }
    let eta0 = map.to_log();
    let (lo_full, hi_full) = prior.search_box();
    let bounds = crate::domain::Bounds::new(
        free.iter().map(|&i| lo_full[i]).collect(),
        free.iter().map(|&i| hi_full[i]).collect(),
    )?;
    let expand = |x: &[f64]| {
        let mut eta = eta0.clone();
        for (k, &i) in free.iter().enumerate() {
            eta[i] = x[k];
        }
        eta
    };
    let target = |x: &[f64]| map_objective(ts, prior, &expand(x)).map(|r| r.0).unwrap_or(f64::NEG_INFINITY);
    let start: Vec<f64> = free.iter().map(|&i| eta0[i]).collect();
    let mut cfg = cfg.clone();
    cfg.seed = rng.random();
    let out = adaptive_metropolis(&target, &bounds, &cfg, Some(&start))?;
    let draws = thin_to(&out.samples, s);
    let mut members = Vec::with_capacity(s);
    for x in &draws {
        match gp::fit(ts, &Hyper::from_log(&expand(x))) {
            Ok(g) => members.push(Member { weight: 1.0, gp: g }),
            Err(e) => log::warn!("dropping MC hyperparameter draw: {e}"),
        }
    }
    Ensemble::from_unnormalised(members)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(mean: f64, var: f64) -> Prediction {
        Prediction { mean, var }
    }

    #[test]
    fn acceptance_examples() {
        assert_eq!(acceptance_prob(pred(2.0, 0.3), 0.5, 2.0), 0.5);
        assert!((acceptance_prob(pred(1.0, 0.25), 0.75, 0.0) - 0.158_655_253_931_457_05).abs() < 1e-15);
        assert!(acceptance_prob(pred(50.0, 1e-6), 1e-4, 0.0) < 1e-300);
    }

    #[test]
    fn zero_epistemic_variance() {
        let m = pa_moments(pred(1.0, 0.0), 0.3, 1.0, 0.2);
        assert_eq!(m.var, 0.0);
        assert_eq!(m.mean, 0.1);
    }

    #[test]
    fn median_and_roundtrip() {
        let p = pred(0.7, 0.4);
        let med = post_quantile(p, 0.2, 1.1, 0.3, 0.5).unwrap();
        assert!((med - 0.3 * norm_cdf((1.1 - 0.7) / 0.2f64.sqrt())).abs() < 1e-15);
        for &al in &[0.01, 0.2, 0.5, 0.9, 0.999] {
            let z = post_quantile(p, 0.2, 1.1, 0.3, al).unwrap();
            assert!((post_cdf(p, 0.2, 1.1, 0.3, z) - al).abs() < 1e-10);
        }
        assert_eq!(post_cdf(p, 0.2, 1.1, 0.3, 0.31), 1.0);
        assert!(post_quantile(p, 0.2, 1.1, 0.3, 1.0).is_err());
    }

    #[test]
    fn pdf_branches_agree_in_the_limit() {
        let z = 0.3;
        let eq = pa_pdf(pred(0.5, 0.25), 0.25, 0.2, z);
        let near = pa_pdf(pred(0.5, 0.25 * (1.0 + 1e-12)), 0.25, 0.2, z);
        assert!((eq - near).abs() < 1e-9 * eq);
        let q = norm_ppf(z);
        let want = (-(0.3f64).powi(2) / (2.0 * 0.25)).exp() * ((-0.3 / 0.5) * q).exp();
        assert!((eq - want).abs() < 1e-14);
    }

    #[test]
    fn gaussian_threshold_zero_variance() {
        let m = gaussian_threshold_moments(pred(0.4, 0.0), 0.3, 0.4, 0.2, 1.0);
        assert_eq!(m.var, 0.0);
        let s2: f64 = 0.5;
        assert!((m.mean - 1.0 / (2.0 * std::f64::consts::PI * s2).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ccd_point_counts() {
        assert_eq!(ccd_points(1, 1.1).len(), 1 + 2 + 2);
        assert_eq!(ccd_points(4, 1.1).len(), 1 + 8 + 16);
        assert_eq!(ccd_points(5, 1.1).len(), 1 + 10 + 16);
    }
}
