//! Slow reference computations used to validate the closed forms.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::domain::Prior;
use crate::gp::FittedGp;
use crate::posterior::{gaussian_threshold_moments, pa_moments, Threshold};
use crate::quadrature::adaptive_gauss_kronrod;
use crate::samplers::IntegrationScheme;
use crate::special::{norm_cdf, norm_pdf};

/// Owen's T by adaptive quadrature of its defining integral.
pub fn owens_t_quad(h: f64, a: f64) -> f64 {
    adaptive_gauss_kronrod(
        |x| (-0.5 * h * h * (1.0 + x * x)).exp() / (1.0 + x * x),
        0.0,
        a,
        1e-15,
    ) / (2.0 * std::f64::consts::PI)
}

/// `P(X ≤ k, Y ≤ k)` for a standard bivariate normal with correlation `rho`, by quadrature.
pub fn bvn_diag_cdf_quad(k: f64, rho: f64) -> f64 {
    let s = (1.0 - rho * rho).sqrt();
    adaptive_gauss_kronrod(|x| norm_pdf(x) * norm_cdf((k - rho * x) / s), -40.0, k, 1e-14)
}

/// Sample mean and variance with their standard errors.
#[derive(Clone, Copy, Debug)]
pub struct McStats {
    pub mean: f64,
    pub var: f64,
    pub se_mean: f64,
    pub se_var: f64,
}

pub fn mc_stats(xs: &[f64]) -> McStats {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    let var = m2 * n / (n - 1.0);
    McStats { mean, var, se_mean: (var / n).sqrt(), se_var: ((m4 - m2 * m2).max(0.0) / n).sqrt() }
}

/// Draws of `π Φ((ε - f)/σ_n)` with `f ~ N(m, v²)`.
pub fn pa_mc<R: Rng + ?Sized>(m: f64, v2: f64, sn2: f64, eps: f64, pi: f64, n: usize, rng: &mut R) -> McStats {
    let (v, sn) = (v2.sqrt(), sn2.sqrt());
    let xs: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            pi * norm_cdf((eps - m - v * z) / sn)
        })
        .collect();
    mc_stats(&xs)
}

/// Draws of `π N(m_ε | f, σ_ε² + σ_n²)` with `f ~ N(m, v²)`.
pub fn gaussian_threshold_mc<R: Rng + ?Sized>(
    m: f64,
    v2: f64,
    sn2: f64,
    m_eps: f64,
    var_eps: f64,
    pi: f64,
    n: usize,
    rng: &mut R,
) -> McStats {
    let v = v2.sqrt();
    let s2 = var_eps + sn2;
    let xs: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            pi * norm_pdf((m_eps - m - v * z) / s2.sqrt()) / s2.sqrt()
        })
        .collect();
    mc_stats(&xs)
}

/// `∫ V(π p_a)` over the scheme for a fitted GP.
pub fn integrated_variance(gp: &FittedGp, threshold: Threshold, prior: &Prior, scheme: &IntegrationScheme) -> f64 {
    let vals: Vec<f64> = scheme
        .points
        .iter()
        .map(|x| {
            let pr = gp.predict(x);
            let pi = prior.pdf(x);
            match threshold {
                Threshold::Uniform { eps } => pa_moments(pr, gp.noise_var(), eps, pi).var,
                Threshold::Gaussian { mean, var } => gaussian_threshold_moments(pr, gp.noise_var(), mean, var, pi).var,
            }
        })
        .collect();
    scheme.integrate(&vals)
}

/// Expected integrated variance after simulating at `θ*`, by sampling
/// `Δ* ~ N(m(θ*), v²(θ*) + σ_n²)`, refitting and integrating.
pub fn nested_mc_expintvar<R: Rng + ?Sized>(
    gp: &FittedGp,
    star: &[f64],
    threshold: Threshold,
    prior: &Prior,
    scheme: &IntegrationScheme,
    draws: usize,
    rng: &mut R,
) -> McStats {
    let pr = gp.predict(star);
    let sd = (pr.var + gp.noise_var()).sqrt();
    let xs: Vec<f64> = (0..draws)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            let next = gp.append(star.to_vec(), pr.mean + sd * z).expect("refit");
            integrated_variance(&next, threshold, prior, scheme)
        })
        .collect();
    mc_stats(&xs)
}

/// A fitted GP on a quadratic discrepancy with a uniform prior, plus a threshold.
#[derive(Clone, Debug)]
pub struct Instance {
    pub gp: FittedGp,
    pub prior: Prior,
    pub eps: f64,
}

/// Random test instance on `[-2, 2]^p` with `n` noisy observations.
pub fn random_instance<R: Rng + ?Sized>(p: usize, n: usize, rng: &mut R) -> Instance {
    use crate::domain::Bounds;
    use crate::gp::{fit, Hyper, TrainingSet};
    let bounds = Bounds::cube(p, -2.0, 2.0);
    let centre: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
    let sn2: f64 = rng.random_range(0.01..0.2);
    let points: Vec<Vec<f64>> = (0..n).map(|_| bounds.sample_uniform(rng)).collect();
    let values: Vec<f64> = points
        .iter()
        .map(|x| {
            let z: f64 = StandardNormal.sample(rng);
            x.iter().zip(&centre).map(|(a, c)| (a - c).powi(2)).sum::<f64>() + sn2.sqrt() * z
        })
        .collect();
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hyper = Hyper::new(
        rng.random_range(0.5..3.0),
        (0..p).map(|_| rng.random_range(0.4..1.2)).collect(),
        sn2,
    )
    .expect("valid hyperparameters");
    let ts = TrainingSet::from_parts(bounds.clone(), points, values).expect("training set");
    let gp = fit(&ts, &hyper).expect("fit");
    Instance { gp, prior: Prior::uniform(bounds), eps: lo + rng.random_range(0.2..1.0) }
}
