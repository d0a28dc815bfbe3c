//! Adaptive random-walk Metropolis, integration grids and importance samples.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{Bounds, Prior};
use crate::error::{Error, Result};
use crate::gp::FittedGp;
use crate::posterior::unnorm_post_moments;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub chains: usize,
    pub steps: usize,
    pub burn_in: f64,
    pub thin: usize,
    pub target_accept: (f64, f64),
    /// Initial proposal sd as a fraction of each box width.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self { chains: 4, steps: 2500, burn_in: 0.5, thin: 1, target_accept: (0.2, 0.3), init_scale: 0.1, seed: 0 }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.steps == 0 || self.thin == 0 || !(0.0..1.0).contains(&self.burn_in) {
            return Err(Error::Invalid(format!("bad MCMC config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct McmcOutput {
    /// Post burn-in draws of all chains, chain by chain.
    pub samples: Vec<Vec<f64>>,
    pub accept_rate: Vec<f64>,
    /// Split-R̂ per coordinate.
    pub rhat: Vec<f64>,
}

/// Run `cfg.chains` independent adaptive Metropolis chains on `log_target`
/// restricted to `bounds`. Adaptation of the proposal covariance and scale
/// happens during burn-in only.
pub fn adaptive_metropolis<F>(log_target: &F, bounds: &Bounds, cfg: &McmcConfig, init: Option<&[f64]>) -> Result<McmcOutput>
where
    F: Fn(&[f64]) -> f64,
{
    cfg.validate()?;
    let p = bounds.dim();
    let burn = ((cfg.steps as f64) * cfg.burn_in).floor() as usize;
    let mut samples = Vec::new();
    let mut chains_kept: Vec<Vec<Vec<f64>>> = Vec::with_capacity(cfg.chains);
    let mut accept_rate = Vec::with_capacity(cfg.chains);

    for c in 0..cfg.chains {
        let mut rng = crate::rng::stream(cfg.seed, &[0x6d636d63, c as u64]);
        let (mut x, mut lp) = init_point(log_target, bounds, init, &mut rng)?;
        let mut scale = 1.0;
        let base: Vec<f64> = (0..p).map(|i| (cfg.init_scale * bounds.width(i)).powi(2)).collect();
        let mut chol = DMatrix::from_diagonal(&DVector::from_iterator(p, base.iter().map(|v| v.sqrt())));
        let mut mean = DVector::from_column_slice(&x);
        let mut m2 = DMatrix::zeros(p, p);
        let mut n_seen = 1.0;
        let mut window_acc = 0usize;
        let mut burn_acc = 0usize;
        let mut acc = 0usize;
        let mut kept = Vec::new();
        let mut prop = vec![0.0; p];
        let sd_opt = 2.38 / (p as f64).sqrt();

        for step in 0..cfg.steps {
            let z = DVector::from_iterator(p, (0..p).map(|_| StandardNormal.sample(&mut rng)));
            let dz = &chol * z;
            for i in 0..p {
                prop[i] = x[i] + scale * dz[i];
            }
            let accepted = if bounds.contains(&prop) {
                let lq = log_target(&prop);
                let u: f64 = rng.random();
                if lq.is_finite() && (lq - lp >= 0.0 || u.ln() < lq - lp) {
                    x.copy_from_slice(&prop);
                    lp = lq;
                    true
                } else {
                    false
                }
            } else {
                false
            };
            if step < burn {
                if accepted {
                    window_acc += 1;
                    burn_acc += 1;
                }
                // Welford update of the chain history
                n_seen += 1.0;
                let xv = DVector::from_column_slice(&x);
                let delta = &xv - &mean;
                mean += &delta / n_seen;
                let delta2 = &xv - &mean;
                m2 += &delta * delta2.transpose();
                if (step + 1) % 50 == 0 {
                    let rate = window_acc as f64 / 50.0;
                    if rate < cfg.target_accept.0 {
                        scale *= 0.8;
                    } else if rate > cfg.target_accept.1 {
                        scale *= 1.25;
                    }
                    window_acc = 0;
                    if n_seen > 2.0 * p as f64 + 10.0 {
                        let mut cov = &m2 / (n_seen - 1.0) * (sd_opt * sd_opt);
                        for i in 0..p {
                            cov[(i, i)] += 1e-10 * base[i];
                        }
                        if let Some(ch) = cov.cholesky() {
                            chol = ch.l();
                        }
                    }
                }
                if step + 1 == burn && burn_acc == 0 {
                    return Err(Error::Sampler(format!("chain {c} accepted no move during burn-in")));
                }
            } else {
                if accepted {
                    acc += 1;
                }
                if (step - burn) % cfg.thin == 0 {
                    kept.push(x.clone());
                }
            }
        }
        let post = cfg.steps - burn;
        accept_rate.push(if post > 0 { acc as f64 / post as f64 } else { 0.0 });
        samples.extend(kept.iter().cloned());
        chains_kept.push(kept);
    }
    let rhat = split_rhat(&chains_kept, p);
    Ok(McmcOutput { samples, accept_rate, rhat })
}

fn init_point<F: Fn(&[f64]) -> f64>(
    log_target: &F,
    bounds: &Bounds,
    init: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, f64)> {
    if let Some(x0) = init {
        if bounds.contains(x0) {
            let lp = log_target(x0);
            if lp.is_finite() {
                return Ok((x0.to_vec(), lp));
            }
        }
    }
    // best of a batch of uniform draws
    let mut best: Option<(Vec<f64>, f64)> = None;
    for _ in 0..200 {
        let x = bounds.sample_uniform(rng);
        let lp = log_target(&x);
        if lp.is_finite() && best.as_ref().is_none_or(|b| lp > b.1) {
            best = Some((x, lp));
        }
    }
    best.ok_or_else(|| Error::Sampler("log target is -inf at 200 uniform draws".into()))
}

/// Split-R̂ of each coordinate across chains.
pub fn split_rhat(chains: &[Vec<Vec<f64>>], p: usize) -> Vec<f64> {
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0) / 2;
    if n < 2 {
        return vec![f64::NAN; p];
    }
    (0..p)
        .map(|d| {
            let mut halves: Vec<Vec<f64>> = Vec::new();
            for c in chains {
                halves.push(c[..n].iter().map(|x| x[d]).collect());
                halves.push(c[n..2 * n].iter().map(|x| x[d]).collect());
            }
            let m = halves.len() as f64;
            let nf = n as f64;
            let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / nf).collect();
            let grand = means.iter().sum::<f64>() / m;
            let b = nf / (m - 1.0) * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
            let w = halves
                .iter()
                .zip(&means)
                .map(|(h, mu)| h.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (nf - 1.0))
                .sum::<f64>()
                / m;
            if w == 0.0 {
                return 1.0;
            }
            (((nf - 1.0) / nf * w + b / nf) / w).sqrt()
        })
        .collect()
}

/// Exactly `s` evenly spaced draws.
pub fn thin_to(samples: &[Vec<f64>], s: usize) -> Vec<Vec<f64>> {
    if samples.is_empty() || s == 0 {
        return Vec::new();
    }
    let n = samples.len();
    (0..s).map(|i| samples[((i as f64 + 0.5) * n as f64 / s as f64) as usize % n].clone()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SchemeKind {
    Grid { resolution: usize },
    Importance,
}

/// Points and normalised weights approximating `∫_Θ h(θ) dθ ≈ volume · Σ w_i h(θ_i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrationScheme {
    pub kind: SchemeKind,
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub volume: f64,
}

impl IntegrationScheme {
    /// Weighted average `Σ w_i h_i`.
    pub fn mean_of(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, h)| w * h).sum()
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.volume * self.mean_of(values)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Tensor grid of cell centres on a box of dimension 1 or 2.
pub fn grid_scheme(bounds: &Bounds, resolution: usize) -> Result<IntegrationScheme> {
    let p = bounds.dim();
    if p > 2 {
        return Err(Error::Unsupported(format!("grid integration for p={p}")));
    }
    if resolution == 0 {
        return Err(Error::Invalid("grid resolution must be positive".into()));
    }
    let axis = |i: usize| -> Vec<f64> {
        let h = bounds.width(i) / resolution as f64;
        (0..resolution).map(|k| bounds.lo[i] + (k as f64 + 0.5) * h).collect()
    };
    let points: Vec<Vec<f64>> = if p == 1 {
        axis(0).into_iter().map(|x| vec![x]).collect()
    } else {
        let (ax, ay) = (axis(0), axis(1));
        // first coordinate varies fastest
        ay.iter().flat_map(|&y| ax.iter().map(move |&x| vec![x, y])).collect()
    };
    let n = points.len();
    Ok(IntegrationScheme {
        kind: SchemeKind::Grid { resolution },
        points,
        weights: vec![1.0 / n as f64; n],
        volume: bounds.volume(),
    })
}

/// Self-normalised importance scheme from draws of `q̃` and its unnormalised values.
/// Points with `q̃ < 1e-300` get zero weight.
pub fn importance_scheme(points: Vec<Vec<f64>>, q_values: &[f64], volume: f64) -> Result<IntegrationScheme> {
    let raw: Vec<f64> = q_values.iter().map(|&q| if q >= 1e-300 { 1.0 / q } else { 0.0 }).collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateScheme);
    }
    Ok(IntegrationScheme {
        kind: SchemeKind::Importance,
        points,
        weights: raw.iter().map(|w| w / total).collect(),
        volume,
    })
}

/// `s` draws from `π_q ∝ π²(θ) V(p_a(θ))` with self-normalised weights `∝ 1/(π² V)`.
pub fn sample_pi_q(gp: &FittedGp, eps: f64, prior: &Prior, s: usize, cfg: &McmcConfig) -> Result<IntegrationScheme> {
    let q = |x: &[f64]| unnorm_post_moments(gp, x, eps, prior).var;
    let log_q = |x: &[f64]| q(x).ln();
    let out = adaptive_metropolis(&log_q, prior.bounds(), cfg, None)?;
    if let Some(r) = out.rhat.iter().cloned().fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v)))) {
        if r > 1.2 {
            log::warn!("π_q sampler split-R̂ {r:.3}");
        }
    }
    let points = thin_to(&out.samples, s);
    let qs: Vec<f64> = points.iter().map(|x| q(x)).collect();
    importance_scheme(points, &qs, prior.bounds().volume())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_basics() {
        let b = Bounds::new(vec![0.0, 1.0], vec![2.0, 5.0]).unwrap();
        let g = grid_scheme(&b, 1).unwrap();
        assert_eq!(g.points, vec![vec![1.0, 3.0]]);
        let g = grid_scheme(&b, 10).unwrap();
        let one = vec![1.0 / 8.0; g.len()];
        assert!((g.integrate(&one) - 1.0).abs() < 1e-12);
        assert!(grid_scheme(&Bounds::cube(3, 0.0, 1.0), 5).is_err());
    }

    #[test]
    fn thin_exact_count() {
        let xs: Vec<Vec<f64>> = (0..1000).map(|i| vec![i as f64]).collect();
        for s in [1, 7, 500, 1000, 1500] {
            assert_eq!(thin_to(&xs, s).len(), s);
        }
    }

    #[test]
    fn constant_integrand_is_exact() {
        let sch = importance_scheme(vec![vec![0.0]; 3], &[0.5, 2.0, 7.0], 4.0).unwrap();
        assert!((sch.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((sch.mean_of(&[3.5; 3]) - 3.5).abs() < 1e-15);
        assert!(importance_scheme(vec![vec![0.0]], &[0.0], 1.0).is_err());
    }

    #[test]
    fn determinism_and_support() {
        let b = Bounds::cube(2, -1.0, 1.0);
        let f = |x: &[f64]| -(x[0] * x[0] + x[1] * x[1]) * 5.0;
        let cfg = McmcConfig { steps: 600, seed: 9, ..Default::default() };
        let a = adaptive_metropolis(&f, &b, &cfg, None).unwrap();
        let c = adaptive_metropolis(&f, &b, &cfg, None).unwrap();
        assert_eq!(a.samples, c.samples);
        assert!(a.samples.iter().all(|x| b.contains(x)));
    }
}
