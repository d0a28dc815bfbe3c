use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{norm_cdf, norm_ppf, norm_sf};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

/// Axis-aligned box `[lo_i, hi_i]^p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::Invalid(format!(
                "bounds need matching non-empty lo/hi, got {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l < h) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::Invalid("bounds need finite lo < hi".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn cube(p: usize, lo: f64, hi: f64) -> Self {
        Self { lo: vec![lo; p], hi: vec![hi; p] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.hi[i] - self.lo[i]
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|i| self.width(i)).product()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lo[i], self.hi[i]);
        }
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim()).map(|i| self.lo[i] + rng.random::<f64>() * self.width(i)).collect()
    }
}

/// Prior density on a box. All evaluations are in log space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prior {
    Uniform { bounds: Bounds },
    /// Independent normals per axis, truncated to the box.
    TruncGaussian { bounds: Bounds, mean: Vec<f64>, sd: Vec<f64> },
}

impl Prior {
    pub fn uniform(bounds: Bounds) -> Self {
        Prior::Uniform { bounds }
    }

    pub fn trunc_gaussian(bounds: Bounds, mean: Vec<f64>, sd: Vec<f64>) -> Result<Self> {
        if mean.len() != bounds.dim() || sd.len() != bounds.dim() {
            return Err(Error::Dimension { expected: bounds.dim(), got: mean.len().min(sd.len()) });
        }
        if sd.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Invalid("prior sd must be positive".into()));
        }
        Ok(Prior::TruncGaussian { bounds, mean, sd })
    }

    pub fn bounds(&self) -> &Bounds {
        match self {
            Prior::Uniform { bounds } | Prior::TruncGaussian { bounds, .. } => bounds,
        }
    }

    pub fn is_proper(&self) -> bool {
        true
    }

    pub fn is_bounded(&self) -> bool {
        true
    }

    /// True when the density does not depend on θ inside the box.
    pub fn is_flat(&self) -> bool {
        matches!(self, Prior::Uniform { .. })
    }

    /// Normalised log density; `-inf` outside the box.
    pub fn ln_pdf(&self, x: &[f64]) -> f64 {
        let b = self.bounds();
        if !b.contains(x) {
            return f64::NEG_INFINITY;
        }
        match self {
            Prior::Uniform { bounds } => -bounds.volume().ln(),
            Prior::TruncGaussian { bounds, mean, sd } => {
                let mut lp = 0.0;
                for i in 0..x.len() {
                    let z = (x[i] - mean[i]) / sd[i];
                    let mass = axis_mass(bounds.lo[i], bounds.hi[i], mean[i], sd[i]);
                    lp += -0.5 * z * z - LN_SQRT_2PI - sd[i].ln() - mass.ln();
                }
                lp
            }
        }
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        self.ln_pdf(x).exp()
    }

    /// Gradient of the log density inside the box.
    pub fn grad_ln_pdf(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Prior::Uniform { .. } => vec![0.0; x.len()],
            Prior::TruncGaussian { mean, sd, .. } => {
                (0..x.len()).map(|i| -(x[i] - mean[i]) / (sd[i] * sd[i])).collect()
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Prior::Uniform { bounds } => bounds.sample_uniform(rng),
            Prior::TruncGaussian { bounds, mean, sd } => (0..bounds.dim())
                .map(|i| {
                    let lo = norm_cdf((bounds.lo[i] - mean[i]) / sd[i]);
                    let hi = norm_cdf((bounds.hi[i] - mean[i]) / sd[i]);
                    let u = lo + rng.random::<f64>() * (hi - lo);
                    let x = mean[i] + sd[i] * norm_ppf(u.clamp(1e-300, 1.0 - 1e-16));
                    x.clamp(bounds.lo[i], bounds.hi[i])
                })
                .collect(),
        }
    }
}

fn axis_mass(lo: f64, hi: f64, mean: f64, sd: f64) -> f64 {
    let a = (lo - mean) / sd;
    let b = (hi - mean) / sd;
    if a > 0.0 {
        norm_sf(a) - norm_sf(b)
    } else {
        norm_cdf(b) - norm_cdf(a)
    }
}
