//! Grid densities and total-variation distances.

use gpabc_core::Bounds;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Density values at the cell centres of a regular grid over `bounds`,
/// first coordinate varying fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    pub bounds: Bounds,
    pub resolution: usize,
    pub values: Vec<f64>,
}

/// Cell centres of a `resolution^p` grid, first coordinate fastest.
pub fn grid_points(bounds: &Bounds, resolution: usize) -> Vec<Vec<f64>> {
    let p = bounds.dim();
    let n = resolution.pow(p as u32);
    (0..n)
        .map(|mut k| {
            (0..p)
                .map(|i| {
                    let j = k % resolution;
                    k /= resolution;
                    bounds.lo[i] + (j as f64 + 0.5) * bounds.width(i) / resolution as f64
                })
                .collect()
        })
        .collect()
}

impl GridDensity {
    pub fn new(bounds: Bounds, resolution: usize, values: Vec<f64>) -> Result<Self> {
        let want = resolution.pow(bounds.dim() as u32);
        if resolution == 0 || values.len() != want {
            return Err(HarnessError::Density(format!("expected {want} grid values, got {}", values.len())));
        }
        Ok(Self { bounds, resolution, values })
    }

    /// Evaluate `f` at the cell centres.
    pub fn from_fn<F: Fn(&[f64]) -> f64>(bounds: Bounds, resolution: usize, f: F) -> Self {
        let values = grid_points(&bounds, resolution).iter().map(|x| f(x)).collect();
        Self { bounds, resolution, values }
    }

    /// Cell averages of `exp(log_f)` from `sub^p` points per cell, rescaled by
    /// the largest log value so narrow peaks do not underflow.
    pub fn from_log_fn_averaged<F: Fn(&[f64]) -> f64>(bounds: Bounds, resolution: usize, sub: usize, log_f: F) -> Self {
        let sub = sub.max(1);
        let fine = grid_points(&bounds, resolution * sub);
        let logs: Vec<f64> = fine.iter().map(|x| log_f(x)).collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let p = bounds.dim();
        let r = resolution;
        let rf = resolution * sub;
        let mut values = vec![0.0; r.pow(p as u32)];
        if top.is_finite() {
            for (k, l) in logs.iter().enumerate() {
                let mut rest = k;
                let mut cell = 0;
                let mut stride = 1;
                for _ in 0..p {
                    let j = rest % rf;
                    rest /= rf;
                    cell += (j / sub) * stride;
                    stride *= r;
                }
                values[cell] += (l - top).exp();
            }
        }
        let n = (sub.pow(p as u32)) as f64;
        values.iter_mut().for_each(|v| *v /= n);
        Self { bounds, resolution, values }
    }

    pub fn cell_volume(&self) -> f64 {
        self.bounds.volume() / self.values.len() as f64
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        grid_points(&self.bounds, self.resolution)
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_volume()
    }

    pub fn normalised(&self) -> Result<Self> {
        if self.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(HarnessError::Density("density has negative or non-finite values".into()));
        }
        let m = self.mass();
        if !(m > 0.0 && m.is_finite()) {
            return Err(HarnessError::Density(format!("density is not normalisable (mass {m})")));
        }
        Ok(Self { bounds: self.bounds.clone(), resolution: self.resolution, values: self.values.iter().map(|v| v / m).collect() })
    }

    /// Grid index of the cell containing `x` (clamped to the box).
    pub fn cell_of(&self, x: &[f64]) -> usize {
        let mut idx = 0;
        let mut stride = 1;
        for i in 0..self.bounds.dim() {
            let f = (x[i] - self.bounds.lo[i]) / self.bounds.width(i);
            let j = ((f * self.resolution as f64) as isize).clamp(0, self.resolution as isize - 1) as usize;
            idx += j * stride;
            stride *= self.resolution;
        }
        idx
    }

    /// 1-D marginal on the same per-axis resolution, normalised.
    pub fn marginal(&self, axis: usize) -> Result<Vec<f64>> {
        let n = self.normalised()?;
        let r = self.resolution;
        let mut out = vec![0.0; r];
        for (k, v) in n.values.iter().enumerate() {
            out[(k / r.pow(axis as u32)) % r] += v;
        }
        let h = self.bounds.width(axis) / r as f64;
        let total: f64 = out.iter().sum::<f64>() * h;
        out.iter_mut().for_each(|v| *v /= total);
        Ok(out)
    }
}

/// `½ ∫ |a - b|` after normalising both on their common grid.
pub fn tv_grid(a: &GridDensity, b: &GridDensity) -> Result<f64> {
    if a.bounds != b.bounds || a.resolution != b.resolution {
        return Err(HarnessError::Density("densities are on different grids".into()));
    }
    let (a, b) = (a.normalised()?, b.normalised()?);
    let s: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).sum();
    Ok((0.5 * s * a.cell_volume()).clamp(0.0, 1.0))
}

/// TV between two 1-D densities tabulated at `res` cell centres on an interval of width `w`.
pub fn tv_1d(a: &[f64], b: &[f64], width: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(HarnessError::Density("marginals differ in length".into()));
    }
    let h = width / a.len() as f64;
    let (sa, sb) = (a.iter().sum::<f64>() * h, b.iter().sum::<f64>() * h);
    if !(sa > 0.0 && sb > 0.0 && sa.is_finite() && sb.is_finite()) {
        return Err(HarnessError::Density("marginal is not normalisable".into()));
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x / sa - y / sb).abs()).sum();
    Ok((0.5 * s * h).clamp(0.0, 1.0))
}

/// Silverman's rule-of-thumb bandwidth for (weighted) 1-D samples.
pub fn silverman_bandwidth(xs: &[f64], ws: &[f64]) -> f64 {
    let sw: f64 = ws.iter().sum();
    let mean = xs.iter().zip(ws).map(|(x, w)| x * w).sum::<f64>() / sw;
    let var = xs.iter().zip(ws).map(|(x, w)| w * (x - mean).powi(2)).sum::<f64>() / sw;
    let n_eff = sw * sw / ws.iter().map(|w| w * w).sum::<f64>();
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let quantile = |q: f64| {
        let mut acc = 0.0;
        for &i in &idx {
            acc += ws[i] / sw;
            if acc >= q {
                return xs[i];
            }
        }
        xs[idx[idx.len() - 1]]
    };
    let iqr = quantile(0.75) - quantile(0.25);
    let spread = if iqr > 0.0 { var.sqrt().min(iqr / 1.34) } else { var.sqrt() };
    0.9 * spread * n_eff.powf(-0.2)
}

/// Gaussian KDE of weighted samples at the `res` cell centres of `[lo, hi]`.
pub fn kde_1d(xs: &[f64], ws: &[f64], lo: f64, hi: f64, res: usize) -> Vec<f64> {
    let h = silverman_bandwidth(xs, ws).max((hi - lo) * 1e-6);
    let sw: f64 = ws.iter().sum();
    let step = (hi - lo) / res as f64;
    (0..res)
        .map(|j| {
            let c = lo + (j as f64 + 0.5) * step;
            xs.iter()
                .zip(ws)
                .map(|(x, w)| w * gpabc_core::special::norm_pdf((c - x) / h))
                .sum::<f64>()
                / (sw * h)
        })
        .collect()
}

/// Average TV over the 1-D marginals, estimate from weighted samples.
pub fn marginal_tv(samples: &[Vec<f64>], weights: &[f64], reference: &[Vec<f64>], bounds: &Bounds) -> Result<f64> {
    let p = bounds.dim();
    if reference.len() != p {
        return Err(HarnessError::Density("reference has the wrong number of marginals".into()));
    }
    if samples.is_empty() || !(weights.iter().sum::<f64>() > 0.0) {
        return Err(HarnessError::Density("estimate has no mass".into()));
    }
    let mut total = 0.0;
    for i in 0..p {
        let xs: Vec<f64> = samples.iter().map(|s| s[i]).collect();
        let est = kde_1d(&xs, weights, bounds.lo[i], bounds.hi[i], reference[i].len());
        total += tv_1d(&est, &reference[i], bounds.width(i))?;
    }
    Ok(total / p as f64)
}
