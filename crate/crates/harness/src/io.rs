//! Result files: traces, JSON results, benchmark tables and grid density CSVs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use gpabc_core::Bounds;

use crate::benchmark::BenchmarkTable;
use crate::error::{HarnessError, Result};
use crate::runner::ExperimentResult;
use crate::tv::GridDensity;

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn trace_csv(result: &ExperimentResult) -> String {
    let p = result.records.first().map_or(0, |r| r.theta.len());
    let mut s = String::from("iter");
    for i in 1..=p {
        let _ = write!(s, ",theta_{i}");
    }
    s.push_str(",delta,epsilon,tv,wall_ms\n");
    for r in &result.records {
        let _ = write!(s, "{}", r.iter);
        for v in &r.theta {
            let _ = write!(s, ",{v}");
        }
        let _ = writeln!(s, ",{},{},{},{}", r.delta, r.epsilon, opt(r.tv), opt(r.wall_ms));
    }
    s
}

pub fn write_run(dir: &Path, result: &ExperimentResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("trace.csv"), trace_csv(result))?;
    let json = serde_json::to_string_pretty(result).map_err(|e| HarnessError::Io(e.into()))?;
    fs::write(dir.join("result.json"), json)?;
    Ok(())
}

pub fn read_result(path: &Path) -> Result<ExperimentResult> {
    let s = fs::read_to_string(path)?;
    serde_json::from_str(&s).map_err(|e| HarnessError::Io(e.into()))
}

pub fn table_csv(table: &BenchmarkTable) -> String {
    let mut s = String::from("problem,rule,median_auc,ratio_vs_expintvar,reps\n");
    for r in &table.rows {
        let reps = if r.ok == r.total { r.total.to_string() } else { format!("{}/{}", r.ok, r.total) };
        let ratio = r.ratio_vs_expintvar.map(|v| format!("{v:.2}")).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{}", r.problem, r.rule, opt(r.median_auc), ratio, reps);
    }
    s
}

pub fn runs_csv(table: &BenchmarkTable) -> String {
    let mut s = String::from("problem,rule,rep,seed,auc,final_tv,simulator_failures,numerical_failures,error\n");
    for r in &table.runs {
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.problem,
            r.rule,
            r.rep,
            r.seed,
            opt(r.auc),
            opt(r.final_tv),
            r.simulator_failures,
            r.numerical_failures,
            err
        );
    }
    s
}

pub fn write_benchmark(dir: &Path, table: &BenchmarkTable) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("table.csv"), table_csv(table))?;
    fs::write(dir.join("runs.csv"), runs_csv(table))?;
    let json = serde_json::to_string_pretty(table).map_err(|e| HarnessError::Io(e.into()))?;
    fs::write(dir.join("benchmark.json"), json)?;
    Ok(())
}

/// Grid density CSV: header `theta_1,...,theta_p,density`, one row per cell centre.
pub fn density_csv(g: &GridDensity) -> String {
    let p = g.bounds.dim();
    let mut s = String::new();
    for i in 1..=p {
        let _ = write!(s, "theta_{i},");
    }
    s.push_str("density\n");
    for (x, v) in g.points().iter().zip(&g.values) {
        for c in x {
            let _ = write!(s, "{c},");
        }
        let _ = writeln!(s, "{v}");
    }
    s
}

/// Parse a density CSV whose rows are the cell centres of a regular grid with
/// the same number of cells on every axis, in any order.
pub fn parse_density_csv(text: &str) -> Result<GridDensity> {
    let bad = |m: String| HarnessError::Density(m);
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| bad("empty density file".into()))?;
    let cols = header.split(',').count();
    if cols < 2 {
        return Err(bad("density file needs coordinate columns and a density column".into()));
    }
    let p = cols - 1;
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for (n, line) in lines.enumerate() {
        let vals: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("row {}: {e}", n + 2)))?;
        if vals.len() != cols {
            return Err(bad(format!("row {} has {} fields, expected {cols}", n + 2, vals.len())));
        }
        if !(vals[p] >= 0.0) || !vals[p].is_finite() {
            return Err(bad(format!("row {}: density must be finite and nonnegative", n + 2)));
        }
        rows.push((vals[..p].to_vec(), vals[p]));
    }
    let mut lo = vec![0.0; p];
    let mut hi = vec![0.0; p];
    let mut res = 0;
    for i in 0..p {
        let mut axis: Vec<f64> = rows.iter().map(|r| r.0[i]).collect();
        axis.sort_by(f64::total_cmp);
        axis.dedup();
        if axis.len() < 2 {
            return Err(bad(format!("axis {} needs at least two distinct centres", i + 1)));
        }
        if i == 0 {
            res = axis.len();
        } else if axis.len() != res {
            return Err(bad("every axis needs the same number of cells".into()));
        }
        let h = (axis[axis.len() - 1] - axis[0]) / (axis.len() - 1) as f64;
        if axis.windows(2).any(|w| ((w[1] - w[0]) - h).abs() > 1e-6 * h.abs().max(1e-300)) {
            return Err(bad(format!("axis {} is not evenly spaced", i + 1)));
        }
        lo[i] = axis[0] - 0.5 * h;
        hi[i] = axis[axis.len() - 1] + 0.5 * h;
    }
    if rows.len() != res.pow(p as u32) {
        return Err(bad(format!("expected {} rows for a full grid, got {}", res.pow(p as u32), rows.len())));
    }
    let bounds = Bounds::new(lo, hi).map_err(|e| bad(e.to_string()))?;
    let mut g = GridDensity { bounds, resolution: res, values: vec![0.0; rows.len()] };
    let mut seen = vec![false; rows.len()];
    for (x, v) in rows {
        let c = g.cell_of(&x);
        if seen[c] {
            return Err(bad(format!("duplicate cell at {x:?}")));
        }
        seen[c] = true;
        g.values[c] = v;
    }
    Ok(g)
}

pub fn read_density(path: &Path) -> Result<GridDensity> {
    let text = fs::read_to_string(path)?;
    parse_density_csv(&text)
}
