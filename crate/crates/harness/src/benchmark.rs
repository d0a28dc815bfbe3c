//! Repeated runs over a problems × rules matrix, summarised by median AUC-TV.

use std::collections::HashMap;

use gpabc_core::acquisition::Rule;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::BenchmarkConfig;
use crate::error::{HarnessError, Result};
use crate::runner::{run_inference, ReferenceCache};
use crate::simulators::Simulator;

/// One repetition of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub problem: String,
    pub rule: Rule,
    pub rep: usize,
    pub seed: u64,
    pub auc: Option<f64>,
    pub final_tv: Option<f64>,
    /// TV after every evaluation, starting at `t0`.
    pub tv: Vec<Option<f64>>,
    pub simulator_failures: usize,
    pub numerical_failures: usize,
    pub error: Option<String>,
}

impl RunSummary {
    pub fn ok(&self) -> bool {
        self.error.is_none() && self.auc.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub problem: String,
    pub rule: Rule,
    pub median_auc: Option<f64>,
    pub ratio_vs_expintvar: Option<f64>,
    pub ok: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub rows: Vec<TableRow>,
    pub runs: Vec<RunSummary>,
}

impl BenchmarkTable {
    pub fn row(&self, problem: &str, rule: Rule) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.problem == problem && r.rule == rule)
    }
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

/// Median per cell and the ratio to the expintvar median of the same problem.
pub fn summarise(runs: Vec<RunSummary>, problems: &[String], rules: &[Rule]) -> BenchmarkTable {
    let mut rows = Vec::new();
    let mut medians: HashMap<(String, Rule), Option<f64>> = HashMap::new();
    for p in problems {
        for &r in rules {
            let cell: Vec<&RunSummary> = runs.iter().filter(|s| &s.problem == p && s.rule == r).collect();
            let aucs: Vec<f64> = cell.iter().filter(|s| s.ok()).filter_map(|s| s.auc).collect();
            let m = median(&aucs);
            medians.insert((p.clone(), r), m);
            rows.push(TableRow {
                problem: p.clone(),
                rule: r,
                median_auc: m,
                ratio_vs_expintvar: None,
                ok: aucs.len(),
                total: cell.len(),
            });
        }
    }
    for row in rows.iter_mut() {
        let base = medians.get(&(row.problem.clone(), Rule::Expintvar)).copied().flatten();
        row.ratio_vs_expintvar = match (row.median_auc, base) {
            (Some(m), Some(b)) if b > 0.0 => Some(m / b),
            _ => None,
        };
    }
    BenchmarkTable { rows, runs }
}

/// Run every cell with seeds `base + rep`; `threads = None` uses rayon's default pool.
pub fn run_benchmark(cfg: &BenchmarkConfig, threads: Option<usize>) -> Result<BenchmarkTable> {
    cfg.validate()?;
    let sims: Vec<(String, Box<dyn Simulator>, ReferenceCache)> = cfg
        .problems
        .iter()
        .map(|p| Ok((p.clone(), cfg.cell(p, cfg.rules[0]).build_simulator()?, ReferenceCache::new())))
        .collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for (pi, _) in cfg.problems.iter().enumerate() {
        for &rule in &cfg.rules {
            for rep in 0..cfg.base.reps {
                jobs.push((pi, rule, rep));
            }
        }
    }
    let work = || -> Vec<RunSummary> {
        jobs.par_iter()
            .map(|&(pi, rule, rep)| {
                let (name, sim, refs) = &sims[pi];
                let run_cfg = cfg.cell(name, rule);
                let seed = cfg.base.seed.wrapping_add(rep as u64);
                let mut s = RunSummary {
                    problem: name.clone(),
                    rule,
                    rep,
                    seed,
                    auc: None,
                    final_tv: None,
                    tv: Vec::new(),
                    simulator_failures: 0,
                    numerical_failures: 0,
                    error: None,
                };
                match run_inference(&run_cfg, sim.as_ref(), refs, seed) {
                    Ok(r) => {
                        s.auc = r.auc_tv;
                        s.final_tv = r.final_tv();
                        s.tv = r.records.iter().map(|x| x.tv).collect();
                        s.simulator_failures = r.simulator_failures;
                        s.numerical_failures = r.numerical_failures;
                    }
                    Err(e) => {
                        log::error!("{name}/{rule} rep {rep}: {e}");
                        s.error = Some(e.to_string());
                    }
                }
                s
            })
            .collect()
    };
    let runs = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    Ok(summarise(runs, &cfg.problems, &cfg.rules))
}
