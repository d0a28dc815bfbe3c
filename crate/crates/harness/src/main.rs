use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gpabc_core::acquisition::Rule;
use gpabc_core::rng::stream;
use gpabc_harness::benchmark::run_benchmark;
use gpabc_harness::io::{read_density, table_csv, write_benchmark, write_run};
use gpabc_harness::tv::tv_grid;
use gpabc_harness::{run_inference, BenchmarkConfig, ExperimentConfig, HarnessError, ReferenceCache, Result};
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "gpabc", version, about = "GP-surrogate ABC inference and benchmarks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment configuration (all its repetitions).
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        rule: Option<String>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run a problems × rules matrix and write the AUC-TV table.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Restrict the matrix to one rule.
        #[arg(long)]
        rule: Option<String>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// TV distance between two grid density CSV files.
    EvalTv { a: PathBuf, b: PathBuf },
    /// Raw discrepancy draws at one parameter value.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated parameter value.
        #[arg(long)]
        theta: String,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_rule(s: &str) -> Result<Rule> {
    s.parse().map_err(|e: gpabc_core::Error| HarnessError::Config(e.to_string()))
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| HarnessError::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run { config, seed, out, rule, reps, threads } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(r) = rule {
                cfg.rule = parse_rule(&r)?;
            }
            if let Some(n) = reps {
                cfg.reps = n;
            }
            if let Some(o) = out {
                cfg.out = Some(o.display().to_string());
            }
            cfg.validate()?;
            let out = PathBuf::from(cfg.out.clone().unwrap_or_else(|| "out".into()));
            let sim = cfg.build_simulator()?;
            let refs = ReferenceCache::new();
            let results: Vec<_> = pool(threads)?.install(|| {
                (0..cfg.reps)
                    .into_par_iter()
                    .map(|rep| run_inference(&cfg, sim.as_ref(), &refs, cfg.seed.wrapping_add(rep as u64)))
                    .collect()
            });
            for (rep, r) in results.into_iter().enumerate() {
                let r = r?;
                let dir = if cfg.reps == 1 { out.clone() } else { out.join(format!("rep_{rep}")) };
                write_run(&dir, &r)?;
                println!(
                    "rep {rep} seed {}: final tv {} auc {} simulator failures {} numerical failures {}",
                    r.seed,
                    r.final_tv().map_or("-".into(), |v| format!("{v:.4}")),
                    r.auc_tv.map_or("-".into(), |v| format!("{v:.3}")),
                    r.simulator_failures,
                    r.numerical_failures
                );
            }
        }
        Cmd::Benchmark { config, seed, out, rule, reps, threads } => {
            let mut cfg = BenchmarkConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.base.seed = s;
            }
            if let Some(r) = rule {
                cfg.rules = vec![parse_rule(&r)?];
            }
            if let Some(n) = reps {
                cfg.base.reps = n;
            }
            let out = out.or_else(|| cfg.base.out.clone().map(PathBuf::from)).unwrap_or_else(|| "out".into());
            let table = run_benchmark(&cfg, threads)?;
            write_benchmark(&out, &table)?;
            print!("{}", table_csv(&table));
        }
        Cmd::EvalTv { a, b } => {
            let tv = tv_grid(&read_density(&a)?, &read_density(&b)?)?;
            println!("{tv}");
        }
        Cmd::Simulate { config, theta, n, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            let sim = cfg.build_simulator()?;
            let theta: Vec<f64> = theta
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| HarnessError::Config(format!("--theta: {e}")))?;
            if theta.len() != sim.dim() {
                return Err(HarnessError::Config(format!("--theta needs {} values", sim.dim())));
            }
            let mut rng = stream(seed.unwrap_or(cfg.seed), &[0x5157]);
            for _ in 0..n {
                let d = sim.draw(&theta, &mut rng).map_err(|e| HarnessError::Simulator(e.to_string()))?;
                println!("{d}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
