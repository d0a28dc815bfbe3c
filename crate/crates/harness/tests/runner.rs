use gpabc_core::acquisition::Rule;
use gpabc_core::{Bounds, Prior};
use gpabc_harness::benchmark::run_benchmark;
use gpabc_harness::config::ThresholdKind;
use gpabc_harness::io::{read_result, trace_csv, write_run};
use gpabc_harness::runner::auc_trapezoid;
use gpabc_harness::simulators::{Reference, SimError, Simulator};
use gpabc_harness::threshold::empirical_quantile;
use gpabc_harness::{run_inference, BenchmarkConfig, ExperimentConfig, ReferenceCache};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn small(rule: Rule) -> ExperimentConfig {
    ExperimentConfig {
        simulator: "banana".into(),
        rule,
        t0: 5,
        t_max: 25,
        grid_resolution: 20,
        tv_resolution: 20,
        candidates: 10,
        posterior_samples: 50,
        ..Default::default()
    }
}

fn run(cfg: &ExperimentConfig, seed: u64) -> gpabc_harness::ExperimentResult {
    let sim = cfg.build_simulator().unwrap();
    run_inference(cfg, sim.as_ref(), &ReferenceCache::new(), seed).unwrap()
}

#[test]
fn loop_shape_and_ranges() {
    for rule in Rule::ALL {
        let cfg = small(rule);
        let r = run(&cfg, 3);
        assert_eq!(r.records.len(), cfg.t_max - cfg.t0 + 1, "{rule}");
        assert_eq!(r.records.first().unwrap().iter, cfg.t0);
        assert_eq!(r.records.last().unwrap().iter, cfg.t_max);
        let bounds = Bounds::new(vec![-2.0, -1.0], vec![3.0, 6.0]).unwrap();
        for rec in &r.records {
            assert!(bounds.contains(&rec.theta), "{rule}: {:?}", rec.theta);
            let tv = rec.tv.unwrap();
            assert!((0.0..=1.0).contains(&tv));
            assert_eq!(rec.epsilon, 2.0);
            assert!(rec.wall_ms.is_none());
        }
        assert_eq!(r.posterior_samples.len(), 50);
        assert!(r.posterior_samples.iter().all(|x| bounds.contains(x)));
        assert_eq!(r.numerical_failures, 0, "{rule}: {:?}", r.failure_log);
        let tvs: Vec<f64> = r.records.iter().map(|x| x.tv.unwrap()).collect();
        assert_eq!(r.auc_tv.unwrap(), auc_trapezoid(&tvs));
    }
}

#[test]
fn same_seed_same_trace() {
    for rule in [Rule::Expintvar, Rule::RandMaxvar, Rule::Lcb] {
        let cfg = small(rule);
        assert_eq!(trace_csv(&run(&cfg, 7)), trace_csv(&run(&cfg, 7)));
        assert_ne!(trace_csv(&run(&cfg, 7)), trace_csv(&run(&cfg, 8)));
    }
}

#[test]
fn result_json_round_trip() {
    let mut cfg = small(Rule::Expintvar);
    cfg.record_wall_time = true;
    let r = run(&cfg, 1);
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), &r).unwrap();
    assert_eq!(read_result(&dir.path().join("result.json")).unwrap(), r);
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.starts_with("iter,theta_1,theta_2,delta,epsilon,tv,wall_ms\n"));
    assert_eq!(trace.lines().count(), 1 + r.records.len());
}

#[test]
fn quantile_threshold_tracks_the_data() {
    let mut cfg = small(Rule::Maxvar);
    cfg.threshold = ThresholdKind::Quantile;
    cfg.quantile = 0.05;
    let r = run(&cfg, 2);
    assert_eq!(r.initial_design.len(), cfg.t0 - 1);
    let mut seen: Vec<f64> = r.initial_design.iter().map(|d| d.1).collect();
    for rec in &r.records {
        seen.push(rec.delta);
        assert_eq!(rec.epsilon, empirical_quantile(&seen, 0.05));
    }
}

/// Fails whenever θ₁ > 2.
struct Flaky {
    prior: Prior,
}

impl Simulator for Flaky {
    fn name(&self) -> &str {
        "flaky"
    }
    fn prior(&self) -> &Prior {
        &self.prior
    }
    fn draw(&self, theta: &[f64], rng: &mut ChaCha8Rng) -> Result<f64, SimError> {
        if theta[0] > 2.0 {
            return Err(SimError::BlowUp("right edge".into()));
        }
        let z: f64 = StandardNormal.sample(rng);
        Ok(theta[0] * theta[0] + theta[1] * theta[1] + 0.1 * z)
    }
    fn reference(&self, _eps: f64, _resolution: usize) -> Option<Reference> {
        None
    }
}

#[test]
fn simulator_failures_are_retried_and_logged() {
    let sim = Flaky { prior: Prior::uniform(Bounds::cube(2, -3.0, 3.0)) };
    let cfg = ExperimentConfig { rule: Rule::Unif, t0: 5, t_max: 40, epsilon: 0.5, posterior_samples: 0, ..Default::default() };
    let r = run_inference(&cfg, &sim, &ReferenceCache::new(), 4).unwrap();
    assert_eq!(r.records.len(), 36);
    assert!(r.simulator_failures > 0);
    assert_eq!(r.failure_log.len(), r.simulator_failures);
    assert!(r.records.iter().all(|x| x.theta[0] <= 2.0 && x.tv.is_none()));
    assert!(r.auc_tv.is_none());
}

#[test]
fn benchmark_table_is_self_normalised_and_deterministic() {
    let base = ExperimentConfig { reps: 2, seed: 10, ..small(Rule::Expintvar) };
    let cfg = BenchmarkConfig {
        base,
        problems: vec!["unimodal".into(), "bimodal".into()],
        rules: vec![Rule::Expintvar, Rule::Unif],
    };
    let a = run_benchmark(&cfg, Some(2)).unwrap();
    let b = run_benchmark(&cfg, Some(1)).unwrap();
    assert_eq!(a, b);
    for p in ["unimodal", "bimodal"] {
        assert_eq!(a.row(p, Rule::Expintvar).unwrap().ratio_vs_expintvar, Some(1.0));
    }
    for s in &a.runs {
        let tv: Vec<f64> = s.tv.iter().map(|x| x.unwrap()).collect();
        assert_eq!(s.auc.unwrap(), auc_trapezoid(&tv));
        assert_eq!(s.seed, 10 + s.rep as u64);
    }
}
