//! Flat experiment configuration and construction of the simulator it names.

use std::path::Path;

use gpabc_core::acquisition::{AcqSpec, Rule};
use gpabc_core::samplers::McmcConfig;
use gpabc_core::Bounds;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::simulators::{External, GaussianModel, LotkaVolterra, LvSetup, Simulator, Synthetic, SyntheticKind};
use crate::threshold::ThresholdPolicy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdKind {
    Fixed,
    Quantile,
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperMode {
    Map,
    Ccd,
    Mc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Uniform,
    Gaussian,
}

/// One inference run. Every key of the TOML file is a field name here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// unimodal, bimodal, unidentifiable, banana, gaussian, lotka_volterra or external
    pub simulator: String,
    pub bounds_lo: Option<Vec<f64>>,
    pub bounds_hi: Option<Vec<f64>>,
    pub prior: PriorKind,
    pub prior_mean: Option<Vec<f64>>,
    pub prior_sd: Option<f64>,

    /// Noise sd of the synthetic discrepancies.
    pub sigma: f64,
    /// Gaussian model: dimension, sample size, off-diagonal of Σ, true mean.
    pub dim: usize,
    pub n_obs: usize,
    pub corr: f64,
    pub theta_true: Option<Vec<f64>>,
    pub lv_init: [f64; 2],
    pub lv_horizon: f64,
    pub lv_n_obs: usize,
    pub lv_noise_sd: f64,
    pub lv_sim_noise_sd: f64,
    pub lv_step: f64,
    pub external_command: Option<String>,
    /// Seed of the observed data set; shared by all repetitions.
    pub data_seed: u64,

    pub rule: Rule,
    pub t0: usize,
    pub t_max: usize,
    pub threshold: ThresholdKind,
    pub epsilon: f64,
    pub quantile: f64,
    pub threshold_var: f64,

    pub hyper_mode: HyperMode,
    pub mc_samples: usize,
    pub ccd_f0: f64,
    /// Iterations between full hyperparameter refits; in between the GP is
    /// updated with the previous hyperparameters.
    pub map_interval: usize,
    pub map_restarts: usize,
    pub map_refit_restarts: usize,
    /// L-BFGS iteration cap for warm-started refits.
    pub map_refit_iter: usize,

    pub restarts: usize,
    pub candidates: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub lcb_delta: f64,
    pub grid_resolution: usize,
    pub is_samples: usize,
    pub prune_tol: f64,
    pub mcmc_chains: usize,
    pub mcmc_steps: usize,
    pub mcmc_burn_in: f64,

    pub tv_resolution: usize,
    pub posterior_samples: usize,
    pub max_reacquire: usize,
    pub record_wall_time: bool,

    pub reps: usize,
    pub seed: u64,
    pub out: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            simulator: "unimodal".into(),
            bounds_lo: None,
            bounds_hi: None,
            prior: PriorKind::Uniform,
            prior_mean: None,
            prior_sd: None,
            sigma: 2.0,
            dim: 2,
            n_obs: 5,
            corr: 0.5,
            theta_true: None,
            lv_init: [1.0, 0.5],
            lv_horizon: 15.0,
            lv_n_obs: 8,
            lv_noise_sd: 0.5,
            lv_sim_noise_sd: 0.5,
            lv_step: 0.01,
            external_command: None,
            data_seed: 1,
            rule: Rule::Expintvar,
            t0: 10,
            t_max: 100,
            threshold: ThresholdKind::Fixed,
            epsilon: 2.0,
            quantile: 0.01,
            threshold_var: 1.0,
            hyper_mode: HyperMode::Map,
            mc_samples: 20,
            ccd_f0: 1.1,
            map_interval: 10,
            map_restarts: 10,
            map_refit_restarts: 0,
            map_refit_iter: 30,
            restarts: 2,
            candidates: 30,
            max_iter: 20,
            grad_tol: 1e-9,
            lcb_delta: 0.1,
            grid_resolution: 50,
            is_samples: 500,
            prune_tol: 1e-4,
            mcmc_chains: 4,
            mcmc_steps: 2500,
            mcmc_burn_in: 0.5,
            tv_resolution: 50,
            posterior_samples: 1000,
            max_reacquire: 3,
            record_wall_time: false,
            reps: 1,
            seed: 0,
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.t0 < 2 {
            return bad(format!("t0 must be at least 2, got {}", self.t0));
        }
        if self.t_max <= self.t0 {
            return bad(format!("t_max ({}) must exceed t0 ({})", self.t_max, self.t0));
        }
        if self.reps == 0 {
            return bad("reps must be at least 1".into());
        }
        if self.map_interval == 0 || self.grid_resolution == 0 || self.tv_resolution == 0 {
            return bad("map_interval, grid_resolution and tv_resolution must be positive".into());
        }
        if self.bounds_lo.is_some() != self.bounds_hi.is_some() {
            return bad("bounds_lo and bounds_hi go together".into());
        }
        if self.prior == PriorKind::Gaussian && !(self.prior_sd.is_some_and(|b| b > 0.0) && self.prior_mean.is_some()) {
            return bad("a gaussian prior needs prior_mean and prior_sd > 0".into());
        }
        if self.hyper_mode == HyperMode::Mc && self.mc_samples == 0 {
            return bad("mc_samples must be positive".into());
        }
        self.threshold_policy().validate()?;
        self.acq_spec().validate()?;
        Ok(())
    }

    pub fn threshold_policy(&self) -> ThresholdPolicy {
        match self.threshold {
            ThresholdKind::Fixed => ThresholdPolicy::Fixed { eps: self.epsilon },
            ThresholdKind::Quantile => ThresholdPolicy::Quantile { q: self.quantile },
            ThresholdKind::Gaussian => ThresholdPolicy::Gaussian { mean: self.epsilon, var: self.threshold_var },
        }
    }

    pub fn mcmc(&self) -> McmcConfig {
        McmcConfig { chains: self.mcmc_chains, steps: self.mcmc_steps, burn_in: self.mcmc_burn_in, ..Default::default() }
    }

    pub fn acq_spec(&self) -> AcqSpec {
        AcqSpec {
            rule: self.rule,
            is_samples: self.is_samples,
            restarts: self.restarts,
            candidates: self.candidates,
            max_iter: self.max_iter,
            grad_tol: self.grad_tol,
            lcb_delta: self.lcb_delta,
            grid_resolution: self.grid_resolution,
            prune_tol: self.prune_tol,
            mcmc: self.mcmc(),
        }
    }

    pub fn bounds(&self) -> Result<Option<Bounds>> {
        match (&self.bounds_lo, &self.bounds_hi) {
            (Some(lo), Some(hi)) => Ok(Some(Bounds::new(lo.clone(), hi.clone())?)),
            _ => Ok(None),
        }
    }

    pub fn lv_setup(&self) -> LvSetup {
        LvSetup {
            init: self.lv_init,
            horizon: self.lv_horizon,
            n_obs: self.lv_n_obs,
            noise_sd: self.lv_noise_sd,
            sim_noise_sd: self.lv_sim_noise_sd,
            step: self.lv_step,
            theta_true: match &self.theta_true {
                Some(t) if t.len() == 2 => [t[0], t[1]],
                _ => LvSetup::default().theta_true,
            },
        }
    }

    /// The simulator, with observed data drawn from `data_seed`.
    pub fn build_simulator(&self) -> Result<Box<dyn Simulator>> {
        let bounds = self.bounds()?;
        let mut rng = gpabc_core::rng::stream(self.data_seed, &[0xda7a]);
        let name = self.simulator.as_str();
        if let Some(kind) = SyntheticKind::ALL.iter().find(|k| k.name() == name) {
            return Ok(Box::new(Synthetic::new(*kind, self.sigma, bounds)?));
        }
        match name {
            "gaussian" => {
                let p = self.dim;
                let bounds = bounds.unwrap_or_else(|| Bounds::cube(p, 0.0, 8.0));
                let theta = self.theta_true.clone().unwrap_or_else(|| vec![2.0; p]);
                let sd = match self.prior {
                    PriorKind::Gaussian => self.prior_sd,
                    PriorKind::Uniform => None,
                };
                Ok(Box::new(GaussianModel::new(
                    self.n_obs,
                    GaussianModel::equicorrelated(p, self.corr),
                    bounds,
                    self.prior_mean.clone(),
                    sd,
                    &theta,
                    &mut rng,
                )?))
            }
            "lotka_volterra" => Ok(Box::new(LotkaVolterra::new(self.lv_setup(), bounds, &mut rng)?)),
            "external" => {
                let cmd = self
                    .external_command
                    .as_deref()
                    .ok_or_else(|| HarnessError::Config("external simulator needs external_command".into()))?;
                let bounds =
                    bounds.ok_or_else(|| HarnessError::Config("external simulator needs bounds_lo/bounds_hi".into()))?;
                Ok(Box::new(External::new(cmd, bounds)?))
            }
            other => Err(HarnessError::Config(format!("unknown simulator '{other}'"))),
        }
    }
}

/// A benchmark matrix: the experiment keys plus `problems` and `rules` lists.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkConfig {
    pub base: ExperimentConfig,
    pub problems: Vec<String>,
    pub rules: Vec<Rule>,
}

impl BenchmarkConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let mut table: toml::Table = s.parse().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        let problems: Vec<String> = match table.remove("problems") {
            Some(v) => v.try_into().map_err(|e: toml::de::Error| HarnessError::Config(format!("problems: {e}")))?,
            None => Vec::new(),
        };
        let rules: Vec<Rule> = match table.remove("rules") {
            Some(v) => v.try_into().map_err(|e: toml::de::Error| HarnessError::Config(format!("rules: {e}")))?,
            None => Rule::ALL.to_vec(),
        };
        let base: ExperimentConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        let problems = if problems.is_empty() { vec![base.simulator.clone()] } else { problems };
        let out = Self { base, problems, rules };
        out.validate()?;
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rules.is_empty() {
            return Err(HarnessError::Config("benchmark needs at least one rule".into()));
        }
        for p in &self.problems {
            self.cell(p, self.rules[0]).validate()?;
        }
        Ok(())
    }

    pub fn cell(&self, problem: &str, rule: Rule) -> ExperimentConfig {
        ExperimentConfig { simulator: problem.to_string(), rule, ..self.base.clone() }
    }
}
