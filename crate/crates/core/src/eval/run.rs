//! Run configuration, multi-controller comparison and result export.
//!
//! Every controller sees the same initial states and the same per-episode
//! seeds. Episodes run in parallel; results are gathered in episode order.
//!
//! Output files:
//! - `episodes.csv`: controller, episode, status, steps, total_cost,
//!   mean_abs_cte, median_abs_cte, max_abs_cte, violations,
//!   final_accumulation, tvh. Byte-identical across runs with equal seeds.
//! - `timing.csv`: controller, episode, mean_latency_ms, median_latency_ms.
//! - `traces.csv`: controller, episode, step, var (`x`, `u` or `cost`), index, value.
//! - `summary.json`: config hash, seed, per-controller aggregates and ordering checks.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::registry::{build_benchmark, EnvConfig, DOUBLE_INTEGRATOR};
use crate::env::{Benchmark, EpisodeStatus, InitDistribution};
use crate::error::{Error, Result};
use crate::eval::closed_loop::{compute_metrics, median, run_closed_loop, ClosedLoopResult, MetricSummary};
use crate::eval::controllers::{
    ConstantController, Controller, DpcController, LqrController, MppiClosedLoop, StepMppiController,
};
use crate::mppi::MppiConfig;
use crate::numerics::RngStream;
use crate::policy::{checkpoint_load, Checkpoint};
use crate::scalar::Scalar;
use crate::training::{config_hash, TrainConfig};

const MAX_INIT_TRIES: usize = 1000;

fn default_step_samples() -> usize {
    64
}

fn default_lambda() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ControllerSpec {
    /// Constant input; defaults to the cost's reference input (all gates open for traffic).
    Baseline {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        value: Option<Vec<f64>>,
    },
    /// Finite-horizon Riccati oracle for linear-quadratic tasks.
    Lqr {
        #[serde(default)]
        name: Option<String>,
    },
    Mppi {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        mppi: MppiConfig,
    },
    Dpc {
        #[serde(default)]
        name: Option<String>,
        checkpoint: PathBuf,
    },
    StepMppi {
        #[serde(default)]
        name: Option<String>,
        checkpoint: PathBuf,
        #[serde(default = "default_step_samples")]
        samples: usize,
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
}

impl ControllerSpec {
    pub fn label(&self) -> String {
        let (name, kind) = match self {
            ControllerSpec::Baseline { name, .. } => (name, "baseline"),
            ControllerSpec::Lqr { name } => (name, "lqr"),
            ControllerSpec::Mppi { name, .. } => (name, "mppi"),
            ControllerSpec::Dpc { name, .. } => (name, "dpc"),
            ControllerSpec::StepMppi { name, .. } => (name, "step-mppi"),
        };
        name.clone().unwrap_or_else(|| kind.to_string())
    }

    /// Spec with default settings for a bare controller kind.
    pub fn from_kind(kind: &str, checkpoint: Option<PathBuf>) -> Result<Self> {
        let need = |c: Option<PathBuf>| c.ok_or_else(|| Error::Config(format!("controller `{kind}` needs a checkpoint")));
        Ok(match kind {
            "baseline" => ControllerSpec::Baseline { name: None, value: None },
            "lqr" => ControllerSpec::Lqr { name: None },
            "mppi" => ControllerSpec::Mppi {
                name: None,
                mppi: MppiConfig::default(),
            },
            "dpc" => ControllerSpec::Dpc {
                name: None,
                checkpoint: need(checkpoint)?,
            },
            "step-mppi" => ControllerSpec::StepMppi {
                name: None,
                checkpoint: need(checkpoint)?,
                samples: default_step_samples(),
                lambda: default_lambda(),
            },
            other => {
                return Err(Error::NotFound {
                    kind: "controller",
                    name: other.into(),
                    available: ["baseline", "lqr", "mppi", "dpc", "step-mppi"].map(String::from).to_vec(),
                })
            }
        })
    }
}

/// `mean(left.metric) < factor · mean(right.metric)`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingAssertion {
    pub left: String,
    pub metric: String,
    pub right: String,
    #[serde(default = "default_factor")]
    pub factor: f64,
}

fn default_factor() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub env: String,
    pub env_config: EnvConfig,
    pub seed: u64,
    pub episodes: usize,
    /// Overrides the environment's default episode length.
    pub episode_len: Option<usize>,
    pub distribution: InitDistribution,
    pub controllers: Vec<ControllerSpec>,
    pub assertions: Vec<OrderingAssertion>,
    pub out_dir: PathBuf,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: DOUBLE_INTEGRATOR.into(),
            env_config: EnvConfig::default(),
            seed: 0,
            episodes: 20,
            episode_len: None,
            distribution: InitDistribution::InDistribution,
            controllers: Vec::new(),
            assertions: Vec::new(),
            out_dir: PathBuf::from("out"),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn benchmark<T: Scalar>(&self) -> Result<Benchmark<T>> {
        build_benchmark(&self.env, &self.env_config)
    }

    pub fn episode_len<T: Scalar>(&self, bench: &Benchmark<T>) -> usize {
        self.episode_len.unwrap_or_else(|| bench.task.episode_len())
    }
}

/// A controller spec with its checkpoint loaded and validated.
#[derive(Clone)]
pub struct ResolvedController<T: Scalar> {
    pub label: String,
    spec: ControllerSpec,
    checkpoint: Option<Arc<Checkpoint<T>>>,
}

impl<T: Scalar> ResolvedController<T> {
    pub fn resolve(spec: &ControllerSpec, bench: &Benchmark<T>) -> Result<Self> {
        let checkpoint = match spec {
            ControllerSpec::Dpc { checkpoint, .. } | ControllerSpec::StepMppi { checkpoint, .. } => {
                if !checkpoint.exists() {
                    return Err(Error::Config(format!("checkpoint {} does not exist", checkpoint.display())));
                }
                Some(Arc::new(checkpoint_load::<T>(checkpoint)?))
            }
            _ => None,
        };
        let r = Self {
            label: spec.label(),
            spec: spec.clone(),
            checkpoint,
        };
        // Surface dimension mismatches before any episode runs.
        r.instantiate(bench, 1)?;
        Ok(r)
    }

    /// In-memory policy, bypassing the file system.
    pub fn from_checkpoint(spec: &ControllerSpec, ckpt: Arc<Checkpoint<T>>, bench: &Benchmark<T>) -> Result<Self> {
        let r = Self {
            label: spec.label(),
            spec: spec.clone(),
            checkpoint: Some(ckpt),
        };
        r.instantiate(bench, 1)?;
        Ok(r)
    }

    pub fn spec(&self) -> &ControllerSpec {
        &self.spec
    }

    pub fn instantiate(&self, bench: &Benchmark<T>, episode_len: usize) -> Result<Box<dyn Controller<T>>> {
        let ckpt = || self.checkpoint.clone().ok_or_else(|| Error::invalid("policy controller without checkpoint"));
        Ok(match &self.spec {
            ControllerSpec::Baseline { value, .. } => {
                let nu = bench.model.input_dim();
                let u: Vec<T> = match value {
                    Some(v) if v.len() == nu => v.iter().map(|&a| T::of(a)).collect(),
                    Some(_) => return Err(Error::Config(format!("baseline value needs {nu} entries"))),
                    None => {
                        let x0 = vec![T::zero(); bench.model.state_dim()];
                        bench.task.horizon(&x0, 0, 1).contexts[0].u_ref.clone()
                    }
                };
                Box::new(ConstantController::new(self.label.clone(), u))
            }
            ControllerSpec::Lqr { .. } => Box::new(LqrController::new(bench, episode_len)?),
            ControllerSpec::Mppi { mppi, .. } => Box::new(MppiClosedLoop::new(self.label.clone(), mppi.clone(), bench)?),
            ControllerSpec::Dpc { .. } => Box::new(DpcController::new(bench, ckpt()?)?),
            ControllerSpec::StepMppi { samples, lambda, .. } => {
                Box::new(StepMppiController::new(bench, ckpt()?, *samples, *lambda)?)
            }
        })
    }
}

/// Shared initial states for `episodes` episodes.
pub fn initial_states<T: Scalar>(bench: &Benchmark<T>, seed: u64, dist: InitDistribution, episodes: usize) -> Result<Vec<Vec<T>>> {
    let stream = RngStream::new(seed, format!("episodes/{}/{dist:?}", bench.name));
    (0..episodes)
        .map(|i| {
            let mut rng = stream.rng(i as u64);
            for _ in 0..MAX_INIT_TRIES {
                let x = bench.task.sample_initial(&mut rng, dist);
                if bench.task.admissible(&x) {
                    return Ok(x);
                }
            }
            Err(Error::invalid(format!("episode {i}: no admissible initial state")))
        })
        .collect()
}

pub fn episode_seed(seed: u64, episode: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(episode as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and sample standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }

    fn of_opt(values: impl Iterator<Item = Option<f64>>) -> Option<Self> {
        let v: Option<Vec<f64>> = values.collect();
        v.filter(|v| !v.is_empty()).map(|v| Self::of(&v))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub controller: String,
    pub episodes: usize,
    pub success_rate: f64,
    pub failures: usize,
    pub timeouts: usize,
    pub total_cost: Stat,
    pub mean_abs_cte: Option<Stat>,
    pub max_abs_cte: Option<Stat>,
    pub violations: usize,
    pub mean_latency_ms: Stat,
    /// Median over every step of every episode.
    pub median_latency_ms: f64,
    pub final_accumulation: Option<Stat>,
    pub tvh: Option<Stat>,
}

impl Aggregate {
    pub fn from_episodes<T>(label: &str, metrics: &[MetricSummary], runs: &[ClosedLoopResult<T>]) -> Self {
        let count = |s: EpisodeStatus| metrics.iter().filter(|m| m.status == s).count();
        let all_lat: Vec<f64> = runs.iter().flat_map(|r| r.latencies.iter().map(|l| l * 1e3)).collect();
        Self {
            controller: label.to_string(),
            episodes: metrics.len(),
            success_rate: count(EpisodeStatus::Success) as f64 / metrics.len().max(1) as f64,
            failures: count(EpisodeStatus::Failure),
            timeouts: count(EpisodeStatus::Timeout),
            total_cost: Stat::of(&metrics.iter().map(|m| m.total_cost).collect::<Vec<_>>()),
            mean_abs_cte: Stat::of_opt(metrics.iter().map(|m| m.mean_abs_cte)),
            max_abs_cte: Stat::of_opt(metrics.iter().map(|m| m.max_abs_cte)),
            violations: metrics.iter().map(|m| m.violations).sum(),
            mean_latency_ms: Stat::of(&metrics.iter().map(|m| m.mean_latency_ms).collect::<Vec<_>>()),
            median_latency_ms: median(&all_lat),
            final_accumulation: Stat::of_opt(metrics.iter().map(|m| m.final_accumulation)),
            tvh: Stat::of_opt(metrics.iter().map(|m| m.tvh)),
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "total_cost" => Some(self.total_cost.mean),
            "mean_abs_cte" => self.mean_abs_cte.map(|s| s.mean),
            "max_abs_cte" => self.max_abs_cte.map(|s| s.mean),
            "violations" => Some(self.violations as f64),
            "mean_latency_ms" => Some(self.mean_latency_ms.mean),
            "final_accumulation" => self.final_accumulation.map(|s| s.mean),
            "tvh" => self.tvh.map(|s| s.mean),
            "success_rate" => Some(self.success_rate),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssertionOutcome {
    pub assertion: String,
    pub left: f64,
    pub right: f64,
    pub passed: bool,
}

pub struct ControllerRuns<T> {
    pub label: String,
    pub runs: Vec<ClosedLoopResult<T>>,
    pub metrics: Vec<MetricSummary>,
    pub aggregate: Aggregate,
}

pub struct Comparison<T> {
    pub controllers: Vec<ControllerRuns<T>>,
    pub assertions: Vec<AssertionOutcome>,
    pub config_hash: String,
    pub seed: u64,
}

impl<T> Comparison<T> {
    pub fn aggregate(&self, label: &str) -> Option<&Aggregate> {
        self.controllers.iter().find(|c| c.label == label).map(|c| &c.aggregate)
    }

    pub fn all_passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }
}

/// Runs every controller for `episodes` episodes from shared initial states.
pub fn run_episodes<T: Scalar>(
    bench: &Benchmark<T>,
    controller: &ResolvedController<T>,
    x0s: &[Vec<T>],
    steps: usize,
    seed: u64,
) -> Result<Vec<ClosedLoopResult<T>>> {
    x0s.par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let mut c = controller.instantiate(bench, steps)?;
            c.reset(episode_seed(seed, i));
            let mut r = run_closed_loop(bench, c.as_mut(), x0, steps)?;
            r.controller = controller.label.clone();
            Ok(r)
        })
        .collect()
}

pub fn compare<T: Scalar>(bench: &Benchmark<T>, cfg: &RunConfig, controllers: &[ResolvedController<T>]) -> Result<Comparison<T>> {
    if cfg.episodes == 0 {
        return Err(Error::Config("episodes must be positive".into()));
    }
    let x0s = initial_states(bench, cfg.seed, cfg.distribution, cfg.episodes)?;
    let steps = cfg.episode_len(bench);
    let mut out = Vec::with_capacity(controllers.len());
    for c in controllers {
        let runs = run_episodes(bench, c, &x0s, steps, cfg.seed)?;
        let metrics: Vec<MetricSummary> = runs.iter().map(|r| compute_metrics(r, bench)).collect();
        let aggregate = Aggregate::from_episodes(&c.label, &metrics, &runs);
        out.push(ControllerRuns {
            label: c.label.clone(),
            runs,
            metrics,
            aggregate,
        });
    }
    let mut cmp = Comparison {
        controllers: out,
        assertions: Vec::new(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
    };
    for a in &cfg.assertions {
        let get = |label: &str| {
            cmp.aggregate(label)
                .ok_or_else(|| Error::Config(format!("assertion refers to unknown controller `{label}`")))?
                .metric(&a.metric)
                .ok_or_else(|| Error::Config(format!("metric `{}` is not available for `{label}`", a.metric)))
        };
        let (l, r) = (get(&a.left)?, get(&a.right)?);
        cmp.assertions.push(AssertionOutcome {
            assertion: format!("{}.{} < {} × {}.{}", a.left, a.metric, a.factor, a.right, a.metric),
            left: l,
            right: r,
            passed: l < a.factor * r,
        });
    }
    Ok(cmp)
}

#[derive(Serialize)]
struct EpisodeRow<'a> {
    controller: &'a str,
    episode: usize,
    status: EpisodeStatus,
    steps: usize,
    total_cost: f64,
    mean_abs_cte: Option<f64>,
    median_abs_cte: Option<f64>,
    max_abs_cte: Option<f64>,
    violations: usize,
    final_accumulation: Option<f64>,
    tvh: Option<f64>,
}

#[derive(Serialize)]
struct TimingRow<'a> {
    controller: &'a str,
    episode: usize,
    mean_latency_ms: f64,
    median_latency_ms: f64,
}

#[derive(Serialize)]
struct TraceRow<'a> {
    controller: &'a str,
    episode: usize,
    step: usize,
    var: &'static str,
    index: usize,
    value: f64,
}

#[derive(Serialize)]
struct Summary<'a> {
    config_hash: &'a str,
    seed: u64,
    aggregates: Vec<&'a Aggregate>,
    assertions: &'a [AssertionOutcome],
}

/// Deterministic per-episode metrics.
pub fn write_episodes_csv<T>(cmp: &Comparison<T>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for c in &cmp.controllers {
        for (i, m) in c.metrics.iter().enumerate() {
            w.serialize(EpisodeRow {
                controller: &c.label,
                episode: i,
                status: m.status,
                steps: m.steps,
                total_cost: m.total_cost,
                mean_abs_cte: m.mean_abs_cte,
                median_abs_cte: m.median_abs_cte,
                max_abs_cte: m.max_abs_cte,
                violations: m.violations,
                final_accumulation: m.final_accumulation,
                tvh: m.tvh,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_timing_csv<T>(cmp: &Comparison<T>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for c in &cmp.controllers {
        for (i, m) in c.metrics.iter().enumerate() {
            w.serialize(TimingRow {
                controller: &c.label,
                episode: i,
                mean_latency_ms: m.mean_latency_ms,
                median_latency_ms: m.median_latency_ms,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Long-format state, control and cost traces.
pub fn write_traces_csv<T: Scalar>(cmp: &Comparison<T>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for c in &cmp.controllers {
        for (e, r) in c.runs.iter().enumerate() {
            let mut row = |step, var, index, value: T| {
                w.serialize(TraceRow {
                    controller: &c.label,
                    episode: e,
                    step,
                    var,
                    index,
                    value: value.as_f64(),
                })
            };
            for (t, x) in r.states.iter().enumerate() {
                for (i, &v) in x.iter().enumerate() {
                    row(t, "x", i, v)?;
                }
            }
            for (t, u) in r.controls.iter().enumerate() {
                for (i, &v) in u.iter().enumerate() {
                    row(t, "u", i, v)?;
                }
                row(t, "cost", 0, r.costs[t])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_json<T>(cmp: &Comparison<T>, path: &Path) -> Result<()> {
    let s = Summary {
        config_hash: &cmp.config_hash,
        seed: cmp.seed,
        aggregates: cmp.controllers.iter().map(|c| &c.aggregate).collect(),
        assertions: &cmp.assertions,
    };
    let text = serde_json::to_string_pretty(&s).map_err(|e| Error::invalid(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Writes `episodes.csv`, `timing.csv`, `summary.json` and, when asked, `traces.csv` into `dir`.
pub fn export<T: Scalar>(cmp: &Comparison<T>, dir: &Path, traces: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_episodes_csv(cmp, &dir.join("episodes.csv"))?;
    write_timing_csv(cmp, &dir.join("timing.csv"))?;
    write_summary_json(cmp, &dir.join("summary.json"))?;
    if traces {
        write_traces_csv(cmp, &dir.join("traces.csv"))?;
    }
    Ok(())
}
