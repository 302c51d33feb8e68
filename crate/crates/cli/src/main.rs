//! `stepmppi` command-line front end.
//!
//! Exit codes: 0 on success, 1 on errors, 2 when an ordering assertion or a
//! gradient check fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use stepmppi::env::InitDistribution;
use stepmppi::eval::{compare, export, gradcheck, ControllerSpec, GradcheckScope, ResolvedController, RunConfig};
use stepmppi::policy::checkpoint_save;
use stepmppi::training::{generate_dataset, train, Dataset, Method};
use stepmppi::Scalar;

/// Overrides the rayon worker count.
const WORKERS_ENV: &str = "STEPMPPI_WORKERS";

#[derive(Parser)]
#[command(name = "stepmppi", version, about = "Train, evaluate and compare sampling-based MPC controllers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    env: Option<String>,
    /// Draw initial states from the out-of-distribution sampler.
    #[arg(long)]
    ood: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a training dataset and write it as JSON.
    Dataset {
        #[command(flatten)]
        common: Common,
        /// Number of instances; defaults to the training config's dataset_size.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train a Step-MPPI or DPC policy.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["step-mppi", "dpc"])]
        method: Option<String>,
        /// Existing dataset JSON; sampled from the config otherwise.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run closed-loop episodes and export metrics and traces.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Single controller kind replacing the configured list.
        #[arg(long)]
        controller: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
    },
    /// Run every configured controller on shared episodes and check orderings.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
    },
    /// Finite-difference checks of the analytic derivatives.
    Gradcheck {
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        /// Relative-error tolerance; defaults to 1e-5 (1e-4 for rollouts).
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(env) = &common.env {
        cfg.env = env.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if common.ood {
        cfg.distribution = InitDistribution::OutOfDistribution;
    }
    Ok(cfg)
}

fn cmd_dataset(common: &Common, size: Option<usize>) -> Result<()> {
    let cfg = load_config(common)?;
    let bench = cfg.benchmark::<f64>()?;
    let m = size.unwrap_or(cfg.train.dataset_size);
    let data = generate_dataset(&bench, m, cfg.train.horizon, cfg.distribution, cfg.train.seed)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("dataset.json");
    data.save(&path)?;
    println!("wrote {m} instances to {}", path.display());
    Ok(())
}

fn cmd_train(common: &Common, method: Option<&str>, dataset: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(m) = method {
        cfg.train.method = if m == "dpc" { Method::Dpc } else { Method::StepMppi };
    }
    let bench = cfg.benchmark::<f64>()?;
    let data = match dataset {
        Some(p) => Dataset::<f64>::load(p)?,
        None => generate_dataset(&bench, cfg.train.dataset_size, cfg.train.horizon, cfg.distribution, cfg.train.seed)?,
    };
    if data.env != bench.name {
        bail!("dataset was sampled for `{}`, not `{}`", data.env, bench.name);
    }
    let (mut ckpt, report) = train(&bench, &cfg.train, &data)?;
    ckpt.config_hash = cfg.hash();
    std::fs::create_dir_all(&cfg.out_dir)?;
    let name = cfg.train.method.as_str();
    let ckpt_path = cfg.out_dir.join(format!("{name}.ckpt"));
    checkpoint_save(&ckpt, &ckpt_path)?;
    report.write_csv(&cfg.out_dir.join(format!("{name}_train.csv")))?;
    if let Some(last) = report.epochs.last() {
        println!(
            "epoch {}: loss {:.6} cost {:.6} entropy {:.4} skipped {}",
            last.epoch, last.mean_loss, last.mean_cost, last.mean_entropy, last.skipped
        );
    }
    println!("checkpoint {} sha256 {}", ckpt_path.display(), ckpt.digest()?);
    Ok(())
}

fn run_comparison<T: Scalar>(cfg: &RunConfig, traces: bool) -> Result<bool> {
    let bench = cfg.benchmark::<T>()?;
    if cfg.controllers.is_empty() {
        bail!("no controllers configured");
    }
    let controllers = cfg
        .controllers
        .iter()
        .map(|s| ResolvedController::resolve(s, &bench).with_context(|| format!("controller `{}`", s.label())))
        .collect::<Result<Vec<_>>>()?;
    let cmp = compare(&bench, cfg, &controllers)?;
    export(&cmp, &cfg.out_dir, traces)?;
    for c in &cmp.controllers {
        let a = &c.aggregate;
        print!(
            "{:<12} success {:>5.1}%  cost {:.4} ± {:.4}  latency {:.3} ms",
            a.controller,
            100.0 * a.success_rate,
            a.total_cost.mean,
            a.total_cost.std,
            a.mean_latency_ms.mean
        );
        if let Some(f) = a.final_accumulation {
            print!("  final accumulation {:.1} ± {:.1}", f.mean, f.std);
        }
        if let Some(e) = a.mean_abs_cte {
            print!("  |cte| {:.4}", e.mean);
        }
        println!();
    }
    for a in &cmp.assertions {
        println!("{} {} ({} vs {})", if a.passed { "PASS" } else { "FAIL" }, a.assertion, a.left, a.right);
    }
    println!("results in {}", cfg.out_dir.display());
    Ok(cmp.all_passed())
}

fn dispatch(cfg: &RunConfig, precision: Precision, traces: bool) -> Result<bool> {
    match precision {
        Precision::F32 => run_comparison::<f32>(cfg, traces),
        Precision::F64 => run_comparison::<f64>(cfg, traces),
    }
}

fn cmd_gradcheck(scope: &str, trials: usize, tol: Option<f64>, seed: u64) -> Result<bool> {
    let scopes = if scope == "all" {
        vec![GradcheckScope::Layer, GradcheckScope::Policy, GradcheckScope::Rollout]
    } else {
        vec![scope.parse()?]
    };
    let mut ok = true;
    for s in scopes {
        let t = tol.unwrap_or(if s == GradcheckScope::Rollout { 1e-4 } else { 1e-5 });
        let r = gradcheck(s, trials, t, seed)?;
        for (i, e) in r.errors.iter().enumerate() {
            println!("{s} trial {i}: max rel err {e:.3e}");
        }
        println!("{} {s}: worst {:.3e} (tol {t:.0e})", if r.passed { "PASS" } else { "FAIL" }, r.max_error());
        ok &= r.passed;
    }
    Ok(ok)
}

fn configure_workers() -> Result<()> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{WORKERS_ENV}={v} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    configure_workers()?;
    match cli.command {
        Command::Dataset { common, size } => cmd_dataset(&common, size).map(|_| true),
        Command::Train { common, method, dataset } => cmd_train(&common, method.as_deref(), dataset.as_deref()).map(|_| true),
        Command::Eval {
            common,
            controller,
            checkpoint,
            precision,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(kind) = controller {
                cfg.controllers = vec![ControllerSpec::from_kind(&kind, checkpoint)?];
            }
            cfg.assertions.clear();
            dispatch(&cfg, precision, true)
        }
        Command::Compare { common, precision } => dispatch(&load_config(&common)?, precision, false),
        Command::Gradcheck { scope, trials, tol, seed } => cmd_gradcheck(&scope, trials, tol, seed),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
