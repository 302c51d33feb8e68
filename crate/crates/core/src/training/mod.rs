//! Offline self-supervised training for Step-MPPI and DPC policies.
//!
//! Each epoch shuffles the dataset, splits it into mini-batches and, per
//! batch, evaluates the rollout loss of every instance in parallel with
//! noise drawn from a stream keyed by `(seed, epoch, instance)`. Results are
//! collected in instance order before reduction, so the final parameters do
//! not depend on the worker count.

pub mod adam;
pub mod loss;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{Benchmark, InitDistribution, Instance};
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::policy::checkpoint::hex;
use crate::policy::{policy_init, Activation, Checkpoint, Normalizer, PolicyParams, PolicyShape};
use crate::scalar::Scalar;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{dpc_rollout_loss, rollout_noise, stepmppi_rollout_loss, LossSettings, RolloutLoss};

/// Maximum sampler redraws per dataset instance.
const MAX_SAMPLER_TRIES: usize = 1000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    StepMppi,
    Dpc,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::StepMppi => "step-mppi",
            Method::Dpc => "dpc",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Initial exploration scale as a fraction of each input's half-range.
    pub sigma0_frac: f64,
    pub diag_floor: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            sigma0_frac: 0.25,
            diag_floor: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub horizon: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    /// Entropy weight `γ`.
    pub gamma: f64,
    /// Temperature `λ`.
    pub lambda: f64,
    /// Samples per layer evaluation during training.
    pub samples: usize,
    pub truncated_bptt: bool,
    pub dataset_size: usize,
    /// Abort when more than this fraction of an epoch's rollouts diverge.
    pub max_skip_fraction: f64,
    pub policy: PolicyConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::StepMppi,
            horizon: 20,
            batch_size: 16,
            epochs: 50,
            adam: AdamConfig::default(),
            lr_decay: 1.0,
            gamma: 1e-3,
            lambda: 1.0,
            samples: 64,
            truncated_bptt: false,
            dataset_size: 256,
            max_skip_fraction: 0.5,
            policy: PolicyConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.horizon == 0 || self.batch_size == 0 || self.epochs == 0 || self.samples == 0 || self.dataset_size == 0 {
            return bad("horizon, batch_size, epochs, samples and dataset_size must be positive");
        }
        if !(self.gamma >= 0.0) || !(self.lambda > 0.0) || !(self.lr_decay > 0.0) {
            return bad("need gamma ≥ 0, lambda > 0 and lr_decay > 0");
        }
        if !(0.0..=1.0).contains(&self.max_skip_fraction) {
            return bad("max_skip_fraction must lie in [0, 1]");
        }
        if !(self.policy.sigma0_frac > 0.0) {
            return bad("sigma0_frac must be positive");
        }
        self.adam.validate()
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            horizon: self.horizon,
            lambda: self.lambda,
            gamma: self.gamma,
            truncated: self.truncated_bptt,
        }
    }
}

/// Hex SHA-256 of a value's JSON encoding.
pub fn config_hash<S: Serialize>(value: &S) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex(&Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct Dataset<T> {
    pub env: String,
    pub instances: Vec<Instance<T>>,
    pub normalizer: Normalizer,
}

/// `m` admissible instances with `horizon` steps of references each.
///
/// The normalizer is fitted to the policy features seen along open-loop
/// rollouts of every instance under the midpoint of the input box, which
/// covers states away from `x₀` that the closed loop will visit.
pub fn generate_dataset<T: Scalar>(
    bench: &Benchmark<T>,
    m: usize,
    horizon: usize,
    dist: InitDistribution,
    seed: u64,
) -> Result<Dataset<T>> {
    if m == 0 || horizon == 0 {
        return Err(Error::invalid("dataset needs m ≥ 1 and horizon ≥ 1"));
    }
    let mut rng = RngStream::new(seed, format!("dataset/{}", bench.name)).rng(0);
    let instances = (0..m)
        .map(|_| bench.sample_instance(&mut rng, dist, horizon, MAX_SAMPLER_TRIES))
        .collect::<Result<Vec<_>>>()?;
    let mid = bench.model.input_bounds().mid();
    let mut rows = Vec::with_capacity(m * horizon);
    for inst in &instances {
        let mut x = inst.x0.clone();
        for h in 0..horizon {
            let ctx = &inst.horizon.contexts[h];
            let xi = &inst.horizon.params[h];
            rows.push(bench.task.features(&x, ctx, xi));
            match bench.model.step(&x, &mid, xi) {
                Ok(next) => x = next,
                Err(_) => break,
            }
        }
    }
    Ok(Dataset {
        env: bench.name.clone(),
        instances,
        normalizer: Normalizer::fit(&rows, 1e-6)?,
    })
}

impl<T: Scalar + Serialize> Dataset<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self).map_err(|e| Error::invalid(format!("dataset: {e}")))?;
        std::fs::write(path, s)?;
        Ok(())
    }
}

impl<T: Scalar + for<'de> Deserialize<'de>> Dataset<T> {
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        serde_json::from_str(&s).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}

/// Policy architecture for `bench` under `cfg`.
pub fn policy_shape<T: Scalar>(bench: &Benchmark<T>, cfg: &PolicyConfig, method: Method) -> PolicyShape {
    let b = bench.model.input_bounds();
    PolicyShape {
        input_dim: bench.task.feature_dim(),
        hidden: cfg.hidden.clone(),
        activation: cfg.activation,
        u_lower: crate::scalar::cast_slice(&b.lower),
        u_upper: crate::scalar::cast_slice(&b.upper),
        chol_head: method == Method::StepMppi,
        diag_floor: cfg.diag_floor,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_cost: f64,
    pub mean_entropy: f64,
    pub grad_norm: f64,
    pub skipped: usize,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    /// Columns: epoch, mean_loss, mean_cost, mean_entropy, grad_norm, skipped, wall_time_s.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn skippable(e: &Error) -> bool {
    matches!(e, Error::DivergedState { .. } | Error::NumericOverflow { .. } | Error::Evaluation(_))
}

/// Runs the configured number of epochs and returns the final policy with
/// the dataset's normalizer.
pub fn train<T: Scalar>(bench: &Benchmark<T>, cfg: &TrainConfig, dataset: &Dataset<T>) -> Result<(Checkpoint<T>, TrainReport)> {
    train_from(bench, cfg, dataset, None)
}

/// As [`train`], starting from `init` when given.
pub fn train_from<T: Scalar>(
    bench: &Benchmark<T>,
    cfg: &TrainConfig,
    dataset: &Dataset<T>,
    init: Option<PolicyParams<T>>,
) -> Result<(Checkpoint<T>, TrainReport)> {
    cfg.validate()?;
    if dataset.instances.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    if dataset.normalizer.dim() != bench.task.feature_dim() {
        return Err(Error::invalid("dataset normalizer does not match the environment features"));
    }
    let shape = policy_shape(bench, &cfg.policy, cfg.method);
    let mut params = match init {
        Some(p) if p.shape() == &shape => p,
        Some(_) => return Err(Error::invalid("initial policy shape does not match the configuration")),
        None => {
            let sigma0: Vec<f64> = shape
                .u_lower
                .iter()
                .zip(&shape.u_upper)
                .map(|(l, u)| cfg.policy.sigma0_frac * 0.5 * (u - l))
                .collect();
            policy_init(shape, &sigma0, &mut RngStream::new(cfg.seed, "init").rng(0))?
        }
    };
    let settings = cfg.loss_settings();
    let n_u = bench.model.input_dim();
    let noise_root = RngStream::new(cfg.seed, "train-noise");
    let mut adam_state = AdamState::new(params.len());
    let mut adam_cfg = cfg.adam;
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..dataset.instances.len()).collect();

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut RngStream::new(cfg.seed, "shuffle").rng(epoch as u64));
        let epoch_noise = noise_root.derive(epoch);
        let (mut loss_sum, mut cost_sum, mut ent_sum, mut gnorm_sum) = (0.0, 0.0, 0.0, 0.0);
        let (mut used, mut skipped, mut updates) = (0usize, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<RolloutLoss<T>>> = batch
                .par_iter()
                .map(|&i| {
                    let inst = &dataset.instances[i];
                    match cfg.method {
                        Method::StepMppi => {
                            let noise = rollout_noise(&epoch_noise.derive(i).keyed(), cfg.horizon, cfg.samples, n_u);
                            stepmppi_rollout_loss(&params, &dataset.normalizer, bench, inst, &settings, &noise)
                        }
                        Method::Dpc => dpc_rollout_loss(&params, &dataset.normalizer, bench, inst, &settings),
                    }
                })
                .collect();
            let mut grad = vec![T::zero(); params.len()];
            let mut ok = 0usize;
            for r in results {
                match r {
                    Ok(out) => {
                        ok += 1;
                        loss_sum += out.loss.as_f64();
                        cost_sum += out.mean_cost.as_f64();
                        ent_sum += out.mean_entropy.as_f64();
                        for (g, v) in grad.iter_mut().zip(&out.grad) {
                            *g += *v;
                        }
                    }
                    Err(e) if skippable(&e) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            if ok == 0 {
                continue;
            }
            used += ok;
            let inv = T::one() / T::of(ok as f64);
            for g in &mut grad {
                *g *= inv;
            }
            gnorm_sum += adam_step(params.flat_mut(), &grad, &mut adam_state, &adam_cfg)?.as_f64();
            updates += 1;
        }
        if skipped as f64 > cfg.max_skip_fraction * dataset.instances.len() as f64 {
            return Err(Error::TrainingAborted(format!(
                "epoch {epoch}: {skipped} of {} rollouts diverged",
                dataset.instances.len()
            )));
        }
        let denom = used.max(1) as f64;
        report.epochs.push(EpochStats {
            epoch,
            mean_loss: loss_sum / denom,
            mean_cost: cost_sum / denom,
            mean_entropy: ent_sum / denom,
            grad_norm: gnorm_sum / updates.max(1) as f64,
            skipped,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        adam_cfg.lr *= cfg.lr_decay;
    }

    let metadata = BTreeMap::from([
        ("env".to_string(), bench.name.clone()),
        ("method".to_string(), cfg.method.as_str().to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("epochs".to_string(), cfg.epochs.to_string()),
    ]);
    Ok((
        Checkpoint {
            params,
            normalizer: dataset.normalizer.clone(),
            metadata,
            config_hash: config_hash(cfg),
        },
        report,
    ))
}
