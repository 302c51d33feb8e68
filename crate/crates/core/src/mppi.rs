//! Conventional multi-step MPPI.
//!
//! Each iteration samples `N` control sequences from the factorized Gaussian
//! `Π_h N(μ_h, L_h L_hᵀ)`, rolls them out, weights them by
//! `softmax(−S/λ)` and replaces the means (and optionally covariances) with
//! weighted moments. The first mean is applied and the plan shifted.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::stage_cost;
use crate::env::{Bounds, HorizonData, SystemModel};
use crate::error::{Error, Result};
use crate::numerics::gaussian::softmax_neg_scaled;
use crate::numerics::linalg::{CholeskyFactor, Matrix, Vector, DIAG_FLOOR};
use crate::numerics::rng::{fill_normals, KeyedStream, RngStream};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MppiConfig {
    pub horizon: usize,
    pub samples: usize,
    pub lambda: f64,
    /// Per-channel sampling std; empty means half of each channel's half-width.
    pub noise_std: Vec<f64>,
    pub iterations: usize,
    pub update_covariance: bool,
    pub warm_start: bool,
    /// Initial mean per channel; `None` starts at the centre of the input box.
    pub init_mean: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for MppiConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            samples: 1024,
            lambda: 1.0,
            noise_std: Vec::new(),
            iterations: 1,
            update_covariance: false,
            warm_start: true,
            init_mean: None,
            seed: 0,
        }
    }
}

impl MppiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.samples == 0 || self.iterations == 0 {
            return Err(Error::invalid("MPPI needs horizon, samples and iterations ≥ 1"));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid("MPPI temperature must be positive"));
        }
        if self.noise_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("MPPI noise std must be positive"));
        }
        Ok(())
    }
}

/// Means and Cholesky factors for `H` consecutive steps.
#[derive(Clone, Debug, PartialEq)]
pub struct MppiPlan<T: Scalar> {
    pub means: Vec<Vec<T>>,
    pub chols: Vec<CholeskyFactor<T>>,
}

impl<T: Scalar> MppiPlan<T> {
    pub fn constant(mean: Vec<T>, chol: CholeskyFactor<T>, horizon: usize) -> Result<Self> {
        if mean.len() != chol.dim() || horizon == 0 {
            return Err(Error::invalid("plan mean and factor dimensions disagree"));
        }
        Ok(Self {
            means: vec![mean; horizon],
            chols: vec![chol; horizon],
        })
    }

    pub fn horizon(&self) -> usize {
        self.means.len()
    }

    pub fn input_dim(&self) -> usize {
        self.chols.first().map_or(0, |c| c.dim())
    }

    /// Drops the first step and repeats the last.
    pub fn shift(&mut self) {
        if self.means.len() > 1 {
            self.means.rotate_left(1);
            self.chols.rotate_left(1);
            let h = self.means.len();
            self.means[h - 1] = self.means[h - 2].clone();
            self.chols[h - 1] = self.chols[h - 2].clone();
        }
    }
}

/// `N` sampled sequences in flat `(sample, step, channel)` order, with their noises.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch<T> {
    pub samples: usize,
    pub horizon: usize,
    pub input_dim: usize,
    pub noise: Vec<T>,
    pub controls: Vec<T>,
}

impl<T: Scalar> SampleBatch<T> {
    pub fn control(&self, i: usize, h: usize) -> &[T] {
        let start = (i * self.horizon + h) * self.input_dim;
        &self.controls[start..start + self.input_dim]
    }

    pub fn sequence(&self, i: usize) -> &[T] {
        let len = self.horizon * self.input_dim;
        &self.controls[i * len..(i + 1) * len]
    }
}

/// `u_h^(i) = μ_h + L_h ε_h^(i)`; sample `i` draws all of its noise from sub-stream `i`.
pub fn sample_sequences<T: Scalar>(
    plan: &MppiPlan<T>,
    n: usize,
    stream: &KeyedStream,
    bounds: Option<&Bounds<T>>,
) -> SampleBatch<T> {
    let (h, nu) = (plan.horizon(), plan.input_dim());
    let per = h * nu;
    let noise: Vec<T> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| fill_normals::<T, _>(&mut stream.rng(i as u64), per))
        .collect();
    let mut controls = vec![T::zero(); n * per];
    controls.par_chunks_mut(per).enumerate().for_each(|(i, seq)| {
        for step in 0..h {
            let eps = &noise[i * per + step * nu..i * per + (step + 1) * nu];
            let u = &mut seq[step * nu..(step + 1) * nu];
            let le = plan.chols[step].mul_vec(eps);
            for k in 0..nu {
                u[k] = plan.means[step][k] + le[k];
            }
            if let Some(b) = bounds {
                b.clamp(u);
            }
        }
    });
    SampleBatch {
        samples: n,
        horizon: h,
        input_dim: nu,
        noise,
        controls,
    }
}

/// Total cost of one control sequence from `x0`.
pub fn rollout_cost<T: Scalar>(
    model: &dyn SystemModel<T>,
    x0: &[T],
    controls: &[T],
    horizon: &HorizonData<T>,
) -> Result<T> {
    let nu = model.input_dim();
    let steps = controls.len() / nu;
    if horizon.len() < steps || horizon.params.len() < steps {
        return Err(Error::invalid("horizon data shorter than the control sequence"));
    }
    let mut x = x0.to_vec();
    let mut total = T::zero();
    for h in 0..steps {
        let u = &controls[h * nu..(h + 1) * nu];
        x = model.step(&x, u, &horizon.params[h]).map_err(|e| e.at_step(h))?;
        total += stage_cost(&x, u, &horizon.contexts[h])?;
    }
    Ok(total)
}

/// Per-sequence total costs and their softmax weights.
pub fn rollout_and_weight<T: Scalar>(
    model: &dyn SystemModel<T>,
    x0: &[T],
    batch: &SampleBatch<T>,
    horizon: &HorizonData<T>,
    lambda: T,
) -> Result<(Vec<T>, Vector<T>)> {
    let costs: Vec<T> = (0..batch.samples)
        .into_par_iter()
        .map(|i| rollout_cost(model, x0, batch.sequence(i), horizon).map_err(|e| e.with_sample(i)))
        .collect::<Result<_>>()?;
    let weights = softmax_neg_scaled(&costs, lambda)?;
    Ok((costs, weights))
}

/// Weighted-moment update. The covariance, when updated, is
/// `Σ_i w_i (u^(i) − μ_new)(u^(i) − μ_new)ᵀ + floor²·I`.
pub fn update_plan<T: Scalar>(
    plan: &MppiPlan<T>,
    batch: &SampleBatch<T>,
    weights: &[T],
    update_covariance: bool,
) -> Result<MppiPlan<T>> {
    if weights.len() != batch.samples || batch.horizon != plan.horizon() {
        return Err(Error::invalid("weights, batch and plan disagree"));
    }
    let nu = batch.input_dim;
    let mut out = plan.clone();
    for h in 0..batch.horizon {
        let mut mean = vec![T::zero(); nu];
        for (i, &w) in weights.iter().enumerate() {
            for (m, &u) in mean.iter_mut().zip(batch.control(i, h)) {
                *m += w * u;
            }
        }
        if update_covariance {
            let mut cov = Matrix::zeros(nu, nu);
            for (i, &w) in weights.iter().enumerate() {
                let u = batch.control(i, h);
                for a in 0..nu {
                    for b in 0..=a {
                        cov[(a, b)] += w * (u[a] - mean[a]) * (u[b] - mean[b]);
                    }
                }
            }
            for a in 0..nu {
                for b in 0..a {
                    cov[(b, a)] = cov[(a, b)];
                }
            }
            let floor = T::of(DIAG_FLOOR);
            out.chols[h] = CholeskyFactor::factor(&cov, floor * floor)?;
        }
        out.means[h] = mean;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MppiDiagnostics {
    pub best_cost: f64,
    pub worst_cost: f64,
    pub mean_cost: f64,
    /// `1 / Σ w_i²`
    pub effective_samples: f64,
}

impl MppiDiagnostics {
    pub fn from_costs<T: Scalar>(costs: &[T], weights: &[T]) -> Self {
        let c: Vec<f64> = costs.iter().map(|v| v.as_f64()).collect();
        let ess = 1.0 / weights.iter().map(|w| w.as_f64().powi(2)).sum::<f64>();
        Self {
            best_cost: c.iter().copied().fold(f64::INFINITY, f64::min),
            worst_cost: c.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean_cost: c.iter().sum::<f64>() / c.len() as f64,
            effective_samples: ess,
        }
    }
}

/// Receding-horizon MPPI controller with a persistent, warm-started plan.
pub struct MppiController<T: Scalar> {
    cfg: MppiConfig,
    model: Arc<dyn SystemModel<T>>,
    plan: MppiPlan<T>,
    initial: MppiPlan<T>,
    stream: RngStream,
    step: usize,
}

impl<T: Scalar> MppiController<T> {
    pub fn new(cfg: MppiConfig, model: Arc<dyn SystemModel<T>>) -> Result<Self> {
        cfg.validate()?;
        let bounds = model.input_bounds();
        let nu = model.input_dim();
        let std: Vec<T> = if cfg.noise_std.is_empty() {
            bounds.half_width().into_iter().map(|w| w * T::of(0.5)).collect()
        } else if cfg.noise_std.len() == nu {
            cfg.noise_std.iter().map(|&s| T::of(s)).collect()
        } else {
            return Err(Error::invalid(format!("noise_std needs {nu} entries")));
        };
        let mean = match &cfg.init_mean {
            Some(m) if m.len() == nu => m.iter().map(|&v| T::of(v)).collect(),
            Some(_) => return Err(Error::invalid(format!("init_mean needs {nu} entries"))),
            None => bounds.mid(),
        };
        let plan = MppiPlan::constant(mean, CholeskyFactor::from_diag(&std)?, cfg.horizon)?;
        Ok(Self {
            stream: RngStream::new(cfg.seed, "mppi"),
            initial: plan.clone(),
            plan,
            cfg,
            model,
            step: 0,
        })
    }

    pub fn plan(&self) -> &MppiPlan<T> {
        &self.plan
    }

    pub fn config(&self) -> &MppiConfig {
        &self.cfg
    }

    pub fn reset(&mut self, seed: u64) {
        self.plan = self.initial.clone();
        self.stream = RngStream::new(seed, "mppi");
        self.step = 0;
    }

    /// Runs the configured iterations from `x`, returns `μ_0` (clamped) and shifts the plan.
    pub fn control(&mut self, x: &[T], horizon: &HorizonData<T>) -> Result<(Vec<T>, MppiDiagnostics)> {
        let lambda = T::of(self.cfg.lambda);
        let bounds = self.model.input_bounds().clone();
        let mut diag = None;
        for it in 0..self.cfg.iterations {
            let keyed = self.stream.derive(self.step).derive(it).keyed();
            let batch = sample_sequences(&self.plan, self.cfg.samples, &keyed, Some(&bounds));
            let (costs, weights) = rollout_and_weight(self.model.as_ref(), x, &batch, horizon, lambda)?;
            self.plan = update_plan(&self.plan, &batch, &weights, self.cfg.update_covariance)?;
            diag = Some(MppiDiagnostics::from_costs(&costs, &weights));
        }
        let mut u = self.plan.means[0].clone();
        bounds.clamp(&mut u);
        if self.cfg.warm_start {
            self.plan.shift();
        } else {
            self.plan = self.initial.clone();
        }
        self.step += 1;
        Ok((u, diag.expect("at least one iteration")))
    }
}
