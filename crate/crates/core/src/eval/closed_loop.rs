//! Receding-horizon simulation and per-episode metrics.

use std::time::Instant;

use serde::Serialize;

use crate::cost::stage_cost;
use crate::env::{Benchmark, EpisodeStatus};
use crate::error::{Error, Result};
use crate::eval::controllers::Controller;
use crate::numerics::linalg::all_finite;
use crate::scalar::Scalar;

/// Hard-limit breaches smaller than this are not counted.
pub const VIOLATION_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct ClosedLoopResult<T> {
    pub controller: String,
    /// `x_0 … x_T`
    pub states: Vec<Vec<T>>,
    /// Clamped inputs `u_0 … u_{T−1}`.
    pub controls: Vec<Vec<T>>,
    /// `c(x_{t+1}, u_t)`
    pub costs: Vec<T>,
    /// Controller wall time per step, seconds.
    pub latencies: Vec<f64>,
    /// Steps `t` whose `(x_{t+1}, u_t)` breached a hard limit.
    pub violations: Vec<usize>,
    pub status: EpisodeStatus,
    pub dt: f64,
}

impl<T> ClosedLoopResult<T> {
    pub fn steps(&self) -> usize {
        self.controls.len()
    }
}

fn episode_failure(e: &Error) -> bool {
    matches!(e, Error::DivergedState { .. } | Error::NumericOverflow { .. } | Error::Evaluation(_))
}

/// Iterates controller → clamp → step for at most `steps` steps.
///
/// Divergence of the controller or the plant ends the episode with
/// [`EpisodeStatus::Failure`]; other errors are returned.
pub fn run_closed_loop<T: Scalar>(
    bench: &Benchmark<T>,
    controller: &mut dyn Controller<T>,
    x0: &[T],
    steps: usize,
) -> Result<ClosedLoopResult<T>> {
    let model = bench.model.as_ref();
    let task = bench.task.as_ref();
    if x0.len() != model.state_dim() {
        return Err(Error::invalid("initial state has the wrong dimension"));
    }
    let bounds = model.input_bounds().clone();
    let mut monitor = task.monitor(x0);
    let mut res = ClosedLoopResult {
        controller: controller.name().to_string(),
        states: vec![x0.to_vec()],
        controls: Vec::with_capacity(steps),
        costs: Vec::with_capacity(steps),
        latencies: Vec::with_capacity(steps),
        violations: Vec::new(),
        status: EpisodeStatus::Running,
        dt: model.dt().as_f64(),
    };
    let mut x = x0.to_vec();
    for t in 0..steps {
        let horizon = task.horizon(&x, t, controller.horizon_len().max(1));
        let start = Instant::now();
        let out = controller.control(&x, t, &horizon);
        let elapsed = start.elapsed().as_secs_f64().max(1e-9);
        let mut u = match out {
            Ok(u) if all_finite(&u) => u,
            Ok(_) => {
                res.status = EpisodeStatus::Failure;
                break;
            }
            Err(e) if episode_failure(&e) => {
                res.status = EpisodeStatus::Failure;
                break;
            }
            Err(e) => return Err(e),
        };
        res.latencies.push(elapsed);
        bounds.clamp(&mut u);
        let xi = &horizon.params[0];
        let next = match model.step(&x, &u, xi) {
            Ok(n) => n,
            Err(e) if episode_failure(&e) => {
                res.latencies.pop();
                res.status = EpisodeStatus::Failure;
                break;
            }
            Err(e) => return Err(e),
        };
        res.costs.push(stage_cost(&next, &u, &horizon.contexts[0])?);
        if task.violation(&next, &u, T::of(VIOLATION_TOL)) {
            res.violations.push(t);
        }
        res.controls.push(u);
        res.states.push(next.clone());
        x = next;
        let status = monitor.observe(&x, t + 1);
        if status != EpisodeStatus::Running {
            res.status = status;
            break;
        }
    }
    if res.status == EpisodeStatus::Running {
        res.status = monitor.on_budget_exhausted();
    }
    Ok(res)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricSummary {
    pub controller: String,
    pub steps: usize,
    pub status: EpisodeStatus,
    pub success: bool,
    pub total_cost: f64,
    pub mean_abs_cte: Option<f64>,
    pub median_abs_cte: Option<f64>,
    pub max_abs_cte: Option<f64>,
    pub violations: usize,
    pub mean_latency_ms: f64,
    pub median_latency_ms: f64,
    pub final_accumulation: Option<f64>,
    /// `Σ_{k=1}^{T} ‖x_k‖₁ · Δt / 3600`
    pub tvh: Option<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn l1<T: Scalar>(x: &[T]) -> f64 {
    x.iter().map(|v| v.as_f64().abs()).sum()
}

pub fn compute_metrics<T: Scalar>(result: &ClosedLoopResult<T>, bench: &Benchmark<T>) -> MetricSummary {
    let task = bench.task.as_ref();
    let cte: Vec<f64> = result
        .states
        .iter()
        .filter_map(|x| task.cross_track_error(x).map(|e| e.as_f64().abs()))
        .collect();
    let (mean_abs_cte, median_abs_cte, max_abs_cte) = if cte.is_empty() {
        (None, None, None)
    } else {
        (
            Some(cte.iter().sum::<f64>() / cte.len() as f64),
            Some(median(&cte)),
            Some(cte.iter().copied().fold(0.0, f64::max)),
        )
    };
    let (final_accumulation, tvh) = if task.is_traffic() {
        let last = result.states.last().expect("x0 is always recorded");
        let tvh = result.states[1..].iter().map(|x| l1(x)).sum::<f64>() * result.dt / 3600.0;
        (Some(l1(last)), Some(tvh))
    } else {
        (None, None)
    };
    let lat_ms: Vec<f64> = result.latencies.iter().map(|s| s * 1e3).collect();
    MetricSummary {
        controller: result.controller.clone(),
        steps: result.steps(),
        status: result.status,
        success: result.status == EpisodeStatus::Success,
        total_cost: result.costs.iter().map(|c| c.as_f64()).sum(),
        mean_abs_cte,
        median_abs_cte,
        max_abs_cte,
        violations: result.violations.len(),
        mean_latency_ms: if lat_ms.is_empty() {
            0.0
        } else {
            lat_ms.iter().sum::<f64>() / lat_ms.len() as f64
        },
        median_latency_ms: if lat_ms.is_empty() { 0.0 } else { median(&lat_ms) },
        final_accumulation,
        tvh,
    }
}
