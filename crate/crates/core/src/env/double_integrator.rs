//! `d`-axis double integrator with exact zero-order-hold discretization.
//!
//! State `[p_1..p_d, v_1..v_d]`, input `[a_1..a_d]`:
//! `p' = p + v·δt + ½·a·δt²`, `v' = v + a·δt`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{CostContext, InputPenalty};
use crate::env::{Bounds, EpisodeMonitor, EpisodeStatus, HorizonData, InitDistribution, SystemModel, Task};
use crate::error::Result;
use crate::numerics::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct DoubleIntegrator<T: Scalar> {
    dims: usize,
    dt: T,
    bounds: Bounds<T>,
}

impl<T: Scalar> DoubleIntegrator<T> {
    /// Panics on `dims == 0`, `dt ≤ 0` or `u_max ≤ 0`; use [`try_new`](Self::try_new) for fallible construction.
    pub fn new(dims: usize, dt: f64, u_max: f64) -> Self {
        Self::try_new(dims, dt, u_max).expect("valid double integrator")
    }

    pub fn try_new(dims: usize, dt: f64, u_max: f64) -> Result<Self> {
        if dims == 0 || !(dt > 0.0) {
            return Err(crate::error::Error::invalid("double integrator needs dims ≥ 1 and dt > 0"));
        }
        Ok(Self {
            dims,
            dt: T::of(dt),
            bounds: Bounds::symmetric(&vec![T::of(u_max); dims])?,
        })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    /// `(A, B)` of the discrete system.
    pub fn matrices(&self) -> (Matrix<T>, Matrix<T>) {
        let d = self.dims;
        let dt = self.dt;
        let mut a = Matrix::identity(2 * d);
        let mut b = Matrix::zeros(2 * d, d);
        for i in 0..d {
            a.as_mut_slice()[i * 2 * d + d + i] = dt;
            b.as_mut_slice()[i * d + i] = T::of(0.5) * dt * dt;
            b.as_mut_slice()[(d + i) * d + i] = dt;
        }
        (a, b)
    }
}

impl<T: Scalar> SystemModel<T> for DoubleIntegrator<T> {
    fn state_dim(&self) -> usize {
        2 * self.dims
    }

    fn input_dim(&self) -> usize {
        self.dims
    }

    fn dt(&self) -> T {
        self.dt
    }

    fn input_bounds(&self) -> &Bounds<T> {
        &self.bounds
    }

    fn transition(&self, x: &[T], u: &[T], _xi: &[T]) -> Vec<T> {
        let d = self.dims;
        let dt = self.dt;
        let mut next = x.to_vec();
        for i in 0..d {
            next[i] = x[i] + x[d + i] * dt + T::of(0.5) * u[i] * dt * dt;
            next[d + i] = x[d + i] + u[i] * dt;
        }
        next
    }

    fn jac_x(&self, x: &[T], u: &[T], xi: &[T]) -> Result<Matrix<T>> {
        self.check_dims(x, u, xi)?;
        Ok(self.matrices().0)
    }

    fn jac_u(&self, x: &[T], u: &[T], xi: &[T]) -> Result<Matrix<T>> {
        self.check_dims(x, u, xi)?;
        Ok(self.matrices().1)
    }

    fn vjp_x(&self, x: &[T], u: &[T], xi: &[T], cot: &[T]) -> Result<Vec<T>> {
        self.check_dims(x, u, xi)?;
        let d = self.dims;
        let mut g = cot.to_vec();
        for i in 0..d {
            g[d + i] += self.dt * cot[i];
        }
        Ok(g)
    }

    fn vjp_u(&self, x: &[T], u: &[T], xi: &[T], cot: &[T]) -> Result<Vec<T>> {
        self.check_dims(x, u, xi)?;
        let d = self.dims;
        let dt = self.dt;
        Ok((0..d)
            .map(|i| T::of(0.5) * dt * dt * cot[i] + dt * cot[d + i])
            .collect())
    }
}

/// Regulation to the origin under a diagonal quadratic cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DoubleIntegratorConfig {
    pub dims: usize,
    pub dt: f64,
    pub u_max: f64,
    pub q_pos: f64,
    pub q_vel: f64,
    pub r: f64,
    /// Weight on squared excess beyond `±u_max`.
    pub input_weight: f64,
    /// Initial positions and velocities are uniform in `[−box, box]`.
    pub init_box: f64,
    /// Out-of-distribution box half-width.
    pub ood_box: f64,
    pub episode_len: usize,
    /// Success radius around the origin; `None` runs every episode to its step budget.
    pub goal_radius: Option<f64>,
}

impl Default for DoubleIntegratorConfig {
    fn default() -> Self {
        Self {
            dims: 1,
            dt: 0.1,
            u_max: 10.0,
            q_pos: 1.0,
            q_vel: 0.1,
            r: 0.01,
            input_weight: 10.0,
            init_box: 1.0,
            ood_box: 2.0,
            episode_len: 50,
            goal_radius: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RegulationTask<T: Scalar> {
    cfg: DoubleIntegratorConfig,
    context: CostContext<T>,
}

impl<T: Scalar> RegulationTask<T> {
    pub fn new(cfg: DoubleIntegratorConfig) -> Self {
        let d = cfg.dims;
        let mut q = vec![T::of(cfg.q_pos); d];
        q.extend(vec![T::of(cfg.q_vel); d]);
        let mut context = CostContext::quadratic(q, vec![T::of(cfg.r); d]);
        context.input_penalty = Some(InputPenalty {
            lower: vec![T::of(-cfg.u_max); d],
            upper: vec![T::of(cfg.u_max); d],
            weight: T::of(cfg.input_weight),
        });
        Self { cfg, context }
    }

    pub fn context(&self) -> &CostContext<T> {
        &self.context
    }
}

struct GoalMonitor<T> {
    radius: Option<T>,
}

impl<T: Scalar> EpisodeMonitor<T> for GoalMonitor<T> {
    fn observe(&mut self, x: &[T], _t: usize) -> EpisodeStatus {
        match self.radius {
            Some(r) if crate::numerics::linalg::norm(x) <= r => EpisodeStatus::Success,
            _ => EpisodeStatus::Running,
        }
    }

    fn on_budget_exhausted(&self) -> EpisodeStatus {
        if self.radius.is_some() {
            EpisodeStatus::Timeout
        } else {
            EpisodeStatus::Success
        }
    }
}

impl<T: Scalar> Task<T> for RegulationTask<T> {
    fn horizon(&self, _x: &[T], _t: usize, len: usize) -> HorizonData<T> {
        HorizonData {
            contexts: vec![self.context.clone(); len],
            params: vec![Vec::new(); len],
        }
    }

    fn feature_dim(&self) -> usize {
        2 * self.cfg.dims
    }

    fn features(&self, x: &[T], ctx: &CostContext<T>, _xi: &[T]) -> Vec<T> {
        x.iter().zip(&ctx.x_ref).map(|(&a, &r)| a - r).collect()
    }

    fn features_vjp(&self, _x: &[T], _ctx: &CostContext<T>, _xi: &[T], grad: &[T]) -> Vec<T> {
        grad.to_vec()
    }

    fn sample_initial(&self, rng: &mut ChaCha8Rng, dist: InitDistribution) -> Vec<T> {
        let b = match dist {
            InitDistribution::InDistribution => self.cfg.init_box,
            InitDistribution::OutOfDistribution => self.cfg.ood_box,
        };
        (0..2 * self.cfg.dims)
            .map(|_| T::of(rng.random_range(-b..=b)))
            .collect()
    }

    fn monitor(&self, _x0: &[T]) -> Box<dyn EpisodeMonitor<T>> {
        Box::new(GoalMonitor {
            radius: self.cfg.goal_radius.map(T::of),
        })
    }

    fn episode_len(&self) -> usize {
        self.cfg.episode_len
    }
}
