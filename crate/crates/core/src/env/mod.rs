//! Differentiable discrete-time environments and the tasks posed on them.
//!
//! A [`SystemModel`] is the transition `x' = f(x, u; ξ)` with Jacobians. A
//! [`Task`] supplies everything around it: per-step cost contexts, the
//! policy's feature map, initial-state samplers and episode bookkeeping. The
//! pair is bundled as a [`Benchmark`] by [`build_benchmark`].

pub mod bicycle;
pub mod double_integrator;
pub mod registry;
pub mod track;
pub mod traffic;

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::CostContext;
use crate::error::{Error, Result};
use crate::numerics::fd::finite_diff_jacobian;
use crate::numerics::linalg::{all_finite, Matrix};
use crate::scalar::Scalar;

pub use registry::{build_benchmark, registered_environments};

/// Per-channel box `[lower, upper]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Bounds<T> {
    pub lower: Vec<T>,
    pub upper: Vec<T>,
}

impl<T: Scalar> Bounds<T> {
    pub fn new(lower: Vec<T>, upper: Vec<T>) -> Result<Self> {
        if lower.len() != upper.len() || lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::invalid("bounds need lower < upper in every channel"));
        }
        Ok(Self { lower, upper })
    }

    pub fn symmetric(limits: &[T]) -> Result<Self> {
        Self::new(limits.iter().map(|&l| -l).collect(), limits.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn clamp(&self, u: &mut [T]) {
        for ((v, &lo), &hi) in u.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.max(lo).min(hi);
        }
    }

    pub fn contains(&self, u: &[T]) -> bool {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(&v, (&lo, &hi))| v >= lo && v <= hi)
    }

    pub fn mid(&self) -> Vec<T> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| (l + u) * T::of(0.5))
            .collect()
    }

    pub fn half_width(&self) -> Vec<T> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| (u - l) * T::of(0.5))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Bounds<U> {
        Bounds {
            lower: crate::scalar::cast_slice(&self.lower),
            upper: crate::scalar::cast_slice(&self.upper),
        }
    }
}

/// Discrete-time dynamics `x_{t+1} = f(x_t, u_t; ξ_t)`.
///
/// Implementors provide [`transition`](SystemModel::transition); analytic
/// Jacobians and vector-Jacobian products are optional and default to central
/// finite differences.
pub trait SystemModel<T: Scalar>: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn param_dim(&self) -> usize {
        0
    }
    /// Sampling time in seconds.
    fn dt(&self) -> T;
    fn input_bounds(&self) -> &Bounds<T>;

    /// One integration step without dimension or finiteness checks.
    fn transition(&self, x: &[T], u: &[T], xi: &[T]) -> Vec<T>;

    fn step(&self, x: &[T], u: &[T], xi: &[T]) -> Result<Vec<T>> {
        self.check_dims(x, u, xi)?;
        let next = self.transition(x, u, xi);
        if !all_finite(&next) {
            return Err(Error::DivergedState { step: 0, sample: None });
        }
        Ok(next)
    }

    fn check_dims(&self, x: &[T], u: &[T], xi: &[T]) -> Result<()> {
        if x.len() != self.state_dim() || u.len() != self.input_dim() || xi.len() != self.param_dim() {
            return Err(Error::invalid(format!(
                "model expects (x, u, ξ) of dims ({}, {}, {}), got ({}, {}, {})",
                self.state_dim(),
                self.input_dim(),
                self.param_dim(),
                x.len(),
                u.len(),
                xi.len()
            )));
        }
        Ok(())
    }

    /// `∂f/∂x`
    fn jac_x(&self, x: &[T], u: &[T], xi: &[T]) -> Result<Matrix<T>> {
        self.step(x, u, xi)?;
        finite_diff_jacobian(|x| self.step(x, u, xi), x, fd_step(x))
    }

    /// `∂f/∂u`
    fn jac_u(&self, x: &[T], u: &[T], xi: &[T]) -> Result<Matrix<T>> {
        self.step(x, u, xi)?;
        finite_diff_jacobian(|u| self.step(x, u, xi), u, fd_step(u))
    }

    /// `(∂f/∂x)ᵀ · cot`
    fn vjp_x(&self, x: &[T], u: &[T], xi: &[T], cot: &[T]) -> Result<Vec<T>> {
        Ok(self.jac_x(x, u, xi)?.tr_mul_vec(cot))
    }

    /// `(∂f/∂u)ᵀ · cot`
    fn vjp_u(&self, x: &[T], u: &[T], xi: &[T], cot: &[T]) -> Result<Vec<T>> {
        Ok(self.jac_u(x, u, xi)?.tr_mul_vec(cot))
    }
}

/// Step size for fallback finite differences, `ε^{1/3}` scaled to the input.
pub fn fd_step<T: Scalar>(x: &[T]) -> T {
    let scale = x.iter().fold(T::one(), |m, v| m.max(v.abs()));
    T::epsilon().cbrt() * scale
}

/// Cost contexts `r_{t+1..t+H}` and model parameters `ξ_{t..t+H−1}` for a
/// horizon starting at time `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct HorizonData<T> {
    pub contexts: Vec<CostContext<T>>,
    pub params: Vec<Vec<T>>,
}

impl<T: Scalar> HorizonData<T> {
    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }
}

/// Which initial-state distribution to draw from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitDistribution {
    #[default]
    InDistribution,
    OutOfDistribution,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    Running,
    Success,
    Failure,
    Timeout,
}

/// Tracks episode progress one state at a time.
pub trait EpisodeMonitor<T: Scalar>: Send {
    fn observe(&mut self, x: &[T], t: usize) -> EpisodeStatus;

    /// Status when the step budget runs out while still running.
    fn on_budget_exhausted(&self) -> EpisodeStatus {
        EpisodeStatus::Timeout
    }
}

/// Everything around the dynamics that defines a control problem.
pub trait Task<T: Scalar>: Send + Sync {
    /// References and parameters for the `len` steps after time `t`, given the current state.
    fn horizon(&self, x: &[T], t: usize, len: usize) -> HorizonData<T>;

    /// Dimension of the raw (unnormalized) policy input.
    fn feature_dim(&self) -> usize;

    /// Policy input built from `(x_h, r_{h+1}, ξ_h)`.
    fn features(&self, x: &[T], ctx: &CostContext<T>, xi: &[T]) -> Vec<T>;

    /// `(∂features/∂x)ᵀ · grad`
    fn features_vjp(&self, x: &[T], ctx: &CostContext<T>, xi: &[T], grad: &[T]) -> Vec<T>;

    fn sample_initial(&self, rng: &mut ChaCha8Rng, dist: InitDistribution) -> Vec<T>;

    fn admissible(&self, x: &[T]) -> bool {
        all_finite(x)
    }

    fn monitor(&self, x0: &[T]) -> Box<dyn EpisodeMonitor<T>>;

    /// Default closed-loop episode length in steps.
    fn episode_len(&self) -> usize;

    /// Signed cross-track error, for path-following tasks.
    fn cross_track_error(&self, _x: &[T]) -> Option<T> {
        None
    }

    /// Whether `(x, u)` breaches a hard limit by more than `tol`.
    fn violation(&self, _x: &[T], _u: &[T], _tol: T) -> bool {
        false
    }

    /// Whether the state is a traffic accumulation matrix (enables TVH metrics).
    fn is_traffic(&self) -> bool {
        false
    }
}

/// A training or evaluation instance: `x₀`, per-step references and parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct Instance<T> {
    pub x0: Vec<T>,
    pub horizon: HorizonData<T>,
}

/// A named environment: model plus task.
#[derive(Clone)]
pub struct Benchmark<T: Scalar> {
    pub name: String,
    pub model: Arc<dyn SystemModel<T>>,
    pub task: Arc<dyn Task<T>>,
}

impl<T: Scalar> std::fmt::Debug for Benchmark<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Benchmark")
            .field("name", &self.name)
            .field("state_dim", &self.model.state_dim())
            .field("input_dim", &self.model.input_dim())
            .finish()
    }
}

impl<T: Scalar> Benchmark<T> {
    /// Instance starting from `x0` at time 0.
    pub fn instance(&self, x0: Vec<T>, len: usize) -> Instance<T> {
        let horizon = self.task.horizon(&x0, 0, len);
        Instance { x0, horizon }
    }

    /// Samples an admissible initial state, retrying up to `max_tries` times.
    pub fn sample_instance(
        &self,
        rng: &mut ChaCha8Rng,
        dist: InitDistribution,
        len: usize,
        max_tries: usize,
    ) -> Result<Instance<T>> {
        for _ in 0..max_tries {
            let x0 = self.task.sample_initial(rng, dist);
            if self.task.admissible(&x0) {
                return Ok(self.instance(x0, len));
            }
        }
        Err(Error::invalid(format!(
            "{}: no admissible initial state after {max_tries} draws",
            self.name
        )))
    }
}

/// Wraps `ψ` into `(−π, π]`.
pub fn wrap_angle<T: Scalar>(a: T) -> T {
    let two_pi = T::PI() + T::PI();
    let mut w = a % two_pi;
    if w > T::PI() {
        w -= two_pi;
    } else if w <= -T::PI() {
        w += two_pi;
    }
    w
}
