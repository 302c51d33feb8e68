//! Closed-loop controllers behind one interface.

use std::sync::Arc;

use crate::env::{Benchmark, HorizonData};
use crate::error::{Error, Result};
use crate::layer::{layer_forward, LayerMode};
use crate::mppi::{MppiConfig, MppiController};
use crate::numerics::linalg::Matrix;
use crate::numerics::RngStream;
use crate::policy::{dpc_forward, policy_forward, Checkpoint};
use crate::scalar::Scalar;

pub trait Controller<T: Scalar>: Send {
    fn name(&self) -> &str;

    /// Number of future contexts `control` needs.
    fn horizon_len(&self) -> usize {
        1
    }

    /// Restores the initial internal state and reseeds any randomness.
    fn reset(&mut self, _seed: u64) {}

    /// Unclamped control for state `x` at time `t`.
    fn control(&mut self, x: &[T], t: usize, horizon: &HorizonData<T>) -> Result<Vec<T>>;
}

/// Applies the same input at every step.
pub struct ConstantController<T> {
    name: String,
    u: Vec<T>,
}

impl<T: Scalar> ConstantController<T> {
    pub fn new(name: impl Into<String>, u: Vec<T>) -> Self {
        Self { name: name.into(), u }
    }
}

impl<T: Scalar> Controller<T> for ConstantController<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn control(&mut self, _x: &[T], _t: usize, _h: &HorizonData<T>) -> Result<Vec<T>> {
        Ok(self.u.clone())
    }
}

/// Finite-horizon Riccati solution for `min Σ_{t<N} x_{t+1}ᵀ Q x_{t+1} + u_tᵀ R u_t`
/// subject to `x_{t+1} = A x_t + B u_t`.
///
/// Returns the gains `K_t` (`u_t = −K_t x_t`) and `P_0`; the optimal cost from `x₀` is `x₀ᵀ P_0 x₀`.
pub fn riccati_gains<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, q: &Matrix<T>, r: &Matrix<T>, n: usize) -> Result<(Vec<Matrix<T>>, Matrix<T>)> {
    let nx = a.rows();
    let mut p = Matrix::zeros(nx, nx);
    let mut gains = Vec::with_capacity(n);
    let at = a.transpose();
    let bt = b.transpose();
    for _ in 0..n {
        let s = q.add(&p)?;
        let bts = bt.matmul(&s)?;
        let k = r.add(&bts.matmul(b)?)?.solve(&bts.matmul(a)?)?;
        let ats = at.matmul(&s)?;
        p = ats.matmul(a)?.sub(&ats.matmul(b)?.matmul(&k)?)?;
        gains.push(k);
    }
    gains.reverse();
    Ok((gains, p))
}

/// Time-varying LQR for linear models with a diagonal quadratic cost around the origin.
pub struct LqrController<T> {
    gains: Vec<Matrix<T>>,
    p0: Matrix<T>,
}

impl<T: Scalar> LqrController<T> {
    /// Gains for an `n`-step episode; the model is linearized at the origin.
    pub fn new(bench: &Benchmark<T>, n: usize) -> Result<Self> {
        let nx = bench.model.state_dim();
        let nu = bench.model.input_dim();
        let zx = vec![T::zero(); nx];
        let zu = vec![T::zero(); nu];
        let ctx = bench.task.horizon(&zx, 0, 1).contexts.remove(0);
        if ctx.x_ref.iter().chain(&ctx.u_ref).any(|v| *v != T::zero()) || !ctx.state_constraints.is_empty() {
            return Err(Error::invalid("LQR oracle needs an unconstrained quadratic cost around the origin"));
        }
        let a = bench.model.jac_x(&zx, &zu, &[])?;
        let b = bench.model.jac_u(&zx, &zu, &[])?;
        let (gains, p0) = riccati_gains(&a, &b, &Matrix::from_diag(&ctx.q), &Matrix::from_diag(&ctx.r), n)?;
        Ok(Self { gains, p0 })
    }

    pub fn optimal_cost(&self, x0: &[T]) -> T {
        crate::numerics::linalg::dot(x0, &self.p0.mul_vec(x0))
    }
}

impl<T: Scalar> Controller<T> for LqrController<T> {
    fn name(&self) -> &str {
        "lqr"
    }

    fn control(&mut self, x: &[T], t: usize, _h: &HorizonData<T>) -> Result<Vec<T>> {
        let k = self
            .gains
            .get(t)
            .ok_or_else(|| Error::invalid(format!("LQR gains cover {} steps, asked for step {t}", self.gains.len())))?;
        Ok(k.mul_vec(x).into_iter().map(|v| -v).collect())
    }
}

pub struct MppiClosedLoop<T: Scalar> {
    name: String,
    inner: MppiController<T>,
}

impl<T: Scalar> MppiClosedLoop<T> {
    pub fn new(name: impl Into<String>, cfg: MppiConfig, bench: &Benchmark<T>) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            inner: MppiController::new(cfg, bench.model.clone())?,
        })
    }
}

impl<T: Scalar> Controller<T> for MppiClosedLoop<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn horizon_len(&self) -> usize {
        self.inner.config().horizon
    }

    fn reset(&mut self, seed: u64) {
        self.inner.reset(seed);
    }

    fn control(&mut self, x: &[T], _t: usize, h: &HorizonData<T>) -> Result<Vec<T>> {
        Ok(self.inner.control(x, h)?.0)
    }
}

fn policy_input<T: Scalar>(bench: &Benchmark<T>, ckpt: &Checkpoint<T>, x: &[T], h: &HorizonData<T>) -> Vec<T> {
    ckpt.normalizer
        .apply(&bench.task.features(x, &h.contexts[0], &h.params[0]))
}

fn check_checkpoint<T: Scalar>(bench: &Benchmark<T>, ckpt: &Checkpoint<T>, chol: bool) -> Result<()> {
    let s = ckpt.params.shape();
    if s.input_dim != bench.task.feature_dim() || s.output_dim() != bench.model.input_dim() {
        return Err(Error::invalid(format!(
            "checkpoint maps {} features to {} inputs; {} needs {} → {}",
            s.input_dim,
            s.output_dim(),
            bench.name,
            bench.task.feature_dim(),
            bench.model.input_dim()
        )));
    }
    if s.chol_head != chol {
        return Err(Error::invalid(if chol {
            "checkpoint has no Cholesky head; it is a DPC policy"
        } else {
            "checkpoint is a Step-MPPI policy, not DPC"
        }));
    }
    Ok(())
}

pub struct DpcController<T: Scalar> {
    bench: Benchmark<T>,
    ckpt: Arc<Checkpoint<T>>,
}

impl<T: Scalar> DpcController<T> {
    pub fn new(bench: &Benchmark<T>, ckpt: Arc<Checkpoint<T>>) -> Result<Self> {
        check_checkpoint(bench, &ckpt, false)?;
        Ok(Self {
            bench: bench.clone(),
            ckpt,
        })
    }
}

impl<T: Scalar> Controller<T> for DpcController<T> {
    fn name(&self) -> &str {
        "dpc"
    }

    fn control(&mut self, x: &[T], _t: usize, h: &HorizonData<T>) -> Result<Vec<T>> {
        Ok(dpc_forward(&self.ckpt.params, &policy_input(&self.bench, &self.ckpt, x, h))?.0)
    }
}

/// Policy forward pass followed by one weighted update over `samples` draws.
pub struct StepMppiController<T: Scalar> {
    bench: Benchmark<T>,
    ckpt: Arc<Checkpoint<T>>,
    samples: usize,
    lambda: T,
    stream: RngStream,
}

impl<T: Scalar> StepMppiController<T> {
    pub fn new(bench: &Benchmark<T>, ckpt: Arc<Checkpoint<T>>, samples: usize, lambda: f64) -> Result<Self> {
        check_checkpoint(bench, &ckpt, true)?;
        if samples == 0 || !(lambda > 0.0) {
            return Err(Error::invalid("step-mppi needs samples ≥ 1 and lambda > 0"));
        }
        Ok(Self {
            bench: bench.clone(),
            ckpt,
            samples,
            lambda: T::of(lambda),
            stream: RngStream::new(0, "step-mppi"),
        })
    }
}

impl<T: Scalar> Controller<T> for StepMppiController<T> {
    fn name(&self) -> &str {
        "step-mppi"
    }

    fn reset(&mut self, seed: u64) {
        self.stream = RngStream::new(seed, "step-mppi");
    }

    fn control(&mut self, x: &[T], t: usize, h: &HorizonData<T>) -> Result<Vec<T>> {
        let (z, _) = policy_forward(&self.ckpt.params, &policy_input(&self.bench, &self.ckpt, x, h))?;
        let (u, _) = layer_forward(
            &z,
            x,
            &h.params[0],
            &h.contexts[0],
            self.bench.model.as_ref(),
            self.samples,
            self.lambda,
            &self.stream.derive(t).keyed(),
            LayerMode::Inference,
        )?;
        Ok(u)
    }
}
