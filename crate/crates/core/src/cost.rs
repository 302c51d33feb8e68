//! Stage costs with soft-constraint penalties, horizon sums, and gradients.
//!
//! A stage cost is
//! `‖x' − r‖²_Q + ‖u − u_ref‖²_R + Σ ρ·max(0, violation)²`
//! with diagonal `Q`, `R`. The one-sided quadratic keeps every penalty C¹,
//! so gradients stay continuous across constraint boundaries.

use serde::{Deserialize, Serialize};

use crate::env::SystemModel;
use crate::error::{Error, Result};
use crate::numerics::linalg::dot;
use crate::scalar::Scalar;

/// `lower ≤ Σ coeff·x[index] ≤ upper`, penalized with weight `ρ` when violated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearConstraint<T> {
    pub coeffs: Vec<(usize, T)>,
    pub lower: Option<T>,
    pub upper: Option<T>,
    pub weight: T,
}

impl<T: Scalar> LinearConstraint<T> {
    pub fn value(&self, x: &[T]) -> T {
        self.coeffs.iter().fold(T::zero(), |acc, &(i, c)| acc + c * x[i])
    }

    /// Signed violation: positive above `upper`, negative below `lower`, zero inside.
    pub fn violation(&self, x: &[T]) -> T {
        let v = self.value(x);
        if let Some(hi) = self.upper {
            if v > hi {
                return v - hi;
            }
        }
        if let Some(lo) = self.lower {
            if v < lo {
                return v - lo;
            }
        }
        T::zero()
    }

    pub fn bound(index: usize, lower: Option<T>, upper: Option<T>, weight: T) -> Self {
        Self {
            coeffs: vec![(index, T::one())],
            lower,
            upper,
            weight,
        }
    }
}

/// Box limits on the input, penalized per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputPenalty<T> {
    pub lower: Vec<T>,
    pub upper: Vec<T>,
    pub weight: T,
}

/// Everything a stage cost needs besides `(x', u)`: references, weights and
/// constraint coefficients for one step.
///
/// `exo` carries extra exogenous signals (e.g. curvature preview) that feed
/// the policy but do not enter the cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostContext<T> {
    pub x_ref: Vec<T>,
    pub u_ref: Vec<T>,
    pub q: Vec<T>,
    pub r: Vec<T>,
    #[serde(default)]
    pub state_constraints: Vec<LinearConstraint<T>>,
    #[serde(default)]
    pub input_penalty: Option<InputPenalty<T>>,
    #[serde(default)]
    pub exo: Vec<T>,
}

impl<T: Scalar> CostContext<T> {
    /// Pure quadratic tracking with zero references.
    pub fn quadratic(q: Vec<T>, r: Vec<T>) -> Self {
        Self {
            x_ref: vec![T::zero(); q.len()],
            u_ref: vec![T::zero(); r.len()],
            q,
            r,
            state_constraints: Vec::new(),
            input_penalty: None,
            exo: Vec::new(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.x_ref.len()
    }

    pub fn input_dim(&self) -> usize {
        self.u_ref.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, nu) = (self.state_dim(), self.input_dim());
        if self.q.len() != nx || self.r.len() != nu {
            return Err(Error::invalid("Q/R diagonals do not match reference dimensions"));
        }
        if self.q.iter().chain(&self.r).any(|w| !(*w >= T::zero())) {
            return Err(Error::invalid("Q and R diagonals must be nonnegative"));
        }
        for c in &self.state_constraints {
            if !(c.weight >= T::zero()) || c.coeffs.iter().any(|&(i, _)| i >= nx) {
                return Err(Error::invalid("malformed state constraint"));
            }
        }
        if let Some(p) = &self.input_penalty {
            if p.lower.len() != nu || p.upper.len() != nu || !(p.weight >= T::zero()) {
                return Err(Error::invalid("malformed input penalty"));
            }
        }
        Ok(())
    }

    fn check_dims(&self, x_next: &[T], u: &[T]) -> Result<()> {
        if x_next.len() != self.state_dim() || u.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "stage cost expects x' of dim {} and u of dim {}, got {} and {}",
                self.state_dim(),
                self.input_dim(),
                x_next.len(),
                u.len()
            )));
        }
        Ok(())
    }
}

pub fn stage_cost<T: Scalar>(x_next: &[T], u: &[T], ctx: &CostContext<T>) -> Result<T> {
    ctx.check_dims(x_next, u)?;
    let mut c = T::zero();
    for i in 0..x_next.len() {
        let e = x_next[i] - ctx.x_ref[i];
        c += ctx.q[i] * e * e;
    }
    for i in 0..u.len() {
        let e = u[i] - ctx.u_ref[i];
        c += ctx.r[i] * e * e;
    }
    for con in &ctx.state_constraints {
        let v = con.violation(x_next);
        c += con.weight * v * v;
    }
    if let Some(p) = &ctx.input_penalty {
        for i in 0..u.len() {
            let v = (u[i] - p.upper[i]).max(T::zero()) + (u[i] - p.lower[i]).min(T::zero());
            c += p.weight * v * v;
        }
    }
    Ok(c)
}

/// `(∂c/∂x', ∂c/∂u)`
pub fn stage_cost_grads<T: Scalar>(x_next: &[T], u: &[T], ctx: &CostContext<T>) -> Result<(Vec<T>, Vec<T>)> {
    ctx.check_dims(x_next, u)?;
    let two = T::of(2.0);
    let mut gx: Vec<T> = (0..x_next.len())
        .map(|i| two * ctx.q[i] * (x_next[i] - ctx.x_ref[i]))
        .collect();
    let mut gu: Vec<T> = (0..u.len())
        .map(|i| two * ctx.r[i] * (u[i] - ctx.u_ref[i]))
        .collect();
    for con in &ctx.state_constraints {
        let v = con.violation(x_next);
        if v != T::zero() {
            let s = two * con.weight * v;
            for &(i, a) in &con.coeffs {
                gx[i] += s * a;
            }
        }
    }
    if let Some(p) = &ctx.input_penalty {
        for i in 0..u.len() {
            let v = (u[i] - p.upper[i]).max(T::zero()) + (u[i] - p.lower[i]).min(T::zero());
            gu[i] += two * p.weight * v;
        }
    }
    Ok((gx, gu))
}

/// `Σ_{h=0}^{H−1} c(x_{h+1}, u_h; r_{h+1})`
pub fn total_cost<T: Scalar>(traj_x: &[Vec<T>], traj_u: &[Vec<T>], ctx_seq: &[CostContext<T>]) -> Result<T> {
    let h = traj_u.len();
    if traj_x.len() != h + 1 || ctx_seq.len() != h {
        return Err(Error::invalid(format!(
            "total_cost needs H+1 states and H contexts for H = {h} inputs, got {} and {}",
            traj_x.len(),
            ctx_seq.len()
        )));
    }
    let mut total = T::zero();
    for k in 0..h {
        total += stage_cost(&traj_x[k + 1], &traj_u[k], &ctx_seq[k])?;
    }
    Ok(total)
}

/// One step of dynamics plus its stage cost and the control gradient
/// through the dynamics.
#[derive(Clone, Debug)]
pub struct StageEval<T> {
    pub x_next: Vec<T>,
    pub cost: T,
    /// `∂c/∂x'`
    pub grad_x_next: Vec<T>,
    /// `∂c/∂u + (∂c/∂x')·(∂f/∂u)`
    pub grad_u: Vec<T>,
}

pub fn eval_stage<T: Scalar>(
    model: &dyn SystemModel<T>,
    x: &[T],
    u: &[T],
    xi: &[T],
    ctx: &CostContext<T>,
) -> Result<StageEval<T>> {
    let x_next = model.step(x, u, xi)?;
    let cost = stage_cost(&x_next, u, ctx)?;
    let (gx, mut gu) = stage_cost_grads(&x_next, u, ctx)?;
    let through = model.vjp_u(x, u, xi, &gx)?;
    for (a, b) in gu.iter_mut().zip(&through) {
        *a += *b;
    }
    Ok(StageEval {
        x_next,
        cost,
        grad_x_next: gx,
        grad_u: gu,
    })
}

/// `∇_u c(f(x, u; ξ), u; r)`
pub fn grad_u_through_dynamics<T: Scalar>(
    model: &dyn SystemModel<T>,
    x: &[T],
    u: &[T],
    xi: &[T],
    ctx_next: &CostContext<T>,
) -> Result<Vec<T>> {
    Ok(eval_stage(model, x, u, xi, ctx_next)?.grad_u)
}

/// Squared weighted norm helper used by oracles and metrics.
pub fn weighted_sq<T: Scalar>(v: &[T], w: &[T]) -> T {
    let sq: Vec<T> = v.iter().map(|&a| a * a).collect();
    dot(&sq, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::double_integrator::DoubleIntegrator;
    use crate::numerics::fd::{finite_diff_gradient, rel_err};

    fn ctx2() -> CostContext<f64> {
        CostContext::quadratic(vec![1.0, 1.0], vec![0.0])
    }

    #[test]
    fn perfect_tracking_is_free() {
        let mut ctx = CostContext::quadratic(vec![2.0, 3.0], vec![0.5]);
        ctx.x_ref = vec![1.0, -1.0];
        ctx.u_ref = vec![0.2];
        assert_eq!(stage_cost(&[1.0, -1.0], &[0.2], &ctx).unwrap(), 0.0);
        let (gx, gu) = stage_cost_grads(&[1.0, -1.0], &[0.2], &ctx).unwrap();
        assert!(gx.iter().chain(&gu).all(|g| *g == 0.0));
    }

    #[test]
    fn euclidean_case() {
        assert_eq!(stage_cost(&[3.0, 4.0], &[7.0], &ctx2()).unwrap(), 25.0);
    }

    #[test]
    fn half_space_penalty_value() {
        let mut ctx = ctx2();
        ctx.q = vec![0.0, 0.0];
        ctx.state_constraints.push(LinearConstraint {
            coeffs: vec![(0, 1.0), (1, 0.0)],
            lower: Some(-1.0),
            upper: Some(1.0),
            weight: 100.0,
        });
        assert!((stage_cost(&[1.5, 0.0], &[0.0], &ctx).unwrap() - 25.0).abs() < 1e-12);
        assert!((stage_cost(&[-1.5, 0.0], &[0.0], &ctx).unwrap() - 25.0).abs() < 1e-12);
        assert_eq!(stage_cost(&[0.5, 0.0], &[0.0], &ctx).unwrap(), 0.0);
    }

    #[test]
    fn quadratic_gradient_form() {
        let mut ctx = CostContext::quadratic(vec![2.0, 0.5], vec![1.0]);
        ctx.x_ref = vec![1.0, 1.0];
        let (gx, gu) = stage_cost_grads(&[2.0, 3.0], &[0.5], &ctx).unwrap();
        assert_eq!(gx, vec![4.0, 2.0]);
        assert_eq!(gu, vec![1.0]);
    }

    #[test]
    fn active_penalty_gradient_matches_finite_differences() {
        let mut ctx = CostContext::quadratic(vec![0.7, 1.3], vec![0.4, 0.2]);
        ctx.x_ref = vec![0.2, -0.1];
        ctx.state_constraints.push(LinearConstraint {
            coeffs: vec![(0, 0.6), (1, 0.8)],
            lower: Some(-0.3),
            upper: Some(0.3),
            weight: 50.0,
        });
        ctx.input_penalty = Some(InputPenalty {
            lower: vec![-1.0, -1.0],
            upper: vec![1.0, 1.0],
            weight: 20.0,
        });
        let z = [0.9, 0.7, 1.4, -0.2];
        let f = |z: &[f64]| stage_cost(&z[..2], &z[2..], &ctx);
        let fd = finite_diff_gradient(f, &z, 1e-6).unwrap();
        let (gx, gu) = stage_cost_grads(&z[..2], &z[2..], &ctx).unwrap();
        let analytic: Vec<f64> = gx.into_iter().chain(gu).collect();
        assert!(rel_err(&analytic, &fd) < 1e-6);
    }

    #[test]
    fn total_cost_cases() {
        let ctx = ctx2();
        let xs = vec![vec![0.0, 0.0], vec![1.0, 2.0]];
        let us = vec![vec![0.0]];
        assert_eq!(total_cost(&xs, &us, &[ctx.clone()]).unwrap(), stage_cost(&xs[1], &us[0], &ctx).unwrap());
        let zeros = vec![vec![0.0, 0.0]; 4];
        let uz = vec![vec![0.0]; 3];
        assert_eq!(total_cost(&zeros, &uz, &vec![ctx.clone(); 3]).unwrap(), 0.0);
        assert!(total_cost(&zeros, &uz, &vec![ctx; 2]).is_err());
    }

    #[test]
    fn three_step_double_integrator_sum() {
        let m = DoubleIntegrator::new(1, 0.1, 10.0);
        let ctx = CostContext::quadratic(vec![1.0, 0.5], vec![0.1]);
        let us = [vec![1.0], vec![-0.5], vec![0.25]];
        let mut xs = vec![vec![0.3, -0.2]];
        for u in &us {
            let next = m.step(xs.last().unwrap(), u, &[]).unwrap();
            xs.push(next);
        }
        // hand-summed: x1 = [0.285, -0.1], x2 = [0.2725, -0.15], x3 = [0.25875, -0.125]
        let expected = (0.285f64.powi(2) + 0.5 * 0.01 + 0.1)
            + (0.2725f64.powi(2) + 0.5 * 0.0225 + 0.1 * 0.25)
            + (0.25875f64.powi(2) + 0.5 * 0.125f64.powi(2) + 0.1 * 0.0625);
        let total = total_cost(&xs, &us, &vec![ctx; 3]).unwrap();
        assert!((total - expected).abs() < 1e-12, "{total} vs {expected}");
    }

    #[test]
    fn zero_weights_give_zero_chain_gradient() {
        let m = DoubleIntegrator::new(1, 0.1, 10.0);
        let ctx = CostContext::quadratic(vec![0.0, 0.0], vec![0.0]);
        let g = grad_u_through_dynamics(&m, &[1.0, 2.0], &[0.3], &[], &ctx).unwrap();
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn double_integrator_chain_rule_by_hand() {
        let dt = 0.1;
        let m = DoubleIntegrator::new(1, dt, 10.0);
        let mut ctx = CostContext::quadratic(vec![1.0, 1.0], vec![0.0]);
        ctx.x_ref = vec![0.5, -0.5];
        let (x, u) = ([1.0, 2.0], [0.3]);
        let xn = [1.0 + 2.0 * dt + 0.5 * 0.3 * dt * dt, 2.0 + 0.3 * dt];
        let expected = 2.0 * (0.5 * dt * dt * (xn[0] - 0.5) + dt * (xn[1] + 0.5));
        let g = grad_u_through_dynamics(&m, &x, &u, &[], &ctx).unwrap();
        assert!((g[0] - expected).abs() < 1e-12);
    }
}
