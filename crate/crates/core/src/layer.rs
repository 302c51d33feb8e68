//! Single-step MPPI as a differentiable layer.
//!
//! Forward: `u^(k) = μ + L ε^(k)`, `s_k = c(f(x, u^(k); ξ), u^(k); r)`,
//! `w = softmax(−s/λ)`, `u = Σ_k w_k u^(k)`.
//!
//! Backward, with the noises frozen and `g_k = ∇_u s_k`:
//!
//! * `∂w_k/∂μ = −(1/λ)·w_k·(g_k − Σ_j w_j g_j)`
//! * `∂w_k/∂L = −(1/λ)·w_k·(g_k ε_kᵀ − Σ_j w_j g_j ε_jᵀ)`
//!
//! For an upstream vector `v`, with `a_k = v·u^(k)` and
//! `β_k = −(1/λ)·w_k·(a_k − Σ_j w_j a_j)`, the vector-Jacobian products are
//! `v + Σ β_k g_k` for `μ` and `tril(Σ_k (w_k v + β_k g_k) ε_kᵀ)` for `L`.
//! `β` is also the cotangent of the sample costs, which is how gradients
//! reach the state the layer was evaluated at.

use rayon::prelude::*;

use crate::cost::{eval_stage, stage_cost, CostContext};
use crate::env::SystemModel;
use crate::error::{Error, Result};
use crate::numerics::gaussian::softmax_neg_scaled;
use crate::numerics::linalg::{tri_index, tri_len, CholeskyFactor, Matrix};
use crate::numerics::rng::{fill_normals, KeyedStream};
use crate::scalar::Scalar;

/// `z = (μ, L)`
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionParams<T: Scalar> {
    pub mu: Vec<T>,
    pub l: CholeskyFactor<T>,
}

impl<T: Scalar> DistributionParams<T> {
    pub fn new(mu: Vec<T>, l: CholeskyFactor<T>) -> Result<Self> {
        if mu.len() != l.dim() {
            return Err(Error::invalid("mean and Cholesky factor dimensions disagree"));
        }
        Ok(Self { mu, l })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sample(&self, eps: &[T]) -> Vec<T> {
        let mut u = self.l.mul_vec(eps);
        for (a, &m) in u.iter_mut().zip(&self.mu) {
            *a += m;
        }
        u
    }
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTape<T> {
    pub eps: Vec<Vec<T>>,
    pub samples: Vec<Vec<T>>,
    pub next_states: Vec<Vec<T>>,
    pub costs: Vec<T>,
    pub weights: Vec<T>,
    /// `∇_u s_k` through the dynamics; empty when recorded without gradients.
    pub cost_grads: Vec<Vec<T>>,
    /// `∂c/∂x'` per sample; empty when recorded without gradients.
    pub next_state_grads: Vec<Vec<T>>,
    pub lambda: T,
}

impl<T: Scalar> LayerTape<T> {
    pub fn k(&self) -> usize {
        self.eps.len()
    }

    fn check(&self, z: &DistributionParams<T>) -> Result<()> {
        let n = z.dim();
        let k = self.k();
        if k == 0
            || self.samples.len() != k
            || self.weights.len() != k
            || self.cost_grads.len() != k
            || self.eps.iter().chain(&self.samples).chain(&self.cost_grads).any(|v| v.len() != n)
        {
            return Err(Error::invalid("layer tape does not match the distribution parameters"));
        }
        Ok(())
    }
}

/// Whether the forward pass records per-sample gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerMode {
    Train,
    Inference,
}

/// Draws `k` noise vectors, one sub-stream per sample.
pub fn draw_noise<T: Scalar>(stream: &KeyedStream, k: usize, n: usize) -> Vec<Vec<T>> {
    (0..k).map(|i| fill_normals(&mut stream.rng(i as u64), n)).collect()
}

/// Forward pass with caller-supplied noises.
#[allow(clippy::too_many_arguments)]
pub fn layer_forward_with_noise<T: Scalar>(
    z: &DistributionParams<T>,
    x: &[T],
    xi: &[T],
    ctx_next: &CostContext<T>,
    model: &dyn SystemModel<T>,
    eps: Vec<Vec<T>>,
    lambda: T,
    mode: LayerMode,
) -> Result<(Vec<T>, LayerTape<T>)> {
    if eps.is_empty() {
        return Err(Error::invalid("layer needs at least one sample"));
    }
    if eps.iter().any(|e| e.len() != z.dim()) {
        return Err(Error::invalid("noise dimension does not match the distribution"));
    }
    let samples: Vec<Vec<T>> = eps.iter().map(|e| z.sample(e)).collect();
    type Eval<T> = (Vec<T>, T, Vec<T>, Vec<T>);
    let evals: Vec<Eval<T>> = samples
        .par_iter()
        .enumerate()
        .map(|(k, u)| -> Result<Eval<T>> {
            match mode {
                LayerMode::Train => {
                    let s = eval_stage(model, x, u, xi, ctx_next).map_err(|e| e.with_sample(k))?;
                    Ok((s.x_next, s.cost, s.grad_u, s.grad_x_next))
                }
                LayerMode::Inference => {
                    let xn = model.step(x, u, xi).map_err(|e| e.with_sample(k))?;
                    let c = stage_cost(&xn, u, ctx_next)?;
                    Ok((xn, c, Vec::new(), Vec::new()))
                }
            }
        })
        .collect::<Result<_>>()?;
    let mut tape = LayerTape {
        eps,
        samples,
        next_states: Vec::with_capacity(evals.len()),
        costs: Vec::with_capacity(evals.len()),
        weights: Vec::new(),
        cost_grads: Vec::new(),
        next_state_grads: Vec::new(),
        lambda,
    };
    for (xn, c, gu, gx) in evals {
        tape.next_states.push(xn);
        tape.costs.push(c);
        if mode == LayerMode::Train {
            tape.cost_grads.push(gu);
            tape.next_state_grads.push(gx);
        }
    }
    if let Some(k) = tape.costs.iter().position(|c| !c.is_finite()) {
        return Err(Error::DivergedState { step: 0, sample: Some(k) });
    }
    tape.weights = softmax_neg_scaled(&tape.costs, lambda)?.into_inner();
    let n = z.dim();
    let mut u = vec![T::zero(); n];
    for (w, s) in tape.weights.iter().zip(&tape.samples) {
        for i in 0..n {
            u[i] += *w * s[i];
        }
    }
    Ok((u, tape))
}

/// Forward pass drawing `k` noises from `stream`.
#[allow(clippy::too_many_arguments)]
pub fn layer_forward<T: Scalar>(
    z: &DistributionParams<T>,
    x: &[T],
    xi: &[T],
    ctx_next: &CostContext<T>,
    model: &dyn SystemModel<T>,
    k: usize,
    lambda: T,
    stream: &KeyedStream,
    mode: LayerMode,
) -> Result<(Vec<T>, LayerTape<T>)> {
    let eps = draw_noise(stream, k, z.dim());
    layer_forward_with_noise(z, x, xi, ctx_next, model, eps, lambda, mode)
}

/// Dense Jacobians of the layer output.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerJacobians<T: Scalar> {
    /// `∂u/∂μ`, `n × n`.
    pub j_mu: Matrix<T>,
    /// `∂u/∂L`, `n × n(n+1)/2` over packed lower-triangular entries.
    pub j_l: Matrix<T>,
    /// `∂w_k/∂μ`, `K × n`.
    pub dw_dmu: Matrix<T>,
    /// `∂w_k/∂L`, `K × n(n+1)/2`.
    pub dw_dl: Matrix<T>,
}

pub fn layer_backward<T: Scalar>(tape: &LayerTape<T>, z: &DistributionParams<T>) -> Result<LayerJacobians<T>> {
    tape.check(z)?;
    let n = z.dim();
    let m = tri_len(n);
    let k = tape.k();
    let inv_lambda = T::one() / tape.lambda;
    let w = &tape.weights;
    let mut g_bar = vec![T::zero(); n];
    let mut ge_bar = vec![T::zero(); m];
    for j in 0..k {
        for p in 0..n {
            g_bar[p] += w[j] * tape.cost_grads[j][p];
            for q in 0..=p {
                ge_bar[tri_index(p, q)] += w[j] * tape.cost_grads[j][p] * tape.eps[j][q];
            }
        }
    }
    let mut dw_dmu = Matrix::zeros(k, n);
    let mut dw_dl = Matrix::zeros(k, m);
    for j in 0..k {
        let s = -inv_lambda * w[j];
        let g = &tape.cost_grads[j];
        for p in 0..n {
            dw_dmu[(j, p)] = s * (g[p] - g_bar[p]);
            for q in 0..=p {
                let t = tri_index(p, q);
                dw_dl[(j, t)] = s * (g[p] * tape.eps[j][q] - ge_bar[t]);
            }
        }
    }
    let mut j_mu = Matrix::identity(n);
    let mut j_l = Matrix::zeros(n, m);
    for j in 0..k {
        let u = &tape.samples[j];
        for i in 0..n {
            for p in 0..n {
                j_mu[(i, p)] += u[i] * dw_dmu[(j, p)];
            }
            for t in 0..m {
                j_l[(i, t)] += u[i] * dw_dl[(j, t)];
            }
            // Pathwise term: ∂u^(k)_i/∂L_iq = ε_q.
            for q in 0..=i {
                j_l[(i, tri_index(i, q))] += w[j] * tape.eps[j][q];
            }
        }
    }
    Ok(LayerJacobians { j_mu, j_l, dw_dmu, dw_dl })
}

/// Vector-Jacobian product of the layer output.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads<T: Scalar> {
    pub mu: Vec<T>,
    /// Lower-triangular; strictly-upper entries are zero.
    pub l: Matrix<T>,
    /// Cotangent of the sample costs, `∂(vᵀu)/∂s_k`.
    pub cost_cotangent: Vec<T>,
}

pub fn layer_vjp<T: Scalar>(tape: &LayerTape<T>, z: &DistributionParams<T>, upstream: &[T]) -> Result<LayerGrads<T>> {
    tape.check(z)?;
    let n = z.dim();
    if upstream.len() != n {
        return Err(Error::invalid("upstream gradient has the wrong dimension"));
    }
    let k = tape.k();
    let w = &tape.weights;
    let a: Vec<T> = tape
        .samples
        .iter()
        .map(|u| u.iter().zip(upstream).fold(T::zero(), |acc, (&x, &y)| acc + x * y))
        .collect();
    let a_bar = w.iter().zip(&a).fold(T::zero(), |acc, (&wk, &ak)| acc + wk * ak);
    let inv_lambda = T::one() / tape.lambda;
    let beta: Vec<T> = (0..k).map(|j| -inv_lambda * w[j] * (a[j] - a_bar)).collect();
    let mut mu = upstream.to_vec();
    let mut l = Matrix::zeros(n, n);
    for j in 0..k {
        let g = &tape.cost_grads[j];
        let coef: Vec<T> = (0..n).map(|p| w[j] * upstream[p] + beta[j] * g[p]).collect();
        for p in 0..n {
            mu[p] += beta[j] * g[p];
            for q in 0..=p {
                l[(p, q)] += coef[p] * tape.eps[j][q];
            }
        }
    }
    Ok(LayerGrads {
        mu,
        l,
        cost_cotangent: beta,
    })
}

/// `Σ_k β_k ∂s_k/∂x` for cost cotangents `β`: the layer's dependence on the
/// state it was evaluated at, through the sample weights.
pub fn layer_state_vjp<T: Scalar>(
    tape: &LayerTape<T>,
    model: &dyn SystemModel<T>,
    x: &[T],
    xi: &[T],
    cost_cotangent: &[T],
) -> Result<Vec<T>> {
    if tape.next_state_grads.len() != tape.k() || cost_cotangent.len() != tape.k() {
        return Err(Error::invalid("tape was recorded without gradients"));
    }
    let n = x.len();
    let parts: Vec<Vec<T>> = (0..tape.k())
        .into_par_iter()
        .filter(|&j| cost_cotangent[j] != T::zero())
        .map(|j| {
            let cot: Vec<T> = tape.next_state_grads[j].iter().map(|&g| g * cost_cotangent[j]).collect();
            model.vjp_x(x, &tape.samples[j], xi, &cot)
        })
        .collect::<Result<_>>()?;
    let mut out = vec![T::zero(); n];
    for p in parts {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    Ok(out)
}
