//! Finite-horizon rollout losses and their exact gradients.
//!
//! Both losses roll the closed loop forward for `H` steps from an instance,
//! keep every intermediate value, then run reverse-mode accumulation back to
//! `x₀`. The state cotangent `∂loss/∂x_h` collects three paths: the dynamics
//! Jacobian, the layer's sample costs, and the policy input.

use crate::cost::{stage_cost, stage_cost_grads};
use crate::env::{Benchmark, Instance};
use crate::error::{Error, Result};
use crate::layer::{layer_forward_with_noise, layer_state_vjp, layer_vjp, DistributionParams, LayerMode, LayerTape};
use crate::numerics::gaussian::{entropy_grad_l, gaussian_entropy};
use crate::numerics::rng::{fill_normals, KeyedStream};
use crate::policy::{dpc_backward, dpc_forward, policy_backward, policy_forward, Normalizer, PolicyParams, PolicyTape};
use crate::scalar::Scalar;

/// Settings shared by both rollout losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub horizon: usize,
    pub lambda: f64,
    pub gamma: f64,
    /// Drops every gradient path through the state, leaving per-step terms only.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutLoss<T> {
    /// `(1/H) Σ_h [c_h − γ·H(z_h)]`
    pub loss: T,
    pub grad: Vec<T>,
    pub mean_cost: T,
    /// Zero for DPC.
    pub mean_entropy: T,
}

/// `noise[h][k]` for a rollout of `horizon` steps with `k` samples of dimension `n`.
pub fn rollout_noise<T: Scalar>(stream: &KeyedStream, horizon: usize, k: usize, n: usize) -> Vec<Vec<Vec<T>>> {
    (0..horizon)
        .map(|h| {
            (0..k)
                .map(|j| fill_normals(&mut stream.rng((h * k + j) as u64), n))
                .collect()
        })
        .collect()
}

fn check_instance<T: Scalar>(bench: &Benchmark<T>, instance: &Instance<T>, horizon: usize) -> Result<()> {
    if horizon == 0 || instance.horizon.len() < horizon {
        return Err(Error::invalid(format!(
            "rollout of {horizon} steps needs as many contexts, instance has {}",
            instance.horizon.len()
        )));
    }
    if instance.x0.len() != bench.model.state_dim() {
        return Err(Error::invalid("instance state dimension differs from the model"));
    }
    Ok(())
}

struct StepRecord<T: Scalar> {
    x: Vec<T>,
    ptape: PolicyTape<T>,
    z: Option<DistributionParams<T>>,
    ltape: Option<LayerTape<T>>,
    u: Vec<T>,
    x_next: Vec<T>,
}

/// Adds `(∂f/∂x)ᵀ a` etc. for the transition `x → x'` under `u`, returning
/// `(∂loss/∂u, ∂loss/∂x)` of the stage given `a = ∂loss/∂x'` from later steps.
fn stage_backward<T: Scalar>(
    bench: &Benchmark<T>,
    instance: &Instance<T>,
    h: usize,
    rec: &StepRecord<T>,
    scale: T,
    later: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    let ctx = &instance.horizon.contexts[h];
    let xi = &instance.horizon.params[h];
    let (gxn, gu) = stage_cost_grads(&rec.x_next, &rec.u, ctx)?;
    let a: Vec<T> = gxn.iter().zip(later).map(|(&g, &l)| scale * g + l).collect();
    let mut grad_u: Vec<T> = gu.iter().map(|&g| scale * g).collect();
    for (o, v) in grad_u.iter_mut().zip(bench.model.vjp_u(&rec.x, &rec.u, xi, &a)?) {
        *o += v;
    }
    let grad_x = bench.model.vjp_x(&rec.x, &rec.u, xi, &a)?;
    Ok((grad_u, grad_x))
}

fn add_into<T: Scalar>(acc: &mut [T], v: &[T]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += *b;
    }
}

/// Step-MPPI loss with noises `noise[h][k]` frozen for the whole forward/backward pair.
pub fn stepmppi_rollout_loss<T: Scalar>(
    params: &PolicyParams<T>,
    normalizer: &Normalizer,
    bench: &Benchmark<T>,
    instance: &Instance<T>,
    settings: &LossSettings,
    noise: &[Vec<Vec<T>>],
) -> Result<RolloutLoss<T>> {
    let hz = settings.horizon;
    check_instance(bench, instance, hz)?;
    if noise.len() < hz {
        return Err(Error::invalid("noise must cover every rollout step"));
    }
    let model = bench.model.as_ref();
    let task = bench.task.as_ref();
    let lambda = T::of(settings.lambda);
    let gamma = T::of(settings.gamma);
    let scale = T::one() / T::of(hz as f64);

    let mut records = Vec::with_capacity(hz);
    let mut x = instance.x0.clone();
    let (mut cost_sum, mut ent_sum) = (T::zero(), T::zero());
    for h in 0..hz {
        let ctx = &instance.horizon.contexts[h];
        let xi = &instance.horizon.params[h];
        let input = normalizer.apply(&task.features(&x, ctx, xi));
        let (z, ptape) = policy_forward(params, &input)?;
        let (u, ltape) = layer_forward_with_noise(&z, &x, xi, ctx, model, noise[h].clone(), lambda, LayerMode::Train)
            .map_err(|e| e.at_step(h))?;
        let x_next = model.step(&x, &u, xi).map_err(|e| e.at_step(h))?;
        cost_sum += stage_cost(&x_next, &u, ctx)?;
        ent_sum += gaussian_entropy(&z.l)?;
        records.push(StepRecord {
            x: std::mem::replace(&mut x, x_next.clone()),
            ptape,
            z: Some(z),
            ltape: Some(ltape),
            u,
            x_next,
        });
    }
    let loss = scale * (cost_sum - gamma * ent_sum);
    if !loss.is_finite() {
        return Err(Error::DivergedState { step: hz, sample: None });
    }

    let mut grad = vec![T::zero(); params.len()];
    let mut later = vec![T::zero(); model.state_dim()];
    for h in (0..hz).rev() {
        let rec = &records[h];
        let ltape = rec.ltape.as_ref().expect("training tape");
        let z = rec.z.as_ref().expect("training distribution");
        let ctx = &instance.horizon.contexts[h];
        let xi = &instance.horizon.params[h];
        let (grad_u, mut grad_x) = stage_backward(bench, instance, h, rec, scale, &later)?;
        let lg = layer_vjp(ltape, z, &grad_u)?;
        let mut grad_l = lg.l;
        if gamma != T::zero() {
            let eg = entropy_grad_l(&z.l)?;
            for i in 0..grad_l.rows() {
                for j in 0..=i {
                    grad_l[(i, j)] -= gamma * scale * eg[(i, j)];
                }
            }
        }
        let (gp, gin) = policy_backward(params, &rec.ptape, &lg.mu, &grad_l)?;
        add_into(&mut grad, &gp);
        if settings.truncated {
            continue;
        }
        add_into(&mut grad_x, &layer_state_vjp(ltape, model, &rec.x, xi, &lg.cost_cotangent)?);
        add_into(&mut grad_x, &task.features_vjp(&rec.x, ctx, xi, &normalizer.backward(&gin)));
        later = grad_x;
    }
    Ok(RolloutLoss {
        loss,
        grad,
        mean_cost: scale * cost_sum,
        mean_entropy: scale * ent_sum,
    })
}

/// DPC loss: the policy's mean head drives the system directly.
pub fn dpc_rollout_loss<T: Scalar>(
    params: &PolicyParams<T>,
    normalizer: &Normalizer,
    bench: &Benchmark<T>,
    instance: &Instance<T>,
    settings: &LossSettings,
) -> Result<RolloutLoss<T>> {
    let hz = settings.horizon;
    check_instance(bench, instance, hz)?;
    let model = bench.model.as_ref();
    let task = bench.task.as_ref();
    let scale = T::one() / T::of(hz as f64);

    let mut records = Vec::with_capacity(hz);
    let mut x = instance.x0.clone();
    let mut cost_sum = T::zero();
    for h in 0..hz {
        let ctx = &instance.horizon.contexts[h];
        let xi = &instance.horizon.params[h];
        let input = normalizer.apply(&task.features(&x, ctx, xi));
        let (u, ptape) = dpc_forward(params, &input)?;
        let x_next = model.step(&x, &u, xi).map_err(|e| e.at_step(h))?;
        cost_sum += stage_cost(&x_next, &u, ctx)?;
        records.push(StepRecord {
            x: std::mem::replace(&mut x, x_next.clone()),
            ptape,
            z: None,
            ltape: None,
            u,
            x_next,
        });
    }
    let loss = scale * cost_sum;
    if !loss.is_finite() {
        return Err(Error::DivergedState { step: hz, sample: None });
    }

    let mut grad = vec![T::zero(); params.len()];
    let mut later = vec![T::zero(); model.state_dim()];
    for h in (0..hz).rev() {
        let rec = &records[h];
        let (grad_u, mut grad_x) = stage_backward(bench, instance, h, rec, scale, &later)?;
        let (gp, gin) = dpc_backward(params, &rec.ptape, &grad_u)?;
        add_into(&mut grad, &gp);
        if settings.truncated {
            continue;
        }
        let ctx = &instance.horizon.contexts[h];
        let xi = &instance.horizon.params[h];
        add_into(&mut grad_x, &task.features_vjp(&rec.x, ctx, xi, &normalizer.backward(&gin)));
        later = grad_x;
    }
    Ok(RolloutLoss {
        loss,
        grad,
        mean_cost: loss,
        mean_entropy: T::zero(),
    })
}
