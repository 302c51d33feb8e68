//! Randomized finite-difference checks of the analytic derivatives.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cost::CostContext;
use crate::env::double_integrator::DoubleIntegrator;
use crate::env::registry::{build_benchmark, EnvConfig, DOUBLE_INTEGRATOR};
use crate::env::InitDistribution;
use crate::error::{Error, Result};
use crate::layer::{draw_noise, layer_backward, layer_forward_with_noise, DistributionParams, LayerMode};
use crate::numerics::fd::{finite_diff_gradient, finite_diff_jacobian, rel_err};
use crate::numerics::linalg::{tri_index, tri_len, CholeskyFactor, Matrix};
use crate::numerics::RngStream;
use crate::policy::{policy_backward, policy_forward, policy_init, Activation, Normalizer, PolicyParams, PolicyShape};
use crate::training::{rollout_noise, stepmppi_rollout_loss, LossSettings};

const FD_STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradcheckScope {
    Layer,
    Policy,
    Rollout,
}

impl FromStr for GradcheckScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(Self::Layer),
            "policy" => Ok(Self::Policy),
            "rollout" => Ok(Self::Rollout),
            other => Err(Error::NotFound {
                kind: "gradcheck scope",
                name: other.into(),
                available: vec!["layer".into(), "policy".into(), "rollout".into()],
            }),
        }
    }
}

impl fmt::Display for GradcheckScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Layer => "layer",
            Self::Policy => "policy",
            Self::Rollout => "rollout",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub scope: GradcheckScope,
    pub tolerance: f64,
    /// Maximum relative error of each trial.
    pub errors: Vec<f64>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Layer Jacobians of one random instance: `n_u ∈ {1, 2, 3}`, `K ∈ {1, 4, 16}`.
pub fn layer_trial(rng: &mut ChaCha8Rng, stream: &RngStream) -> Result<f64> {
    let n = rng.random_range(1..=3usize);
    let k = [1, 4, 16][rng.random_range(0..3usize)];
    let model = DoubleIntegrator::<f64>::new(n, 0.1, 10.0);
    let x: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ctx = CostContext::quadratic(
        (0..2 * n).map(|_| rng.random_range(0.5..2.0)).collect(),
        (0..n).map(|_| rng.random_range(0.01..0.1)).collect(),
    );
    let mu: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            l[(i, j)] = rng.random_range(-0.3..0.3);
        }
        l[(i, i)] = rng.random_range(0.3..1.0);
    }
    let lambda = rng.random_range(0.05..1.0);
    let eps = draw_noise::<f64>(&stream.keyed(), k, n);
    let z = DistributionParams::new(mu.clone(), CholeskyFactor::from_matrix(l.clone())?)?;
    let forward = |m: &[f64], lm: &Matrix<f64>| -> Result<Vec<f64>> {
        let z = DistributionParams::new(m.to_vec(), CholeskyFactor::from_matrix(lm.clone())?)?;
        Ok(layer_forward_with_noise(&z, &x, &[], &ctx, &model, eps.clone(), lambda, LayerMode::Train)?.0)
    };
    let (_, tape) = layer_forward_with_noise(&z, &x, &[], &ctx, &model, eps.clone(), lambda, LayerMode::Train)?;
    let jac = layer_backward(&tape, &z)?;
    let fd_mu = finite_diff_jacobian(|m| forward(m, &l), &mu, FD_STEP)?;
    let packed: Vec<f64> = (0..tri_len(n))
        .map(|t| {
            let (i, j) = unpack(t);
            l[(i, j)]
        })
        .collect();
    let fd_l = finite_diff_jacobian(
        |p| {
            let mut lm = Matrix::zeros(n, n);
            for (t, &v) in p.iter().enumerate() {
                let (i, j) = unpack(t);
                lm[(i, j)] = v;
            }
            forward(&mu, &lm)
        },
        &packed,
        FD_STEP,
    )?;
    Ok(rel_err(jac.j_mu.as_slice(), fd_mu.as_slice()).max(rel_err(jac.j_l.as_slice(), fd_l.as_slice())))
}

/// Inverse of [`tri_index`].
fn unpack(t: usize) -> (usize, usize) {
    let mut i = 0;
    while tri_index(i + 1, 0) <= t {
        i += 1;
    }
    (i, t - tri_index(i, 0))
}

fn random_policy(rng: &mut ChaCha8Rng, input_dim: usize, n_u: usize, hidden: usize) -> Result<PolicyParams<f64>> {
    let shape = PolicyShape {
        input_dim,
        hidden: vec![hidden, hidden],
        activation: Activation::Tanh,
        u_lower: vec![-10.0; n_u],
        u_upper: vec![10.0; n_u],
        chol_head: true,
        diag_floor: 1e-4,
    };
    let mut p = policy_init(shape, &vec![1.0; n_u], rng)?;
    for v in p.flat_mut() {
        *v += rng.random_range(-0.1..0.1);
    }
    Ok(p)
}

/// Policy parameter gradient of a random linear functional of `(μ, L)`.
pub fn policy_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n_u = rng.random_range(1..=3usize);
    let p = random_policy(rng, 4, n_u, 16)?;
    let input: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
    let gm: Vec<f64> = (0..n_u).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut gl = Matrix::zeros(n_u, n_u);
    for i in 0..n_u {
        for j in 0..=i {
            gl[(i, j)] = rng.random_range(-1.0..1.0);
        }
    }
    let objective = |q: &PolicyParams<f64>| -> Result<f64> {
        let (z, _) = policy_forward(q, &input)?;
        let lm = z.l.matrix();
        let mut s: f64 = z.mu.iter().zip(&gm).map(|(a, b)| a * b).sum();
        for i in 0..n_u {
            for j in 0..=i {
                s += gl[(i, j)] * lm[(i, j)];
            }
        }
        Ok(s)
    };
    let (_, tape) = policy_forward(&p, &input)?;
    let (grad, _) = policy_backward(&p, &tape, &gm, &gl)?;
    let fd = finite_diff_gradient(
        |theta| objective(&PolicyParams::from_flat(p.shape().clone(), theta.to_vec())?),
        p.flat(),
        FD_STEP,
    )?;
    Ok(rel_err(&grad, &fd))
}

/// End-to-end Step-MPPI loss gradient on the double integrator with `H = 5`, `K = 4` and a 2×16 net.
pub fn rollout_trial(rng: &mut ChaCha8Rng, stream: &RngStream) -> Result<f64> {
    let bench = build_benchmark::<f64>(DOUBLE_INTEGRATOR, &EnvConfig::default())?;
    let (hz, k) = (5, 4);
    let p = random_policy(rng, 2, 1, 16)?;
    let norm = Normalizer::identity(2);
    let inst = bench.sample_instance(rng, InitDistribution::InDistribution, hz, 10)?;
    let noise = rollout_noise(&stream.keyed(), hz, k, 1);
    let settings = LossSettings {
        horizon: hz,
        lambda: 1.0,
        gamma: 1e-2,
        truncated: false,
    };
    let out = stepmppi_rollout_loss(&p, &norm, &bench, &inst, &settings, &noise)?;
    let fd = finite_diff_gradient(
        |theta| {
            let q = PolicyParams::from_flat(p.shape().clone(), theta.to_vec())?;
            Ok(stepmppi_rollout_loss(&q, &norm, &bench, &inst, &settings, &noise)?.loss)
        },
        p.flat(),
        FD_STEP,
    )?;
    Ok(rel_err(&out.grad, &fd))
}

pub fn gradcheck(scope: GradcheckScope, trials: usize, tolerance: f64, seed: u64) -> Result<GradcheckReport> {
    let root = RngStream::new(seed, format!("gradcheck/{scope}"));
    let errors = (0..trials)
        .map(|t| {
            let mut rng = root.rng(t as u64);
            let noise = root.derive(t);
            match scope {
                GradcheckScope::Layer => layer_trial(&mut rng, &noise),
                GradcheckScope::Policy => policy_trial(&mut rng),
                GradcheckScope::Rollout => rollout_trial(&mut rng, &noise),
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let passed = errors.iter().all(|e| *e < tolerance);
    Ok(GradcheckReport {
        scope,
        tolerance,
        errors,
        passed,
    })
}
