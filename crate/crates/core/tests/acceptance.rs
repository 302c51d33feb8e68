//! Acceptance suite. Every criterion prints one PASS/FAIL line and the
//! process exits non-zero if any of them fails.
//!
//! Reference values come from oracles written here, not from the crate:
//! central differences, a Riccati recursion cross-checked against a batch
//! least-squares solve, and closed forms.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use stepmppi::cost::CostContext;
use stepmppi::env::double_integrator::DoubleIntegrator;
use stepmppi::env::registry::{build_benchmark, EnvConfig, BICYCLE_TRACK, DOUBLE_INTEGRATOR};
use stepmppi::env::{Benchmark, InitDistribution, SystemModel};
use stepmppi::eval::{compare, export, run_closed_loop, Comparison, ControllerSpec, ResolvedController, RunConfig};
use stepmppi::layer::{layer_backward, layer_forward_with_noise, DistributionParams, LayerMode};
use stepmppi::mppi::{sample_sequences, update_plan, MppiConfig, MppiPlan};
use stepmppi::numerics::{entropy_grad_l, gaussian_entropy, softmax_neg_scaled, CholeskyFactor, Matrix, RngStream};
use stepmppi::policy::{dpc_forward, policy_forward, policy_init, Activation, Checkpoint, PolicyParams, PolicyShape};
use stepmppi::training::{
    generate_dataset, policy_shape, rollout_noise, stepmppi_rollout_loss, train, LossSettings, Method, PolicyConfig,
    TrainConfig,
};

type Outcome = Result<String, String>;

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load_config(name: &str) -> Result<RunConfig, String> {
    RunConfig::load(&configs_dir().join(name)).map_err(fail)
}

// ---------------------------------------------------------------------------
// Oracles

/// Central-difference Jacobian, `out[i][j] = ∂f_i/∂θ_j`.
fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, theta: &[f64], h: f64) -> Vec<Vec<f64>> {
    let m = f(theta).len();
    let mut jac = vec![vec![0.0; theta.len()]; m];
    let mut p = theta.to_vec();
    for j in 0..theta.len() {
        p[j] = theta[j] + h;
        let fp = f(&p);
        p[j] = theta[j] - h;
        let fm = f(&p);
        p[j] = theta[j];
        for i in 0..m {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

fn fd_gradient(f: impl Fn(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    fd_jacobian(|p| vec![f(p)], theta, h).remove(0)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` in the Frobenius norm.
fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let s = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if s == 0.0 {
        0.0
    } else {
        d / s
    }
}

type Dense = Vec<Vec<f64>>;

fn mat_mul(a: &Dense, b: &Dense) -> Dense {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| (0..m).map(|j| (0..k).map(|p| a[i][p] * b[p][j]).sum()).collect())
        .collect()
}

fn transpose(a: &Dense) -> Dense {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

fn mat_add(a: &Dense, b: &Dense) -> Dense {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn diag(d: &[f64]) -> Dense {
    (0..d.len()).map(|i| (0..d.len()).map(|j| if i == j { d[i] } else { 0.0 }).collect()).collect()
}

/// Solves `A X = B` by Gauss-Jordan elimination with partial pivoting.
fn solve(a: &Dense, b: &Dense) -> Dense {
    let n = a.len();
    let m = b[0].len();
    let mut aug: Dense = a.iter().zip(b).map(|(r, s)| r.iter().chain(s).copied().collect()).collect();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| aug[i][c].abs().total_cmp(&aug[j][c].abs())).unwrap();
        aug.swap(c, p);
        let piv = aug[c][c];
        for v in aug[c].iter_mut() {
            *v /= piv;
        }
        for r in 0..n {
            if r != c {
                let f = aug[r][c];
                if f != 0.0 {
                    for k in 0..n + m {
                        aug[r][k] -= f * aug[c][k];
                    }
                }
            }
        }
    }
    aug.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// Linear-quadratic data of a regulation benchmark, `A` and `B` by central differences at the origin.
struct LqProblem {
    a: Dense,
    b: Dense,
    q: Vec<f64>,
    r: Vec<f64>,
}

impl LqProblem {
    fn of(bench: &Benchmark<f64>) -> Self {
        let (nx, nu) = (bench.model.state_dim(), bench.model.input_dim());
        let zx = vec![0.0; nx];
        let hd = bench.task.horizon(&zx, 0, 1);
        let xi = hd.params[0].clone();
        let ctx = hd.contexts[0].clone();
        let step = |x: &[f64], u: &[f64]| bench.model.step(x, u, &xi).unwrap();
        let a = fd_jacobian(|x| step(x, &vec![0.0; nu]), &zx, 1e-3);
        let b = fd_jacobian(|u| step(&zx, u), &vec![0.0; nu], 1e-3);
        Self { a, b, q: ctx.q, r: ctx.r }
    }

    /// `P_0` of `min Σ_{t<N} x_{t+1}ᵀ Q x_{t+1} + u_tᵀ R u_t`, by backward Riccati recursion.
    fn riccati_p0(&self, n: usize) -> Dense {
        let nx = self.a.len();
        let (q, r) = (diag(&self.q), diag(&self.r));
        let mut p = vec![vec![0.0; nx]; nx];
        for _ in 0..n {
            let s = mat_add(&q, &p);
            let bt_s = mat_mul(&transpose(&self.b), &s);
            let gain = solve(&mat_add(&r, &mat_mul(&bt_s, &self.b)), &mat_mul(&bt_s, &self.a));
            let at_s = mat_mul(&transpose(&self.a), &s);
            let ata = mat_mul(&at_s, &self.a);
            let atb_k = mat_mul(&mat_mul(&at_s, &self.b), &gain);
            p = ata.iter().zip(&atb_k).map(|(x, y)| x.iter().zip(y).map(|(a, b)| a - b).collect()).collect();
        }
        p
    }

    /// Optimal cost from `x0` by stacking the whole horizon into one least-squares problem.
    fn batch_cost(&self, x0: &[f64], n: usize) -> f64 {
        let (nx, nu) = (self.a.len(), self.b[0].len());
        // x_{t+1} = A^{t+1} x0 + Σ_{s≤t} A^{t−s} B u_s
        let mut powers = vec![diag(&vec![1.0; nx])];
        for _ in 0..n {
            let next = mat_mul(&self.a, powers.last().unwrap());
            powers.push(next);
        }
        let dim = n * nu;
        let mut h = vec![vec![0.0; dim]; dim];
        let mut g = vec![vec![0.0]; dim];
        for i in 0..dim {
            h[i][i] += self.r[i % nu];
        }
        for t in 0..n {
            let free: Vec<f64> = mat_mul(&powers[t + 1], &x0.iter().map(|v| vec![*v]).collect()).iter().map(|r| r[0]).collect();
            let blocks: Vec<Dense> = (0..=t).map(|s| mat_mul(&powers[t - s], &self.b)).collect();
            for (s1, b1) in blocks.iter().enumerate() {
                for c1 in 0..nu {
                    for k in 0..nx {
                        g[s1 * nu + c1][0] += b1[k][c1] * self.q[k] * free[k];
                    }
                    for (s2, b2) in blocks.iter().enumerate() {
                        for c2 in 0..nu {
                            h[s1 * nu + c1][s2 * nu + c2] += (0..nx).map(|k| b1[k][c1] * self.q[k] * b2[k][c2]).sum::<f64>();
                        }
                    }
                }
            }
        }
        let u = solve(&h, &g);
        let mut x = x0.to_vec();
        let mut cost = 0.0;
        for t in 0..n {
            let ut: Vec<f64> = (0..nu).map(|c| -u[t * nu + c][0]).collect();
            x = (0..nx)
                .map(|i| (0..nx).map(|j| self.a[i][j] * x[j]).sum::<f64>() + (0..nu).map(|c| self.b[i][c] * ut[c]).sum::<f64>())
                .collect();
            cost += (0..nx).map(|i| self.q[i] * x[i] * x[i]).sum::<f64>() + (0..nu).map(|c| self.r[c] * ut[c] * ut[c]).sum::<f64>();
        }
        cost
    }
}

fn quad_form(p: &Dense, x: &[f64]) -> f64 {
    (0..x.len()).map(|i| (0..x.len()).map(|j| x[i] * p[i][j] * x[j]).sum::<f64>()).sum()
}

// ---------------------------------------------------------------------------
// Shared helpers

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Packed lower-triangular entries in row order: `(0,0), (1,0), (1,1), …`.
fn packed_entries(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (0..=i).map(move |j| (i, j))).collect()
}

fn lower_from_packed(n: usize, p: &[f64]) -> Matrix<f64> {
    let mut m = Matrix::zeros(n, n);
    for (v, (i, j)) in p.iter().zip(packed_entries(n)) {
        m[(i, j)] = *v;
    }
    m
}

fn random_lower(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    packed_entries(n)
        .into_iter()
        .map(|(i, j)| if i == j { rng.random_range(0.3..1.0) } else { rng.random_range(-0.3..0.3) })
        .collect()
}

fn trained(bench: &Benchmark<f64>, cfg: &RunConfig, method: Method) -> Result<Arc<Checkpoint<f64>>, String> {
    let mut tc = cfg.train.clone();
    tc.method = method;
    let data = generate_dataset(bench, tc.dataset_size, tc.horizon, InitDistribution::InDistribution, tc.seed).map_err(fail)?;
    let (ckpt, _) = train(bench, &tc, &data).map_err(fail)?;
    Ok(Arc::new(ckpt))
}

fn step_spec(samples: usize, lambda: f64) -> ControllerSpec {
    ControllerSpec::StepMppi {
        name: None,
        checkpoint: PathBuf::new(),
        samples,
        lambda,
    }
}

fn dpc_spec() -> ControllerSpec {
    ControllerSpec::Dpc {
        name: None,
        checkpoint: PathBuf::new(),
    }
}

/// Step-MPPI temperature and sample count configured in a run file.
fn configured_step(cfg: &RunConfig) -> (usize, f64) {
    cfg.controllers
        .iter()
        .find_map(|c| match c {
            ControllerSpec::StepMppi { samples, lambda, .. } => Some((*samples, *lambda)),
            _ => None,
        })
        .unwrap_or((64, 1.0))
}

fn configured_mppi(cfg: &RunConfig) -> MppiConfig {
    cfg.controllers
        .iter()
        .find_map(|c| match c {
            ControllerSpec::Mppi { mppi, .. } => Some(mppi.clone()),
            _ => None,
        })
        .unwrap_or_default()
}

fn mppi_spec(mppi: MppiConfig) -> ControllerSpec {
    ControllerSpec::Mppi { name: None, mppi }
}

fn resolve(bench: &Benchmark<f64>, spec: ControllerSpec, ckpt: Option<&Arc<Checkpoint<f64>>>) -> Result<ResolvedController<f64>, String> {
    match ckpt {
        Some(c) => ResolvedController::from_checkpoint(&spec, c.clone(), bench),
        None => ResolvedController::resolve(&spec, bench),
    }
    .map_err(fail)
}

fn metric(cmp: &Comparison<f64>, label: &str, name: &str) -> Result<f64, String> {
    cmp.aggregate(label)
        .and_then(|a| a.metric(name))
        .ok_or_else(|| format!("no {name} for {label}"))
}

// ---------------------------------------------------------------------------
// Criteria

/// Layer Jacobians against central differences with frozen noise.
fn criterion_1() -> Outcome {
    let start = Instant::now();
    let bicycle = build_benchmark::<f64>(BICYCLE_TRACK, &EnvConfig::default()).map_err(fail)?;
    let mut worst = 0.0f64;
    for i in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
        let n = [1, 2, 3][(i % 3) as usize];
        let k = [1, 4, 16][((i / 3) % 3) as usize];
        let lambda = rng.random_range(0.05..1.0);
        let eps: Vec<Vec<f64>> = (0..k).map(|_| normals(&mut rng, n)).collect();
        let (model, x, xi, ctx, mu): (Arc<dyn SystemModel<f64>>, Vec<f64>, Vec<f64>, CostContext<f64>, Vec<f64>) =
            if n == 2 && i % 2 == 1 {
                let inst = bicycle
                    .sample_instance(&mut rng, InitDistribution::InDistribution, 1, 100)
                    .map_err(fail)?;
                let mu = vec![rng.random_range(-1.0..1.0), rng.random_range(-0.2..0.2)];
                (bicycle.model.clone(), inst.x0, inst.horizon.params[0].clone(), inst.horizon.contexts[0].clone(), mu)
            } else {
                let x = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let ctx = CostContext::quadratic(
                    (0..2 * n).map(|_| rng.random_range(0.5..2.0)).collect(),
                    (0..n).map(|_| rng.random_range(0.01..0.1)).collect(),
                );
                let mu = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                (Arc::new(DoubleIntegrator::<f64>::new(n, 0.1, 10.0)), x, vec![], ctx, mu)
            };
        let lp = random_lower(&mut rng, n);
        let m = mu.len();
        let forward = |theta: &[f64]| -> Vec<f64> {
            let l = CholeskyFactor::from_matrix(lower_from_packed(n, &theta[m..])).unwrap();
            let z = DistributionParams::new(theta[..m].to_vec(), l).unwrap();
            layer_forward_with_noise(&z, &x, &xi, &ctx, model.as_ref(), eps.clone(), lambda, LayerMode::Train)
                .unwrap()
                .0
        };
        let theta: Vec<f64> = mu.iter().chain(&lp).copied().collect();
        let fd = fd_jacobian(forward, &theta, 1e-6);
        let z = DistributionParams::new(mu.clone(), CholeskyFactor::from_matrix(lower_from_packed(n, &lp)).map_err(fail)?)
            .map_err(fail)?;
        let (_, tape) =
            layer_forward_with_noise(&z, &x, &xi, &ctx, model.as_ref(), eps.clone(), lambda, LayerMode::Train).map_err(fail)?;
        let jac = layer_backward(&tape, &z).map_err(fail)?;
        let fd_mu: Vec<f64> = fd.iter().flat_map(|r| r[..m].to_vec()).collect();
        let fd_l: Vec<f64> = fd.iter().flat_map(|r| r[m..].to_vec()).collect();
        worst = worst
            .max(relative_error(jac.j_mu.as_slice(), &fd_mu))
            .max(relative_error(jac.j_l.as_slice(), &fd_l));
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("50 instances, worst rel. err {worst:.2e}, {secs:.2} s");
    if worst < 1e-5 && secs < 10.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Full BPTT gradient of the Step-MPPI loss against central differences.
fn criterion_2() -> Outcome {
    let start = Instant::now();
    let bench = build_benchmark::<f64>(DOUBLE_INTEGRATOR, &EnvConfig::default()).map_err(fail)?;
    let (hz, k) = (5, 4);
    let data = generate_dataset(&bench, 3, hz, InitDistribution::InDistribution, 3).map_err(fail)?;
    let pcfg = PolicyConfig {
        hidden: vec![16, 16],
        ..PolicyConfig::default()
    };
    let shape = policy_shape(&bench, &pcfg, Method::StepMppi);
    let mut worst = 0.0f64;
    let mut count = 0;
    for (i, inst) in data.instances.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(20 + i as u64);
        let mut p: PolicyParams<f64> = policy_init(shape.clone(), &[2.0], &mut rng).map_err(fail)?;
        for v in p.flat_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        let noise = rollout_noise(&RngStream::new(i as u64, "acceptance-bptt").keyed(), hz, k, 1);
        let settings = LossSettings {
            horizon: hz,
            lambda: 1.0,
            gamma: 1e-2,
            truncated: false,
        };
        let out = stepmppi_rollout_loss(&p, &data.normalizer, &bench, inst, &settings, &noise).map_err(fail)?;
        let fd = fd_gradient(
            |theta| {
                let q = PolicyParams::from_flat(shape.clone(), theta.to_vec()).unwrap();
                stepmppi_rollout_loss(&q, &data.normalizer, &bench, inst, &settings, &noise).unwrap().loss
            },
            p.flat(),
            1e-6,
        );
        worst = worst.max(relative_error(&out.grad, &fd));
        count = p.len();
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("H=5 K=4 2x16 net ({count} params), worst rel. err {worst:.2e}, {secs:.2} s");
    if worst < 1e-4 && secs < 60.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Entropy and its gradient against central differences and the closed form.
fn criterion_3() -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + i);
        let n = 1 + (i % 4) as usize;
        let lp = random_lower(&mut rng, n);
        let l = CholeskyFactor::from_matrix(lower_from_packed(n, &lp)).map_err(fail)?;
        let grad = entropy_grad_l(&l).map_err(fail)?;
        let analytic: Vec<f64> = packed_entries(n).into_iter().map(|(a, b)| grad[(a, b)]).collect();
        let fd = fd_gradient(
            |p| gaussian_entropy(&CholeskyFactor::from_matrix(lower_from_packed(n, p)).unwrap()).unwrap(),
            &lp,
            1e-6,
        );
        worst = worst.max(relative_error(&analytic, &fd));
    }
    let h_identity = gaussian_entropy(&CholeskyFactor::<f64>::identity(2)).map_err(fail)?;
    let closed = (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    let gap = (h_identity - closed).abs();
    let detail = format!("grad worst rel. err {worst:.2e}; H(I_2) − log(2πe) = {gap:.1e}");
    if worst < 1e-6 && gap <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Double-integrator closed-loop costs against the Riccati oracle.
fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut cfg = load_config("double_integrator.toml")?;
    cfg.episodes = 50;
    let bench = cfg.benchmark::<f64>().map_err(fail)?;
    let steps = cfg.episode_len(&bench);
    let lq = LqProblem::of(&bench);
    let p0 = lq.riccati_p0(steps);
    let mut mppi = configured_mppi(&cfg);
    mppi.samples = 4096;
    mppi.horizon = 20;
    mppi.iterations = 3;
    let (samples, lambda) = configured_step(&cfg);
    if samples != 64 {
        return Err(format!("configured Step-MPPI uses K = {samples}, not 64"));
    }
    let ckpt = trained(&bench, &cfg, Method::StepMppi)?;
    let controllers = vec![
        resolve(&bench, mppi_spec(mppi), None)?,
        resolve(&bench, step_spec(64, lambda), Some(&ckpt))?,
    ];
    let cmp = compare(&bench, &cfg, &controllers).map_err(fail)?;
    let x0s: Vec<&Vec<f64>> = cmp.controllers[0].runs.iter().map(|r| &r.states[0]).collect();
    let oracle: f64 = x0s.iter().map(|x| quad_form(&p0, x)).sum();
    let batch = lq.batch_cost(x0s[0], steps);
    let riccati_first = quad_form(&p0, x0s[0]);
    if (batch - riccati_first).abs() > 1e-8 * riccati_first.max(1.0) {
        return Err(format!("Riccati {riccati_first} and batch least squares {batch} disagree"));
    }
    let total = |i: usize| cmp.controllers[i].metrics.iter().map(|m| m.total_cost).sum::<f64>();
    let (r_mppi, r_step) = (total(0) / oracle, total(1) / oracle);
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("MPPI {r_mppi:.4}x (≤ 1.05), Step-MPPI {r_step:.4}x (≤ 1.10) of the oracle over 50 seeds, {secs:.0} s");
    if r_mppi <= 1.05 && r_step <= 1.10 && secs < 600.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Traffic final-accumulation orderings, in and out of distribution.
fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut cfg = load_config("traffic.toml")?;
    cfg.episodes = 20;
    let bench = cfg.benchmark::<f64>().map_err(fail)?;
    let step = trained(&bench, &cfg, Method::StepMppi)?;
    let dpc = trained(&bench, &cfg, Method::Dpc)?;
    let (samples, lambda) = configured_step(&cfg);
    let controllers = vec![
        resolve(&bench, ControllerSpec::Baseline { name: None, value: None }, None)?,
        resolve(&bench, dpc_spec(), Some(&dpc))?,
        resolve(&bench, step_spec(samples, lambda), Some(&step))?,
    ];
    let id = compare(&bench, &cfg, &controllers).map_err(fail)?;
    cfg.distribution = InitDistribution::OutOfDistribution;
    let ood = compare(&bench, &cfg, &controllers).map_err(fail)?;
    let fa = |c: &Comparison<f64>, l: &str| metric(c, l, "final_accumulation");
    let (base, d_id, s_id) = (fa(&id, "baseline")?, fa(&id, "dpc")?, fa(&id, "step-mppi")?);
    let (d_ood, s_ood) = (fa(&ood, "dpc")?, fa(&ood, "step-mppi")?);
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "ID baseline {base:.1}, DPC {d_id:.1}, Step-MPPI {s_id:.1}; OOD DPC {d_ood:.1}, Step-MPPI {s_ood:.1}; {secs:.0} s"
    );
    if s_id < base / 5.0 && d_id < base / 5.0 && s_ood < d_ood && secs < 900.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct BicyclePolicies {
    cfg: RunConfig,
    bench: Benchmark<f64>,
    step: Arc<Checkpoint<f64>>,
    dpc: Arc<Checkpoint<f64>>,
    train_secs: f64,
}

fn bicycle_policies() -> Result<BicyclePolicies, String> {
    let start = Instant::now();
    let cfg = load_config("bicycle.toml")?;
    let bench = cfg.benchmark::<f64>().map_err(fail)?;
    let step = trained(&bench, &cfg, Method::StepMppi)?;
    let dpc = trained(&bench, &cfg, Method::Dpc)?;
    Ok(BicyclePolicies {
        cfg,
        bench,
        step,
        dpc,
        train_secs: start.elapsed().as_secs_f64(),
    })
}

/// Mean per-step controller latency over at least `min_steps` sequential steps.
fn mean_latency(bench: &Benchmark<f64>, rc: &ResolvedController<f64>, cfg: &RunConfig, min_steps: usize) -> Result<f64, String> {
    let len = cfg.episode_len(bench);
    let x0s = stepmppi::eval::initial_states(bench, cfg.seed, cfg.distribution, 20).map_err(fail)?;
    let mut lat = Vec::new();
    for (e, x0) in x0s.iter().enumerate() {
        let mut c = rc.instantiate(bench, len).map_err(fail)?;
        c.reset(e as u64);
        let r = run_closed_loop(bench, c.as_mut(), x0, len.min(min_steps - lat.len())).map_err(fail)?;
        lat.extend(r.latencies);
        if lat.len() >= min_steps {
            return Ok(lat.iter().sum::<f64>() / lat.len() as f64);
        }
    }
    Err(format!("{} collected only {} steps", rc.label, lat.len()))
}

/// Bicycle latency ordering DPC < Step-MPPI (K = 512) < MPPI (N = 8192, H = 40).
fn criterion_6(p: &BicyclePolicies) -> Outcome {
    const MARGIN: f64 = 1.5;
    let mut mppi = configured_mppi(&p.cfg);
    mppi.samples = 8192;
    mppi.horizon = 40;
    let (_, lambda) = configured_step(&p.cfg);
    let dpc = resolve(&p.bench, dpc_spec(), Some(&p.dpc))?;
    let step = resolve(&p.bench, step_spec(512, lambda), Some(&p.step))?;
    let mppi = resolve(&p.bench, mppi_spec(mppi), None)?;
    let t_dpc = mean_latency(&p.bench, &dpc, &p.cfg, 500)? * 1e3;
    let t_step = mean_latency(&p.bench, &step, &p.cfg, 500)? * 1e3;
    let t_mppi = mean_latency(&p.bench, &mppi, &p.cfg, 500)? * 1e3;
    let detail = format!("DPC {t_dpc:.4} ms < Step-MPPI {t_step:.3} ms < MPPI {t_mppi:.1} ms (margin {MARGIN}x, 500 steps each)");
    if MARGIN * t_dpc < t_step && MARGIN * t_step < t_mppi {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Step-MPPI laps without departures; MPPI with 16x the samples tracks no better.
fn criterion_7(p: &BicyclePolicies) -> Outcome {
    let start = Instant::now();
    let mut cfg = p.cfg.clone();
    cfg.episodes = 20;
    let (_, lambda) = configured_step(&cfg);
    let mut mppi = configured_mppi(&cfg);
    mppi.samples = 16 * 64;
    let controllers = vec![
        resolve(&p.bench, step_spec(64, lambda), Some(&p.step))?,
        resolve(&p.bench, mppi_spec(mppi), None)?,
    ];
    let cmp = compare(&p.bench, &cfg, &controllers).map_err(fail)?;
    let step = cmp.aggregate("step-mppi").ok_or("missing step-mppi")?;
    let laps = (step.success_rate * step.episodes as f64).round() as usize;
    let departures = step.failures;
    let (e_step, e_mppi) = (metric(&cmp, "step-mppi", "mean_abs_cte")?, metric(&cmp, "mppi", "mean_abs_cte")?);
    let secs = start.elapsed().as_secs_f64() + p.train_secs;
    let detail = format!(
        "Step-MPPI {laps}/20 laps, {departures} departures, {} violations; |cte| Step-MPPI {e_step:.4} vs MPPI(N=1024) {e_mppi:.4}; {secs:.0} s",
        step.violations
    );
    if laps == 20 && departures == 0 && step.violations == 0 && e_mppi >= e_step && secs < 1200.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn small_di_run() -> Result<(Vec<u8>, Vec<u8>, Vec<u8>, Vec<u8>, String), String> {
    let mut cfg = load_config("double_integrator.toml")?;
    cfg.train = TrainConfig {
        epochs: 3,
        dataset_size: 32,
        horizon: 10,
        ..cfg.train
    };
    cfg.episodes = 4;
    cfg.episode_len = Some(20);
    let bench = cfg.benchmark::<f64>().map_err(fail)?;
    let data = generate_dataset(&bench, cfg.train.dataset_size, cfg.train.horizon, cfg.distribution, cfg.train.seed)
        .map_err(fail)?;
    let (ckpt, report) = train(&bench, &cfg.train, &data).map_err(fail)?;
    let dir = tempfile::tempdir().map_err(fail)?;
    report.write_csv(&dir.path().join("train.csv")).map_err(fail)?;
    let ckpt = Arc::new(ckpt);
    let mut mppi = configured_mppi(&cfg);
    mppi.samples = 256;
    let controllers = vec![
        resolve(&bench, step_spec(64, 1.0), Some(&ckpt))?,
        resolve(&bench, mppi_spec(mppi), None)?,
    ];
    let cmp = compare(&bench, &cfg, &controllers).map_err(fail)?;
    export(&cmp, dir.path(), true).map_err(fail)?;
    let read = |f: &str| std::fs::read(dir.path().join(f)).map_err(fail);
    // Wall-clock time is the only nondeterministic column of the training log.
    let train_csv: Vec<u8> = String::from_utf8(read("train.csv")?)
        .map_err(fail)?
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string() + "\n")
        .collect::<String>()
        .into_bytes();
    Ok((ckpt.to_bytes().map_err(fail)?, train_csv, read("episodes.csv")?, read("traces.csv")?, ckpt.digest().map_err(fail)?))
}

/// Two identical runs, the second on a single worker thread, agree byte for byte.
fn criterion_8() -> Outcome {
    let a = small_di_run()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(fail)?;
    let b = pool.install(small_di_run)?;
    let same = [("checkpoint", &a.0, &b.0), ("training CSV", &a.1, &b.1), ("episodes CSV", &a.2, &b.2), ("traces CSV", &a.3, &b.3)];
    let differing: Vec<&str> = same.iter().filter(|(_, x, y)| x != y).map(|(n, _, _)| *n).collect();
    if differing.is_empty() {
        Ok(format!("checkpoint {} and {} trace bytes identical across runs", &a.4[..16], a.3.len()))
    } else {
        Err(format!("differs: {}", differing.join(", ")))
    }
}

fn run_property<S: Strategy>(name: &str, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let mut runner = TestRunner::new(ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(1000)
    });
    runner.run(&strategy, test).map_err(|e| format!("{name}: {e}"))
}

fn random_shape(input_dim: usize, n_u: usize, floor: f64) -> PolicyShape {
    PolicyShape {
        input_dim,
        hidden: vec![8, 8],
        activation: Activation::Tanh,
        u_lower: (0..n_u).map(|i| -1.0 - i as f64).collect(),
        u_upper: (0..n_u).map(|i| 0.5 + i as f64).collect(),
        chol_head: true,
        diag_floor: floor,
    }
}

/// Layer on a random double-integrator instance, for the hull and zero-sum properties.
fn layer_instance(seed: u64, n: usize, k: usize) -> (stepmppi::layer::LayerTape<f64>, DistributionParams<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = DoubleIntegrator::<f64>::new(n, 0.1, 10.0);
    let x: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let ctx = CostContext::quadratic(
        (0..2 * n).map(|_| rng.random_range(0.1..5.0)).collect(),
        (0..n).map(|_| rng.random_range(0.01..1.0)).collect(),
    );
    let mu: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let l = CholeskyFactor::from_matrix(lower_from_packed(n, &random_lower(&mut rng, n))).unwrap();
    let z = DistributionParams::new(mu, l).unwrap();
    let eps: Vec<Vec<f64>> = (0..k).map(|_| normals(&mut rng, n)).collect();
    let lambda = rng.random_range(0.01..10.0);
    let (u, tape) = layer_forward_with_noise(&z, &x, &[], &ctx, &model, eps, lambda, LayerMode::Train).unwrap();
    (tape, z, u)
}

/// Property suite, 1000 cases per property.
fn criterion_9() -> Outcome {
    let costs = prop::collection::vec(-1e3..1e3f64, 1..64);
    run_property("softmax normalization", (costs.clone(), 1e-3..1e3f64), |(c, lambda)| {
        let w = softmax_neg_scaled(&c, lambda).unwrap();
        let sum: f64 = w.iter().sum();
        prop_assert!(w.iter().all(|v| *v >= 0.0 && v.is_finite()));
        prop_assert!((sum - 1.0).abs() < 1e-12, "sum {}", sum);
        Ok(())
    })?;
    run_property("softmax shift invariance", (costs, 1e-2..1e3f64, -1e3..1e3f64), |(c, lambda, s)| {
        let w = softmax_neg_scaled(&c, lambda).unwrap();
        let shifted: Vec<f64> = c.iter().map(|v| v + s).collect();
        let ws = softmax_neg_scaled(&shifted, lambda).unwrap();
        for (a, b) in w.iter().zip(ws.iter()) {
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
        Ok(())
    })?;
    run_property("layer convex hull", (any::<u64>(), 1..4usize, 1..32usize), |(seed, n, k)| {
        let (tape, _, u) = layer_instance(seed, n, k);
        for p in 0..n {
            let lo = tape.samples.iter().map(|s| s[p]).fold(f64::INFINITY, f64::min);
            let hi = tape.samples.iter().map(|s| s[p]).fold(f64::NEG_INFINITY, f64::max);
            let tol = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
            prop_assert!(u[p] >= lo - tol && u[p] <= hi + tol, "u {} outside [{}, {}]", u[p], lo, hi);
        }
        Ok(())
    })?;
    run_property("MPPI update convex hull", (any::<u64>(), 1..4usize, 1..8usize, 1..64usize), |(seed, nu, h, n)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mean: Vec<f64> = (0..nu).map(|_| rng.random_range(-2.0..2.0)).collect();
        let chol = CholeskyFactor::from_matrix(lower_from_packed(nu, &random_lower(&mut rng, nu))).unwrap();
        let plan = MppiPlan::constant(mean, chol, h).unwrap();
        let batch = sample_sequences(&plan, n, &RngStream::new(seed, "hull").keyed(), None);
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let next = update_plan(&plan, &batch, &w, true).unwrap();
        for step in 0..h {
            for c in 0..nu {
                let vals: Vec<f64> = (0..n).map(|i| batch.control(i, step)[c]).collect();
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let m = next.means[step][c];
                prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
            }
        }
        Ok(())
    })?;
    run_property("weight-gradient zero sum", (any::<u64>(), 1..4usize, 1..32usize), |(seed, n, k)| {
        let (tape, z, _) = layer_instance(seed, n, k);
        let jac = layer_backward(&tape, &z).unwrap();
        for (m, label) in [(&jac.dw_dmu, "mu"), (&jac.dw_dl, "L")] {
            let scale = m.as_slice().iter().fold(1.0f64, |a, v| a.max(v.abs()));
            for c in 0..m.cols() {
                let s: f64 = m.column(c).iter().sum();
                prop_assert!(s.abs() <= 1e-12 * scale * k as f64, "Σ_k ∂w_k/∂{}[{}] = {}", label, c, s);
            }
        }
        Ok(())
    })?;
    let policy_case = (any::<u64>(), 1..4usize, 1..5usize, 0.1..50.0f64, 1e-6..1e-1f64);
    run_property("tanh bound containment", policy_case.clone(), |(seed, n_u, input_dim, scale, floor)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = random_shape(input_dim, n_u, floor);
        let probe = PolicyParams::<f64>::zeros(shape.clone()).unwrap();
        let flat: Vec<f64> = (0..probe.len()).map(|_| rng.random_range(-scale..scale)).collect();
        let params = PolicyParams::from_flat(shape.clone(), flat).unwrap();
        let input: Vec<f64> = (0..input_dim).map(|_| rng.random_range(-1e3..1e3)).collect();
        let (z, _) = policy_forward(&params, &input).unwrap();
        let mut dpc_shape = shape.clone();
        dpc_shape.chol_head = false;
        let dpc_len = PolicyParams::<f64>::zeros(dpc_shape.clone()).unwrap().len();
        let dpc = PolicyParams::from_flat(dpc_shape, params.flat()[..dpc_len].to_vec()).unwrap();
        let (u, _) = dpc_forward(&dpc, &input).unwrap();
        for i in 0..n_u {
            for v in [z.mu[i], u[i]] {
                prop_assert!(v >= shape.u_lower[i] && v <= shape.u_upper[i], "{} outside [{}, {}]", v, shape.u_lower[i], shape.u_upper[i]);
            }
        }
        Ok(())
    })?;
    run_property("Cholesky diagonal floor", policy_case, |(seed, n_u, input_dim, scale, floor)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = random_shape(input_dim, n_u, floor);
        let probe = PolicyParams::<f64>::zeros(shape.clone()).unwrap();
        let flat: Vec<f64> = (0..probe.len()).map(|_| rng.random_range(-scale..scale)).collect();
        let params = PolicyParams::from_flat(shape, flat).unwrap();
        let input: Vec<f64> = (0..input_dim).map(|_| rng.random_range(-1e3..1e3)).collect();
        let (z, _) = policy_forward(&params, &input).unwrap();
        for d in z.l.diag() {
            prop_assert!(d >= floor, "diagonal {} below floor {}", d, floor);
        }
        Ok(())
    })?;
    Ok("7 properties x 1000 cases, no failures".into())
}

fn main() -> ExitCode {
    // Numeric arguments select a subset of criteria; everything else is ignored.
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: u32| selected.is_empty() || selected.contains(&id);
    let mut failed = 0;
    let mut report = |id: u32, name: &str, outcome: Outcome| match &outcome {
        Ok(d) => println!("criterion {id} {name}: PASS ({d})"),
        Err(d) => {
            failed += 1;
            println!("criterion {id} {name}: FAIL ({d})");
        }
    };
    let simple: [(u32, &str, fn() -> Outcome); 5] = [
        (1, "layer Jacobians", criterion_1),
        (2, "BPTT gradient", criterion_2),
        (3, "entropy", criterion_3),
        (4, "double-integrator oracle", criterion_4),
        (5, "traffic ordering", criterion_5),
    ];
    for (id, name, run) in simple {
        if wanted(id) {
            report(id, name, run());
        }
    }
    if wanted(6) || wanted(7) {
        match bicycle_policies() {
            Ok(p) => {
                if wanted(6) {
                    report(6, "runtime ordering", criterion_6(&p));
                }
                if wanted(7) {
                    report(7, "bicycle constraints", criterion_7(&p));
                }
            }
            Err(e) => {
                for (id, name) in [(6, "runtime ordering"), (7, "bicycle constraints")] {
                    if wanted(id) {
                        report(id, name, Err(format!("training failed: {e}")));
                    }
                }
            }
        }
    }
    if wanted(8) {
        report(8, "determinism", criterion_8());
    }
    if wanted(9) {
        report(9, "invariants", criterion_9());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
