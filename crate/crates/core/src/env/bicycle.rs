//! Kinematic single-track vehicle on a closed track.
//!
//! State `[p_x, p_y, v, ψ]`, input `[a, δ]`:
//! `ṗ_x = v cos ψ`, `ṗ_y = v sin ψ`, `v̇ = a`, `ψ̇ = (v / ℓ) tan δ`,
//! integrated with one RK4 step per `δt`. Jacobians are propagated through
//! the four stages in forward mode, so they are exact for the discrete map.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{CostContext, InputPenalty, LinearConstraint};
use crate::env::track::TrackGeometry;
use crate::env::{Bounds, EpisodeMonitor, EpisodeStatus, HorizonData, InitDistribution, SystemModel, Task};
use crate::error::Result;
use crate::numerics::linalg::Matrix;
use crate::scalar::Scalar;

const NX: usize = 4;
const NU: usize = 2;

#[derive(Clone, Debug)]
pub struct KinematicBicycle<T: Scalar> {
    wheelbase: T,
    dt: T,
    bounds: Bounds<T>,
}

type Jx<T> = [[T; NX]; NX];
type Ju<T> = [[T; NU]; NX];

impl<T: Scalar> KinematicBicycle<T> {
    pub fn new(wheelbase: f64, dt: f64, a_max: f64, steer_max: f64) -> Result<Self> {
        if !(wheelbase > 0.0 && dt > 0.0) {
            return Err(crate::error::Error::invalid("bicycle needs positive wheelbase and dt"));
        }
        Ok(Self {
            wheelbase: T::of(wheelbase),
            dt: T::of(dt),
            bounds: Bounds::symmetric(&[T::of(a_max), T::of(steer_max)])?,
        })
    }

    pub fn wheelbase(&self) -> T {
        self.wheelbase
    }

    fn rhs(&self, x: &[T; NX], u: &[T]) -> [T; NX] {
        let (v, psi) = (x[2], x[3]);
        [v * psi.cos(), v * psi.sin(), u[0], v / self.wheelbase * u[1].tan()]
    }

    /// `(∂F/∂x, ∂F/∂u)` of the continuous right-hand side.
    fn rhs_jac(&self, x: &[T; NX], u: &[T]) -> (Jx<T>, Ju<T>) {
        let z = T::zero();
        let (v, psi) = (x[2], x[3]);
        let (c, s) = (psi.cos(), psi.sin());
        let tan = u[1].tan();
        let sec2 = T::one() + tan * tan;
        let fx = [
            [z, z, c, -v * s],
            [z, z, s, v * c],
            [z, z, z, z],
            [z, z, tan / self.wheelbase, z],
        ];
        let fu = [[z, z], [z, z], [T::one(), z], [z, v / self.wheelbase * sec2]];
        (fx, fu)
    }

    /// RK4 step with its Jacobians `(x', ∂x'/∂x, ∂x'/∂u)`.
    fn rk4_with_jacobians(&self, x: &[T], u: &[T]) -> ([T; NX], Jx<T>, Ju<T>) {
        let dt = self.dt;
        let half = dt * T::of(0.5);
        let x0: [T; NX] = [x[0], x[1], x[2], x[3]];
        let mut ident = [[T::zero(); NX]; NX];
        for (i, row) in ident.iter_mut().enumerate() {
            row[i] = T::one();
        }
        let mut ks = [[T::zero(); NX]; 4];
        let mut kx = [[[T::zero(); NX]; NX]; 4];
        let mut ku = [[[T::zero(); NU]; NX]; 4];
        let scales = [T::zero(), half, half, dt];
        for stage in 0..4 {
            let (mut xs, mut dxs, mut dus) = (x0, ident, [[T::zero(); NU]; NX]);
            if stage > 0 {
                let h = scales[stage];
                for i in 0..NX {
                    xs[i] += h * ks[stage - 1][i];
                    for j in 0..NX {
                        dxs[i][j] += h * kx[stage - 1][i][j];
                    }
                    for j in 0..NU {
                        dus[i][j] = h * ku[stage - 1][i][j];
                    }
                }
            }
            ks[stage] = self.rhs(&xs, u);
            let (fx, fu) = self.rhs_jac(&xs, u);
            for i in 0..NX {
                for j in 0..NX {
                    kx[stage][i][j] = (0..NX).fold(T::zero(), |acc, m| acc + fx[i][m] * dxs[m][j]);
                }
                for j in 0..NU {
                    ku[stage][i][j] = (0..NX).fold(fu[i][j], |acc, m| acc + fx[i][m] * dus[m][j]);
                }
            }
        }
        let w = [dt / T::of(6.0), dt / T::of(3.0), dt / T::of(3.0), dt / T::of(6.0)];
        let mut next = x0;
        let mut jx = ident;
        let mut ju = [[T::zero(); NU]; NX];
        for stage in 0..4 {
            for i in 0..NX {
                next[i] += w[stage] * ks[stage][i];
                for j in 0..NX {
                    jx[i][j] += w[stage] * kx[stage][i][j];
                }
                for j in 0..NU {
                    ju[i][j] += w[stage] * ku[stage][i][j];
                }
            }
        }
        (next, jx, ju)
    }

    fn rk4(&self, x: &[T], u: &[T]) -> [T; NX] {
        let dt = self.dt;
        let half = dt * T::of(0.5);
        let x0: [T; NX] = [x[0], x[1], x[2], x[3]];
        let shift = |k: &[T; NX], h: T| {
            let mut out = x0;
            for i in 0..NX {
                out[i] += h * k[i];
            }
            out
        };
        let k1 = self.rhs(&x0, u);
        let k2 = self.rhs(&shift(&k1, half), u);
        let k3 = self.rhs(&shift(&k2, half), u);
        let k4 = self.rhs(&shift(&k3, dt), u);
        let mut next = x0;
        for i in 0..NX {
            next[i] += dt / T::of(6.0) * (k1[i] + T::of(2.0) * (k2[i] + k3[i]) + k4[i]);
        }
        next
    }
}

impl<T: Scalar> SystemModel<T> for KinematicBicycle<T> {
    fn state_dim(&self) -> usize {
        NX
    }

    fn input_dim(&self) -> usize {
        NU
    }

    fn dt(&self) -> T {
        self.dt
    }

    fn input_bounds(&self) -> &Bounds<T> {
        &self.bounds
    }

    fn transition(&self, x: &[T], u: &[T], _xi: &[T]) -> Vec<T> {
        self.rk4(x, u).to_vec()
    }

    fn jac_x(&self, x: &[T], u: &[T], xi: &[T]) -> Result<Matrix<T>> {
        self.check_dims(x, u, xi)?;
        let (_, jx, _) = self.rk4_with_jacobians(x, u);
        Matrix::from_row_major(NX, NX, jx.iter().flatten().copied().collect())
    }

    fn jac_u(&self, x: &[T], u: &[T], xi: &[T]) -> Result<Matrix<T>> {
        self.check_dims(x, u, xi)?;
        let (_, _, ju) = self.rk4_with_jacobians(x, u);
        Matrix::from_row_major(NX, NU, ju.iter().flatten().copied().collect())
    }
}

/// Track-following task parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BicycleConfig {
    pub wheelbase: f64,
    pub dt: f64,
    pub a_max: f64,
    pub steer_max: f64,
    /// Ellipse semi-axes in metres.
    pub track_ax: f64,
    pub track_ay: f64,
    pub track_points: usize,
    pub speed: f64,
    /// Physical border half-width; leaving it is a departure.
    pub half_width: f64,
    /// Half-width of the penalized corridor.
    pub penalty_half_width: f64,
    pub q_pos: f64,
    pub q_speed: f64,
    pub q_heading: f64,
    pub r_accel: f64,
    pub r_steer: f64,
    pub border_weight: f64,
    /// Weight on squared input-box excess; the layer's samples are not clamped.
    pub input_weight: f64,
    pub v_max: f64,
    /// Arc-length offsets, in steps ahead, of the curvature preview fed to the policy.
    pub preview_steps: Vec<usize>,
    pub init_lateral: f64,
    pub init_heading: f64,
    pub init_speed: f64,
    /// Multiplier on the lateral/heading/speed perturbations for the OOD sampler.
    pub ood_scale: f64,
    pub episode_len: usize,
}

impl Default for BicycleConfig {
    fn default() -> Self {
        Self {
            wheelbase: 0.33,
            dt: 0.05,
            a_max: 4.0,
            steer_max: 0.4,
            track_ax: 4.0,
            track_ay: 2.5,
            track_points: 800,
            speed: 2.0,
            half_width: 0.3,
            penalty_half_width: 0.3,
            q_pos: 10.0,
            q_speed: 1.0,
            q_heading: 1.0,
            r_accel: 0.01,
            r_steer: 0.1,
            border_weight: 1000.0,
            input_weight: 100.0,
            v_max: 4.0,
            preview_steps: vec![5, 10, 20],
            init_lateral: 0.1,
            init_heading: 0.1,
            init_speed: 0.2,
            ood_scale: 2.0,
            episode_len: 400,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrackTask<T: Scalar> {
    cfg: BicycleConfig,
    track: Arc<TrackGeometry<T>>,
}

impl<T: Scalar> TrackTask<T> {
    pub fn new(cfg: BicycleConfig) -> Result<Self> {
        let track = TrackGeometry::ellipse(cfg.track_ax, cfg.track_ay, cfg.track_points, cfg.speed, cfg.half_width)?;
        Ok(Self {
            cfg,
            track: Arc::new(track),
        })
    }

    pub fn track(&self) -> &Arc<TrackGeometry<T>> {
        &self.track
    }

    pub fn config(&self) -> &BicycleConfig {
        &self.cfg
    }

    /// Steps needed to drive one lap at the reference speed.
    pub fn lap_steps(&self) -> usize {
        (self.track.length().as_f64() / (self.cfg.speed * self.cfg.dt)).ceil() as usize
    }

    fn context_at(&self, s: T, heading: T) -> CostContext<T> {
        let c = &self.cfg;
        let p = self.track.sample(s);
        let hs = self.track.half_space_at(s, T::of(c.penalty_half_width));
        let w = T::of(c.border_weight);
        let step = T::of(c.speed * c.dt);
        CostContext {
            x_ref: vec![p.x, p.y, p.speed, heading],
            u_ref: vec![T::zero(); NU],
            q: vec![T::of(c.q_pos), T::of(c.q_pos), T::of(c.q_speed), T::of(c.q_heading)],
            r: vec![T::of(c.r_accel), T::of(c.r_steer)],
            state_constraints: vec![
                LinearConstraint {
                    coeffs: vec![(0, hs.a), (1, hs.b)],
                    lower: Some(hs.c_right),
                    upper: Some(hs.c_left),
                    weight: w,
                },
                LinearConstraint::bound(2, Some(T::zero()), Some(T::of(c.v_max)), w),
            ],
            input_penalty: Some(InputPenalty {
                lower: vec![T::of(-c.a_max), T::of(-c.steer_max)],
                upper: vec![T::of(c.a_max), T::of(c.steer_max)],
                weight: T::of(c.input_weight),
            }),
            exo: c
                .preview_steps
                .iter()
                .map(|&k| self.track.sample(s + step * T::of(k as f64)).curvature)
                .collect(),
        }
    }
}

fn nearest_turn<T: Scalar>(angle: T, target: T) -> T {
    let tau = T::PI() + T::PI();
    angle + tau * ((target - angle) / tau).round()
}

struct LapMonitor<T: Scalar> {
    track: Arc<TrackGeometry<T>>,
    last_s: T,
    progress: T,
}

impl<T: Scalar> EpisodeMonitor<T> for LapMonitor<T> {
    fn observe(&mut self, x: &[T], _t: usize) -> EpisodeStatus {
        let p = self.track.project(x[0], x[1]);
        if p.cte.abs() > self.track.half_width() {
            return EpisodeStatus::Failure;
        }
        let l = self.track.length();
        let mut ds = p.s - self.last_s;
        if ds > l * T::of(0.5) {
            ds -= l;
        } else if ds < -l * T::of(0.5) {
            ds += l;
        }
        self.progress += ds;
        self.last_s = p.s;
        if self.progress >= l {
            EpisodeStatus::Success
        } else {
            EpisodeStatus::Running
        }
    }
}

impl<T: Scalar> Task<T> for TrackTask<T> {
    fn horizon(&self, x: &[T], _t: usize, len: usize) -> HorizonData<T> {
        let s0 = self.track.project(x[0], x[1]).s;
        let step = T::of(self.cfg.speed * self.cfg.dt);
        let mut heading = x[3];
        let contexts = (1..=len)
            .map(|k| {
                let s = s0 + step * T::of(k as f64);
                heading = nearest_turn(self.track.sample(s).heading, heading);
                self.context_at(s, heading)
            })
            .collect();
        HorizonData {
            contexts,
            params: vec![Vec::new(); len],
        }
    }

    fn feature_dim(&self) -> usize {
        5 + self.cfg.preview_steps.len()
    }

    fn features(&self, x: &[T], ctx: &CostContext<T>, _xi: &[T]) -> Vec<T> {
        let r = &ctx.x_ref;
        let (c, s) = (r[3].cos(), r[3].sin());
        let (dx, dy) = (x[0] - r[0], x[1] - r[1]);
        let mut f = vec![c * dx + s * dy, -s * dx + c * dy, x[3] - r[3], x[2], x[2] - r[2]];
        f.extend_from_slice(&ctx.exo);
        f
    }

    fn features_vjp(&self, _x: &[T], ctx: &CostContext<T>, _xi: &[T], g: &[T]) -> Vec<T> {
        let r = &ctx.x_ref;
        let (c, s) = (r[3].cos(), r[3].sin());
        vec![c * g[0] - s * g[1], s * g[0] + c * g[1], g[3] + g[4], g[2]]
    }

    fn sample_initial(&self, rng: &mut ChaCha8Rng, dist: InitDistribution) -> Vec<T> {
        let c = &self.cfg;
        let scale = match dist {
            InitDistribution::InDistribution => 1.0,
            InitDistribution::OutOfDistribution => c.ood_scale,
        };
        let s = rng.random::<f64>() * self.track.length().as_f64();
        let mut sym = |b: f64| if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 };
        let lat = sym(c.init_lateral * scale);
        let dpsi = sym(c.init_heading * scale);
        let dv = sym(c.init_speed * scale);
        let p = self.track.sample(T::of(s));
        let (nx, ny) = (-p.heading.sin().as_f64(), p.heading.cos().as_f64());
        vec![
            T::of(p.x.as_f64() + lat * nx),
            T::of(p.y.as_f64() + lat * ny),
            T::of((c.speed + dv).max(0.0)),
            T::of(p.heading.as_f64() + dpsi),
        ]
    }

    fn admissible(&self, x: &[T]) -> bool {
        crate::numerics::linalg::all_finite(x)
            && self.track.project(x[0], x[1]).cte.abs() < T::of(self.cfg.penalty_half_width)
    }

    fn monitor(&self, x0: &[T]) -> Box<dyn EpisodeMonitor<T>> {
        Box::new(LapMonitor {
            track: Arc::clone(&self.track),
            last_s: self.track.project(x0[0], x0[1]).s,
            progress: T::zero(),
        })
    }

    fn episode_len(&self) -> usize {
        self.cfg.episode_len
    }

    fn cross_track_error(&self, x: &[T]) -> Option<T> {
        Some(self.track.project(x[0], x[1]).cte)
    }

    fn violation(&self, x: &[T], u: &[T], tol: T) -> bool {
        let c = &self.cfg;
        let cte = self.track.project(x[0], x[1]).cte.abs();
        let u_out = u[0].abs() > T::of(c.a_max) + tol || u[1].abs() > T::of(c.steer_max) + tol;
        cte > self.track.half_width() + tol || u_out || x[2] < -tol
    }
}
