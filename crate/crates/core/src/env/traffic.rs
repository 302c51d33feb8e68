//! Multi-region urban traffic with MFD outflows and perimeter gates.
//!
//! State `X[i·R + j]` is the accumulation in region `i` heading to region
//! `j`. With `x_i = Σ_j X_ij` and per-vehicle outflow rate
//! `φ_i = g_i(x_i) / x_i`, the flows are
//!
//! * completion `m_ii = X_ii·φ_i`,
//! * transfer `m_ihj = u_e·θ_ihj·X_ij·φ_i` through gate `e = (i → h)`, `j ≠ i`,
//!
//! and one forward-Euler step adds `δt·(demand − outflow + inflow)`, clamped at 0.
//! The MFD is the cubic `g(x) = a x³ + b x² + c x` on `[0, jam]` and zero beyond.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{CostContext, InputPenalty, LinearConstraint};
use crate::env::{Bounds, EpisodeMonitor, EpisodeStatus, HorizonData, InitDistribution, SystemModel, Task};
use crate::error::{Error, Result};
use crate::numerics::linalg::Matrix;
use crate::numerics::rng::normal;
use crate::scalar::Scalar;

/// `g(x) = a x³ + b x² + c x` for `0 ≤ x ≤ jam`, zero above.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mfd {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub jam: f64,
}

impl Mfd {
    /// `c·x·(1 − x/jam)²`: a double root at `jam` keeps `g` C¹ there; the peak is at `jam/3`.
    pub fn symmetric_cubic(c: f64, jam: f64) -> Self {
        Self {
            a: c / (jam * jam),
            b: -2.0 * c / jam,
            c,
            jam,
        }
    }

    pub fn flow(&self, x: f64) -> f64 {
        if (0.0..=self.jam).contains(&x) {
            ((self.a * x + self.b) * x + self.c) * x
        } else {
            0.0
        }
    }
}

/// `θ_{origin, next, dest}`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteFraction {
    pub origin: usize,
    pub next: usize,
    pub dest: usize,
    pub fraction: f64,
}

/// Serializable network description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficNetworkSpec {
    pub regions: usize,
    /// `N_i`, the regions reachable from `i` in one transfer.
    pub adjacency: Vec<Vec<usize>>,
    pub mfd: Vec<Mfd>,
    pub routing: Vec<RouteFraction>,
    /// Base demand `d_ij` in veh/s, row-major `R × R`.
    pub demand: Vec<f64>,
    pub dt: f64,
    pub u_lo: f64,
    pub u_hi: f64,
    pub eps_empty: f64,
}

impl TrafficNetworkSpec {
    /// `rows × cols` grid with 4-neighbour adjacency, identical MFDs, uniform demand,
    /// and shortest-path routing split evenly over the neighbours that reduce Manhattan distance.
    pub fn grid(rows: usize, cols: usize, mfd: Mfd, demand_rate: f64, dt: f64, u_lo: f64, u_hi: f64) -> Self {
        let r = rows * cols;
        let coord = |i: usize| ((i / cols) as i64, (i % cols) as i64);
        let dist = |a: usize, b: usize| {
            let (ra, ca) = coord(a);
            let (rb, cb) = coord(b);
            (ra - rb).abs() + (ca - cb).abs()
        };
        let adjacency: Vec<Vec<usize>> = (0..r)
            .map(|i| {
                let (ri, ci) = coord(i);
                [(-1, 0), (1, 0), (0, -1), (0, 1)]
                    .iter()
                    .filter_map(|&(dr, dc)| {
                        let (rr, cc) = (ri + dr, ci + dc);
                        (rr >= 0 && cc >= 0 && rr < rows as i64 && cc < cols as i64)
                            .then(|| rr as usize * cols + cc as usize)
                    })
                    .collect()
            })
            .collect();
        let mut routing = Vec::new();
        for i in 0..r {
            for j in (0..r).filter(|&j| j != i) {
                let good: Vec<usize> = adjacency[i].iter().copied().filter(|&h| dist(h, j) < dist(i, j)).collect();
                for &h in &good {
                    routing.push(RouteFraction {
                        origin: i,
                        next: h,
                        dest: j,
                        fraction: 1.0 / good.len() as f64,
                    });
                }
            }
        }
        Self {
            regions: r,
            adjacency,
            mfd: vec![mfd; r],
            routing,
            demand: vec![demand_rate; r * r],
            dt,
            u_lo,
            u_hi,
            eps_empty: 1e-6,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct TrafficNetwork<T: Scalar> {
    spec: TrafficNetworkSpec,
    r: usize,
    /// Directed gates `(from, to)`; input `e` meters flow through `edges[e]`.
    edges: Vec<(usize, usize)>,
    /// `θ[e·R + j]` for gate `e = (i → h)`.
    theta: Vec<T>,
    mfd: Vec<(T, T, T, T)>,
    demand: Vec<T>,
    dt: T,
    eps_empty: T,
    bounds: Bounds<T>,
}

impl<T: Scalar> TrafficNetwork<T> {
    /// Validates routing, MFDs and demand; the network is immutable afterwards.
    pub fn new(spec: TrafficNetworkSpec) -> Result<Self> {
        let r = spec.regions;
        if r == 0 || spec.adjacency.len() != r || spec.mfd.len() != r || spec.demand.len() != r * r {
            return Err(Error::invalid("traffic network: region counts disagree"));
        }
        if !(spec.dt > 0.0) || !(spec.eps_empty > 0.0) {
            return Err(Error::invalid("traffic network: dt and eps_empty must be positive"));
        }
        if let Some(d) = spec.demand.iter().find(|d| !(**d >= 0.0)) {
            return Err(Error::invalid(format!("traffic network: negative demand {d}")));
        }
        let mut edges = Vec::new();
        let mut edge_index = vec![vec![None; r]; r];
        for (i, nbrs) in spec.adjacency.iter().enumerate() {
            for &h in nbrs {
                if h >= r || h == i || edge_index[i][h].is_some() {
                    return Err(Error::invalid(format!("traffic network: bad neighbour {h} of region {i}")));
                }
                edge_index[i][h] = Some(edges.len());
                edges.push((i, h));
            }
        }
        let mut theta = vec![0.0f64; edges.len() * r];
        for rf in &spec.routing {
            if rf.origin >= r || rf.dest >= r || !(0.0..=1.0).contains(&rf.fraction) {
                return Err(Error::invalid("traffic network: routing fraction out of range"));
            }
            let e = edge_index[rf.origin]
                .get(rf.next)
                .copied()
                .flatten()
                .ok_or_else(|| Error::invalid(format!("traffic network: {} is not adjacent to {}", rf.next, rf.origin)))?;
            theta[e * r + rf.dest] += rf.fraction;
        }
        for i in 0..r {
            for j in (0..r).filter(|&j| j != i) {
                let total: f64 = spec.adjacency[i]
                    .iter()
                    .map(|&h| theta[edge_index[i][h].unwrap() * r + j])
                    .sum();
                if (total - 1.0).abs() > 1e-9 && !spec.adjacency[i].is_empty() {
                    return Err(Error::invalid(format!(
                        "traffic network: routing fractions for ({i}, {j}) sum to {total}"
                    )));
                }
            }
        }
        for (i, m) in spec.mfd.iter().enumerate() {
            let ok = m.jam > 0.0 && (0..=100).all(|k| m.flow(m.jam * k as f64 / 100.0) >= -1e-9);
            if !ok {
                return Err(Error::invalid(format!("traffic network: MFD of region {i} is negative on its range")));
            }
        }
        let bounds = Bounds::new(vec![T::of(spec.u_lo); edges.len()], vec![T::of(spec.u_hi); edges.len()])
            .or_else(|e| if edges.is_empty() { Ok(Bounds { lower: vec![], upper: vec![] }) } else { Err(e) })?;
        Ok(Self {
            r,
            edges,
            theta: theta.into_iter().map(T::of).collect(),
            mfd: spec.mfd.iter().map(|m| (T::of(m.a), T::of(m.b), T::of(m.c), T::of(m.jam))).collect(),
            demand: spec.demand.iter().map(|&d| T::of(d)).collect(),
            dt: T::of(spec.dt),
            eps_empty: T::of(spec.eps_empty),
            bounds,
            spec,
        })
    }

    pub fn spec(&self) -> &TrafficNetworkSpec {
        &self.spec
    }

    pub fn regions(&self) -> usize {
        self.r
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn region_totals(&self, x: &[T]) -> Vec<T> {
        x.chunks(self.r).map(|row| row.iter().copied().sum()).collect()
    }

    /// `(φ_i, ∂φ_i/∂x_i)`
    fn rate(&self, i: usize, xi: T) -> (T, T) {
        let (a, b, c, jam) = self.mfd[i];
        if xi < self.eps_empty || xi > jam {
            (T::zero(), T::zero())
        } else {
            ((a * xi + b) * xi + c, T::of(2.0) * a * xi + b)
        }
    }

    /// `g_i(x_i)`
    pub fn mfd_flow(&self, i: usize, xi: T) -> T {
        self.rate(i, xi).0 * xi
    }

    /// One step under demand scale `scale`, with input validation.
    pub fn traffic_step(&self, x: &[T], u: &[T], scale: T) -> Result<Vec<T>> {
        if x.len() != self.r * self.r || u.len() != self.edges.len() {
            return Err(Error::invalid("traffic_step: state or gate dimension mismatch"));
        }
        if x.iter().any(|v| *v < T::zero()) || !(scale >= T::zero()) {
            return Err(Error::invalid("traffic_step: accumulations and demand must be nonnegative"));
        }
        Ok(self.euler(x, u, scale).0)
    }

    /// Euler step returning `(clamped, pre-clamp)` states.
    fn euler(&self, x: &[T], u: &[T], scale: T) -> (Vec<T>, Vec<T>) {
        let r = self.r;
        let dt = self.dt;
        let phi: Vec<T> = self
            .region_totals(x)
            .into_iter()
            .enumerate()
            .map(|(i, xi)| self.rate(i, xi).0)
            .collect();
        let mut pre: Vec<T> = x.iter().zip(&self.demand).map(|(&v, &d)| v + dt * d * scale).collect();
        for i in 0..r {
            pre[i * r + i] -= dt * x[i * r + i] * phi[i];
        }
        for (e, &(i, h)) in self.edges.iter().enumerate() {
            let ue = dt * u[e] * phi[i];
            if ue == T::zero() {
                continue;
            }
            let th = &self.theta[e * r..(e + 1) * r];
            for j in 0..r {
                if th[j] == T::zero() {
                    continue;
                }
                let f = ue * th[j] * x[i * r + j];
                pre[i * r + j] -= f;
                pre[h * r + j] += f;
            }
        }
        let next = pre.iter().map(|v| v.max(T::zero())).collect();
        (next, pre)
    }

    /// Reverse-mode step: `(∂x'/∂x)ᵀ·cot` and `(∂x'/∂u)ᵀ·cot`.
    pub fn vjp(&self, x: &[T], u: &[T], xi: &[T], cot: &[T]) -> (Vec<T>, Vec<T>) {
        let r = self.r;
        let dt = self.dt;
        let scale = xi.first().copied().unwrap_or(T::one());
        let (_, pre) = self.euler(x, u, scale);
        let a: Vec<T> = cot
            .iter()
            .zip(&pre)
            .map(|(&c, &p)| if p >= T::zero() { c } else { T::zero() })
            .collect();
        let totals = self.region_totals(x);
        let rates: Vec<(T, T)> = totals.iter().enumerate().map(|(i, &t)| self.rate(i, t)).collect();
        // ∂L/∂P_ij with P_ij = X_ij·φ_i.
        let mut p_bar = vec![T::zero(); r * r];
        for i in 0..r {
            p_bar[i * r + i] -= dt * a[i * r + i];
        }
        let mut u_bar = vec![T::zero(); self.edges.len()];
        for (e, &(i, h)) in self.edges.iter().enumerate() {
            let th = &self.theta[e * r..(e + 1) * r];
            let phi = rates[i].0;
            for j in 0..r {
                if th[j] == T::zero() {
                    continue;
                }
                let diff = dt * th[j] * (a[h * r + j] - a[i * r + j]);
                p_bar[i * r + j] += u[e] * diff;
                u_bar[e] += diff * x[i * r + j] * phi;
            }
        }
        let mut x_bar = a;
        for i in 0..r {
            let (phi, dphi) = rates[i];
            let row = i * r..(i + 1) * r;
            let mut phi_bar = T::zero();
            for k in row.clone() {
                x_bar[k] += p_bar[k] * phi;
                phi_bar += p_bar[k] * x[k];
            }
            let tot_bar = phi_bar * dphi;
            for k in row {
                x_bar[k] += tot_bar;
            }
        }
        (x_bar, u_bar)
    }
}

impl<T: Scalar> SystemModel<T> for TrafficNetwork<T> {
    fn state_dim(&self) -> usize {
        self.r * self.r
    }

    fn input_dim(&self) -> usize {
        self.edges.len()
    }

    fn param_dim(&self) -> usize {
        1
    }

    fn dt(&self) -> T {
        self.dt
    }

    fn input_bounds(&self) -> &Bounds<T> {
        &self.bounds
    }

    /// `ξ = [demand scale]`.
    fn transition(&self, x: &[T], u: &[T], xi: &[T]) -> Vec<T> {
        self.euler(x, u, xi[0]).0
    }

    fn jac_x(&self, x: &[T], u: &[T], xi: &[T]) -> Result<Matrix<T>> {
        self.check_dims(x, u, xi)?;
        let n = self.state_dim();
        let mut m = Matrix::zeros(n, n);
        for row in 0..n {
            let mut e = vec![T::zero(); n];
            e[row] = T::one();
            let (gx, _) = self.vjp(x, u, xi, &e);
            m.as_mut_slice()[row * n..(row + 1) * n].copy_from_slice(&gx);
        }
        Ok(m)
    }

    fn jac_u(&self, x: &[T], u: &[T], xi: &[T]) -> Result<Matrix<T>> {
        self.check_dims(x, u, xi)?;
        let (n, m) = (self.state_dim(), self.input_dim());
        let mut out = Matrix::zeros(n, m);
        for row in 0..n {
            let mut e = vec![T::zero(); n];
            e[row] = T::one();
            let (_, gu) = self.vjp(x, u, xi, &e);
            out.as_mut_slice()[row * m..(row + 1) * m].copy_from_slice(&gu);
        }
        Ok(out)
    }

    fn vjp_x(&self, x: &[T], u: &[T], xi: &[T], cot: &[T]) -> Result<Vec<T>> {
        self.check_dims(x, u, xi)?;
        Ok(self.vjp(x, u, xi, cot).0)
    }

    fn vjp_u(&self, x: &[T], u: &[T], xi: &[T], cot: &[T]) -> Result<Vec<T>> {
        self.check_dims(x, u, xi)?;
        Ok(self.vjp(x, u, xi, cot).1)
    }
}

/// Gaussian initial accumulation for selected cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellPrior {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrafficConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub mfd_c: f64,
    pub jam: f64,
    pub dt: f64,
    pub demand_rate: f64,
    pub u_lo: f64,
    pub u_hi: f64,
    /// Explicit network; overrides the grid fields when present.
    pub network: Option<TrafficNetworkSpec>,
    /// Demand scale falls linearly from 1 to 0 over this many steps.
    pub demand_decay_steps: usize,
    pub episode_len: usize,
    /// `(origin, destination)` cells that start congested.
    pub high_cells: Vec<(usize, usize)>,
    pub high_prior: CellPrior,
    pub ood_high_prior: CellPrior,
    pub low_prior: CellPrior,
    pub clip_max: f64,
    pub q_cell: f64,
    pub r_gate: f64,
    /// Soft cap on each region's total accumulation.
    pub region_cap: f64,
    pub cap_weight: f64,
    /// Weight on squared gate excess outside `[u_lo, u_hi]`.
    pub input_weight: f64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            grid_rows: 4,
            grid_cols: 4,
            mfd_c: 0.006,
            jam: 15000.0,
            dt: 60.0,
            demand_rate: 0.01,
            u_lo: 0.1,
            u_hi: 1.0,
            network: None,
            demand_decay_steps: 30,
            episode_len: 60,
            high_cells: vec![(1, 5), (0, 6), (5, 0), (6, 1)],
            high_prior: CellPrior { mean: 4000.0, std: 100.0 },
            ood_high_prior: CellPrior { mean: 5000.0, std: 200.0 },
            low_prior: CellPrior { mean: 150.0, std: 20.0 },
            clip_max: 15000.0,
            q_cell: 1e-6,
            r_gate: 0.0,
            region_cap: 6000.0,
            cap_weight: 1e-4,
            input_weight: 1e3,
        }
    }
}

impl TrafficConfig {
    pub fn network_spec(&self) -> TrafficNetworkSpec {
        self.network.clone().unwrap_or_else(|| {
            TrafficNetworkSpec::grid(
                self.grid_rows,
                self.grid_cols,
                Mfd::symmetric_cubic(self.mfd_c, self.jam),
                self.demand_rate,
                self.dt,
                self.u_lo,
                self.u_hi,
            )
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrafficTask<T: Scalar> {
    cfg: TrafficConfig,
    regions: usize,
    n_gates: usize,
    context: CostContext<T>,
}

impl<T: Scalar> TrafficTask<T> {
    pub fn new(cfg: TrafficConfig, net: &TrafficNetwork<T>) -> Result<Self> {
        let r = net.regions();
        for &(i, j) in &cfg.high_cells {
            if i >= r || j >= r {
                return Err(Error::invalid(format!("high-traffic cell ({i}, {j}) outside a {r}-region network")));
            }
        }
        let n = r * r;
        let m = net.input_dim();
        let state_constraints = (0..r)
            .map(|i| LinearConstraint {
                coeffs: (0..r).map(|j| (i * r + j, T::one())).collect(),
                lower: None,
                upper: Some(T::of(cfg.region_cap)),
                weight: T::of(cfg.cap_weight),
            })
            .collect();
        let context = CostContext {
            x_ref: vec![T::zero(); n],
            u_ref: vec![T::of(cfg.u_hi); m],
            q: vec![T::of(cfg.q_cell); n],
            r: vec![T::of(cfg.r_gate); m],
            state_constraints,
            input_penalty: Some(InputPenalty {
                lower: vec![T::of(cfg.u_lo); m],
                upper: vec![T::of(cfg.u_hi); m],
                weight: T::of(cfg.input_weight),
            }),
            exo: Vec::new(),
        };
        Ok(Self {
            cfg,
            regions: r,
            n_gates: m,
            context,
        })
    }

    /// Demand scale at step `t`.
    pub fn demand_scale(&self, t: usize) -> f64 {
        if self.cfg.demand_decay_steps == 0 {
            return 0.0;
        }
        (1.0 - t as f64 / self.cfg.demand_decay_steps as f64).max(0.0)
    }

    pub fn gates(&self) -> usize {
        self.n_gates
    }
}

struct FixedHorizon;

impl<T: Scalar> EpisodeMonitor<T> for FixedHorizon {
    fn observe(&mut self, _x: &[T], _t: usize) -> EpisodeStatus {
        EpisodeStatus::Running
    }

    fn on_budget_exhausted(&self) -> EpisodeStatus {
        EpisodeStatus::Success
    }
}

impl<T: Scalar> Task<T> for TrafficTask<T> {
    fn horizon(&self, _x: &[T], t: usize, len: usize) -> HorizonData<T> {
        HorizonData {
            contexts: vec![self.context.clone(); len],
            params: (t..t + len).map(|k| vec![T::of(self.demand_scale(k))]).collect(),
        }
    }

    /// Cells, region totals and the demand scale.
    fn feature_dim(&self) -> usize {
        self.regions * self.regions + self.regions + 1
    }

    fn features(&self, x: &[T], _ctx: &CostContext<T>, xi: &[T]) -> Vec<T> {
        let r = self.regions;
        let mut f = x.to_vec();
        f.extend(x.chunks(r).map(|row| row.iter().copied().sum::<T>()));
        f.push(xi.first().copied().unwrap_or(T::zero()));
        f
    }

    fn features_vjp(&self, _x: &[T], _ctx: &CostContext<T>, _xi: &[T], g: &[T]) -> Vec<T> {
        let r = self.regions;
        let n = r * r;
        (0..n).map(|k| g[k] + g[n + k / r]).collect()
    }

    fn sample_initial(&self, rng: &mut ChaCha8Rng, dist: InitDistribution) -> Vec<T> {
        let c = &self.cfg;
        let r = self.regions;
        let clip = |v: f64| v.max(0.0).min(c.clip_max);
        let mut x: Vec<f64> = (0..r * r).map(|_| clip(normal(rng, c.low_prior.mean, c.low_prior.std))).collect();
        let high = match dist {
            InitDistribution::InDistribution => &c.high_prior,
            InitDistribution::OutOfDistribution => &c.ood_high_prior,
        };
        for &(i, j) in &c.high_cells {
            x[i * r + j] = clip(normal(rng, high.mean, high.std));
        }
        x.into_iter().map(T::of).collect()
    }

    fn admissible(&self, x: &[T]) -> bool {
        x.iter().all(|v| v.is_finite() && *v >= T::zero())
    }

    fn monitor(&self, _x0: &[T]) -> Box<dyn EpisodeMonitor<T>> {
        Box::new(FixedHorizon)
    }

    fn episode_len(&self) -> usize {
        self.cfg.episode_len
    }

    fn violation(&self, x: &[T], u: &[T], tol: T) -> bool {
        x.iter().any(|v| *v < -tol)
            || u.iter().any(|v| *v < T::of(self.cfg.u_lo) - tol || *v > T::of(self.cfg.u_hi) + tol)
    }

    fn is_traffic(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fd::{finite_diff_jacobian, rel_err};
    use rand::{Rng, SeedableRng};

    fn default_net() -> TrafficNetwork<f64> {
        TrafficNetwork::new(TrafficConfig::default().network_spec()).unwrap()
    }

    #[test]
    fn grid_shape() {
        let net = default_net();
        assert_eq!(net.regions(), 16);
        assert_eq!(net.input_dim(), 48);
        assert_eq!(net.state_dim(), 256);
    }

    #[test]
    fn mfd_peaks_at_a_third_of_jam_and_vanishes_at_jam() {
        let m = Mfd::symmetric_cubic(0.006, 15000.0);
        assert!(m.flow(15000.0).abs() < 1e-9);
        assert!(m.flow(5000.0) > m.flow(4900.0) && m.flow(5000.0) > m.flow(5100.0));
        assert_eq!(m.flow(16000.0), 0.0);
    }

    #[test]
    fn empty_network_is_a_fixed_point() {
        let net = default_net();
        let x = vec![0.0; 256];
        let u = vec![1.0; 48];
        assert_eq!(net.traffic_step(&x, &u, 0.0).unwrap(), x);
    }

    #[test]
    fn single_region_drains_by_the_mfd() {
        let spec = TrafficNetworkSpec {
            regions: 1,
            adjacency: vec![vec![]],
            mfd: vec![Mfd::symmetric_cubic(0.006, 15000.0)],
            routing: vec![],
            demand: vec![0.0],
            dt: 60.0,
            u_lo: 0.1,
            u_hi: 1.0,
            eps_empty: 1e-6,
        };
        let net = TrafficNetwork::<f64>::new(spec).unwrap();
        let next = net.traffic_step(&[100.0], &[], 1.0).unwrap();
        // g(100) = 0.006·100·(1 − 100/15000)² by hand.
        let g = 0.006 * 100.0 * (1.0f64 - 100.0 / 15000.0).powi(2);
        assert!((next[0] - (100.0 - 60.0 * g)).abs() < 1e-9);
        let mut x = vec![100.0];
        for _ in 0..100 {
            x = net.traffic_step(&x, &[], 1.0).unwrap();
            assert!(x[0] >= 0.0);
        }
    }

    #[test]
    fn closed_gates_stop_transfers() {
        let net = default_net();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..256).map(|_| rng.random_range(0.0..500.0)).collect();
        let next = net.traffic_step(&x, &vec![0.0; 48], 0.0).unwrap();
        let totals = net.region_totals(&x);
        for i in 0..16 {
            for j in 0..16 {
                let k = i * 16 + j;
                if i == j {
                    assert!((next[k] - (x[k] - 60.0 * x[k] / totals[i] * net.mfd_flow(i, totals[i]))).abs() < 1e-9);
                } else {
                    assert_eq!(next[k], x[k]);
                }
            }
        }
    }

    #[test]
    fn transfers_conserve_vehicles() {
        let net = default_net();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<f64> = (0..256).map(|_| rng.random_range(0.0..800.0)).collect();
        let u: Vec<f64> = (0..48).map(|_| rng.random_range(0.1..1.0)).collect();
        let next = net.traffic_step(&x, &u, 0.0).unwrap();
        let totals = net.region_totals(&x);
        let completed: f64 = (0..16).map(|i| 60.0 * x[i * 17] / totals[i] * net.mfd_flow(i, totals[i])).sum();
        let before: f64 = x.iter().sum();
        let after: f64 = next.iter().sum();
        assert!((before - completed - after).abs() < 1e-6);
    }

    #[test]
    fn bad_routing_and_demand_are_rejected() {
        let mut spec = TrafficConfig::default().network_spec();
        spec.routing[0].fraction = 0.3;
        assert!(TrafficNetwork::<f64>::new(spec).is_err());
        let mut spec = TrafficConfig::default().network_spec();
        spec.demand[3] = -1.0;
        assert!(TrafficNetwork::<f64>::new(spec).is_err());
    }

    #[test]
    fn vjps_match_finite_differences() {
        let net = default_net();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..256).map(|_| rng.random_range(50.0..600.0)).collect();
        let u: Vec<f64> = (0..48).map(|_| rng.random_range(0.1..1.0)).collect();
        let xi = [0.7];
        let cot: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fu = finite_diff_jacobian(|u| net.step(&x, u, &xi), &u, 1e-5).unwrap();
        let (gx, gu) = net.vjp(&x, &u, &xi, &cot);
        assert!(rel_err(&gu, &fu.tr_mul_vec(&cot)) < 1e-7);
        let fx = finite_diff_jacobian(|x| net.step(x, &u, &xi), &x, 1e-3).unwrap();
        assert!(rel_err(&gx, &fx.tr_mul_vec(&cot)) < 1e-7);
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = TrafficConfig::default().network_spec();
        let text = spec.to_toml().unwrap();
        assert_eq!(TrafficNetworkSpec::from_toml(&text).unwrap(), spec);
    }

    #[test]
    fn no_clamping_needed_below_the_euler_threshold() {
        // dt·c·u_hi = 0.36 < 1, so the pre-clamp state is already nonnegative.
        let net = default_net();
        let task = TrafficTask::new(TrafficConfig::default(), &net).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = task.sample_initial(&mut rng, InitDistribution::OutOfDistribution);
        for t in 0..60 {
            let (_, pre) = net.euler(&x, &vec![1.0; 48], task.demand_scale(t));
            assert!(pre.iter().all(|v| *v >= 0.0));
            x = net.transition(&x, &vec![1.0; 48], &[task.demand_scale(t)]);
        }
    }
}
