//! Neural sampling-distribution policy and its deterministic (DPC) variant.
//!
//! A tanh MLP backbone feeds two linear heads. The mean head is squashed
//! into the input box as `u_mid + u_half ⊙ tanh(·)`. The Cholesky head emits
//! `n(n+1)/2` packed lower-triangular entries; diagonal entries pass through
//! `softplus(·) + diag_floor`, the rest are used as is. The DPC policy has
//! the mean head only.
//!
//! All weights live in one flat vector; [`LayerSlice`] records where each
//! layer's weight matrix (row-major, `out × in`) and bias start.

pub mod checkpoint;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::DistributionParams;
use crate::numerics::linalg::{tri_index, tri_len, CholeskyFactor, Matrix};
use crate::scalar::Scalar;

pub use checkpoint::{checkpoint_load, checkpoint_save, Checkpoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, a: T) -> T {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Identity => a,
        }
    }

    /// Derivative expressed through the activation output.
    fn grad_from_output<T: Scalar>(self, h: T) -> T {
        match self {
            Activation::Tanh => T::one() - h * h,
            Activation::Identity => T::one(),
        }
    }
}

/// Architecture and output parameterization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub u_lower: Vec<f64>,
    pub u_upper: Vec<f64>,
    /// Whether the Cholesky head exists (Step-MPPI) or not (DPC).
    pub chol_head: bool,
    pub diag_floor: f64,
}

impl PolicyShape {
    pub fn output_dim(&self) -> usize {
        self.u_lower.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim() == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid("policy layers must have at least one unit"));
        }
        if self.u_lower.len() != self.u_upper.len() || self.u_lower.iter().zip(&self.u_upper).any(|(l, u)| !(l < u)) {
            return Err(Error::invalid("policy bounds need lower < upper"));
        }
        if !(self.diag_floor > 0.0) {
            return Err(Error::invalid("diag_floor must be positive"));
        }
        Ok(())
    }

    /// `(in, out)` of every dense layer: backbone, mean head, then the Cholesky head.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim()));
        if self.chol_head {
            dims.push((prev, tri_len(self.output_dim())));
        }
        dims
    }
}

/// Position of one dense layer inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSlice {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams<T> {
    shape: PolicyShape,
    layout: Vec<LayerSlice>,
    data: Vec<T>,
}

fn layout_for(shape: &PolicyShape) -> (Vec<LayerSlice>, usize) {
    let mut off = 0;
    let layout = shape
        .layer_dims()
        .into_iter()
        .map(|(i, o)| {
            let s = LayerSlice {
                inputs: i,
                outputs: o,
                weight: off,
                bias: off + i * o,
            };
            off += i * o + o;
            s
        })
        .collect();
    (layout, off)
}

impl<T: Scalar> PolicyParams<T> {
    pub fn zeros(shape: PolicyShape) -> Result<Self> {
        shape.validate()?;
        let (layout, n) = layout_for(&shape);
        Ok(Self {
            shape,
            layout,
            data: vec![T::zero(); n],
        })
    }

    pub fn from_flat(shape: PolicyShape, data: Vec<T>) -> Result<Self> {
        let mut p = Self::zeros(shape)?;
        if data.len() != p.data.len() {
            return Err(Error::invalid(format!(
                "policy expects {} parameters, got {}",
                p.data.len(),
                data.len()
            )));
        }
        p.data = data;
        Ok(p)
    }

    pub fn shape(&self) -> &PolicyShape {
        &self.shape
    }

    pub fn layout(&self) -> &[LayerSlice] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn flat(&self) -> &[T] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    fn backbone(&self) -> &[LayerSlice] {
        &self.layout[..self.shape.hidden.len()]
    }

    fn mean_head(&self) -> LayerSlice {
        self.layout[self.shape.hidden.len()]
    }

    fn chol_head(&self) -> Option<LayerSlice> {
        self.shape.chol_head.then(|| self.layout[self.shape.hidden.len() + 1])
    }

    fn dense(&self, s: LayerSlice, input: &[T]) -> Vec<T> {
        let w = &self.data[s.weight..s.bias];
        let b = &self.data[s.bias..s.bias + s.outputs];
        (0..s.outputs)
            .map(|o| {
                let row = &w[o * s.inputs..(o + 1) * s.inputs];
                row.iter().zip(input).fold(b[o], |acc, (&a, &x)| acc + a * x)
            })
            .collect()
    }

    /// Accumulates `d ⊗ input` into `grad` and returns `Wᵀ d`.
    fn dense_backward(&self, s: LayerSlice, input: &[T], d: &[T], grad: &mut [T]) -> Vec<T> {
        let w = &self.data[s.weight..s.bias];
        let mut dx = vec![T::zero(); s.inputs];
        for o in 0..s.outputs {
            if d[o] == T::zero() {
                continue;
            }
            let row = &w[o * s.inputs..(o + 1) * s.inputs];
            let grow = &mut grad[s.weight + o * s.inputs..s.weight + (o + 1) * s.inputs];
            for i in 0..s.inputs {
                grow[i] += d[o] * input[i];
                dx[i] += d[o] * row[i];
            }
            grad[s.bias + o] += d[o];
        }
        dx
    }

    pub fn cast<U: Scalar>(&self) -> PolicyParams<U> {
        PolicyParams {
            shape: self.shape.clone(),
            layout: self.layout.clone(),
            data: crate::scalar::cast_slice(&self.data),
        }
    }
}

/// Intermediate values from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTape<T> {
    /// `activations[0]` is the input; `activations[i + 1]` is backbone layer `i`'s output.
    pub activations: Vec<Vec<T>>,
    /// `tanh` of the mean-head pre-activation.
    pub mean_tanh: Vec<T>,
    /// Cholesky-head pre-activations, packed.
    pub chol_pre: Vec<T>,
}

fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + eˣ) without overflow for large x.
    if x > T::of(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `softplus⁻¹(y) = log(eʸ − 1)`
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn check_finite<T: Scalar>(v: &[T], layer: impl Into<String>) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericOverflow { layer: layer.into() })
    }
}

fn forward_backbone<T: Scalar>(params: &PolicyParams<T>, input: &[T]) -> Result<Vec<Vec<T>>> {
    if input.len() != params.shape.input_dim {
        return Err(Error::invalid(format!(
            "policy expects {} inputs, got {}",
            params.shape.input_dim,
            input.len()
        )));
    }
    check_finite(input, "input")?;
    let act = params.shape.activation;
    let mut activations = vec![input.to_vec()];
    for (i, &s) in params.backbone().iter().enumerate() {
        let pre = params.dense(s, activations.last().unwrap());
        let h: Vec<T> = pre.into_iter().map(|a| act.apply(a)).collect();
        check_finite(&h, format!("hidden{i}"))?;
        activations.push(h);
    }
    Ok(activations)
}

fn squash_mean<T: Scalar>(shape: &PolicyShape, t: &[T]) -> Vec<T> {
    t.iter()
        .zip(shape.u_lower.iter().zip(&shape.u_upper))
        .map(|(&th, (&lo, &hi))| T::of(0.5 * (lo + hi)) + T::of(0.5 * (hi - lo)) * th)
        .collect()
}

/// `(z, tape)`; the input is already normalized.
pub fn policy_forward<T: Scalar>(params: &PolicyParams<T>, input: &[T]) -> Result<(DistributionParams<T>, PolicyTape<T>)> {
    let head = params
        .chol_head()
        .ok_or_else(|| Error::invalid("policy has no Cholesky head; use dpc_forward"))?;
    let activations = forward_backbone(params, input)?;
    let h = activations.last().unwrap();
    let mean_pre = params.dense(params.mean_head(), h);
    check_finite(&mean_pre, "mean_head")?;
    let mean_tanh: Vec<T> = mean_pre.iter().map(|a| a.tanh()).collect();
    let chol_pre = params.dense(head, h);
    check_finite(&chol_pre, "chol_head")?;
    let n = params.shape.output_dim();
    let floor = T::of(params.shape.diag_floor);
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            l[(i, j)] = chol_pre[tri_index(i, j)];
        }
        l[(i, i)] = softplus(chol_pre[tri_index(i, i)]) + floor;
    }
    let z = DistributionParams {
        mu: squash_mean(&params.shape, &mean_tanh),
        l: CholeskyFactor::new(l, floor)?,
    };
    Ok((
        z,
        PolicyTape {
            activations,
            mean_tanh,
            chol_pre,
        },
    ))
}

fn backbone_backward<T: Scalar>(params: &PolicyParams<T>, tape: &PolicyTape<T>, mut dh: Vec<T>, grad: &mut [T]) -> Vec<T> {
    let act = params.shape.activation;
    for (i, &s) in params.backbone().iter().enumerate().rev() {
        let out = &tape.activations[i + 1];
        let da: Vec<T> = dh.iter().zip(out).map(|(&g, &h)| g * act.grad_from_output(h)).collect();
        dh = params.dense_backward(s, &tape.activations[i], &da, grad);
    }
    dh
}

fn mean_head_delta<T: Scalar>(shape: &PolicyShape, tape: &PolicyTape<T>, grad_mu: &[T]) -> Vec<T> {
    grad_mu
        .iter()
        .zip(&tape.mean_tanh)
        .zip(shape.u_lower.iter().zip(&shape.u_upper))
        .map(|((&g, &t), (&lo, &hi))| g * T::of(0.5 * (hi - lo)) * (T::one() - t * t))
        .collect()
}

/// `(∂/∂θ, ∂/∂input)` of `⟨grad_mu, μ⟩ + ⟨grad_l, L⟩`; only the lower triangle of `grad_l` is read.
pub fn policy_backward<T: Scalar>(
    params: &PolicyParams<T>,
    tape: &PolicyTape<T>,
    grad_mu: &[T],
    grad_l: &Matrix<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    let head = params
        .chol_head()
        .ok_or_else(|| Error::invalid("policy has no Cholesky head; use dpc_backward"))?;
    let n = params.shape.output_dim();
    if grad_mu.len() != n || grad_l.rows() != n || grad_l.cols() != n {
        return Err(Error::invalid("policy_backward: gradient dimensions disagree"));
    }
    let mut grad = vec![T::zero(); params.len()];
    let h = tape.activations.last().unwrap();
    let dm = mean_head_delta(&params.shape, tape, grad_mu);
    let mut dh = params.dense_backward(params.mean_head(), h, &dm, &mut grad);
    let mut dc = vec![T::zero(); tri_len(n)];
    for i in 0..n {
        for j in 0..i {
            dc[tri_index(i, j)] = grad_l[(i, j)];
        }
        let k = tri_index(i, i);
        dc[k] = grad_l[(i, i)] * sigmoid(tape.chol_pre[k]);
    }
    let dh2 = params.dense_backward(head, h, &dc, &mut grad);
    for (a, b) in dh.iter_mut().zip(dh2) {
        *a += b;
    }
    let grad_input = backbone_backward(params, tape, dh, &mut grad);
    Ok((grad, grad_input))
}

/// Deterministic control `u = u_mid + u_half ⊙ tanh(·)`.
pub fn dpc_forward<T: Scalar>(params: &PolicyParams<T>, input: &[T]) -> Result<(Vec<T>, PolicyTape<T>)> {
    let activations = forward_backbone(params, input)?;
    let mean_pre = params.dense(params.mean_head(), activations.last().unwrap());
    check_finite(&mean_pre, "mean_head")?;
    let mean_tanh: Vec<T> = mean_pre.iter().map(|a| a.tanh()).collect();
    Ok((
        squash_mean(&params.shape, &mean_tanh),
        PolicyTape {
            activations,
            mean_tanh,
            chol_pre: Vec::new(),
        },
    ))
}

pub fn dpc_backward<T: Scalar>(params: &PolicyParams<T>, tape: &PolicyTape<T>, grad_u: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    if grad_u.len() != params.shape.output_dim() {
        return Err(Error::invalid("dpc_backward: gradient dimension disagrees"));
    }
    let mut grad = vec![T::zero(); params.len()];
    let dm = mean_head_delta(&params.shape, tape, grad_u);
    let dh = params.dense_backward(params.mean_head(), tape.activations.last().unwrap(), &dm, &mut grad);
    let grad_input = backbone_backward(params, tape, dh, &mut grad);
    Ok((grad, grad_input))
}

/// Fan-in uniform weights `U(−1/√fan_in, 1/√fan_in)`, zero biases. The
/// Cholesky head starts with near-zero weights and diagonal biases
/// `softplus⁻¹(σ₀ − floor)`, so the initial `L ≈ diag(σ₀)`.
pub fn policy_init<T: Scalar>(shape: PolicyShape, sigma0: &[f64], rng: &mut ChaCha8Rng) -> Result<PolicyParams<T>> {
    let mut p = PolicyParams::<T>::zeros(shape)?;
    let n = p.shape.output_dim();
    if p.shape.chol_head && sigma0.len() != n {
        return Err(Error::invalid(format!("sigma0 needs {n} entries")));
    }
    if sigma0.iter().any(|&s| !(s > p.shape.diag_floor)) {
        return Err(Error::invalid("sigma0 must exceed diag_floor"));
    }
    let chol = p.chol_head();
    for s in p.layout.clone() {
        let bound = 1.0 / (s.inputs as f64).sqrt();
        let scale = if Some(s) == chol { 1e-2 } else { 1.0 };
        for w in &mut p.data[s.weight..s.bias] {
            *w = T::of(scale * rng.random_range(-bound..bound));
        }
    }
    if let Some(s) = chol {
        for (i, &sig) in sigma0.iter().enumerate() {
            p.data[s.bias + tri_index(i, i)] = T::of(softplus_inverse(sig - p.shape.diag_floor));
        }
    }
    Ok(p)
}

/// Per-dimension affine standardization `(x − mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Sample statistics; dimensions with std below `min_std` use `max(min_std, 1)`.
    pub fn fit<T: Scalar>(rows: &[Vec<T>], min_std: f64) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::invalid("cannot fit a normalizer to no data"))?;
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v.as_f64() / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v.as_f64() - m).powi(2) / n;
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = v.sqrt();
                if s < min_std {
                    min_std.max(1.0)
                } else {
                    s
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| (v - T::of(m)) / T::of(s))
            .collect()
    }

    /// Chain rule through `apply`.
    pub fn backward<T: Scalar>(&self, grad: &[T]) -> Vec<T> {
        grad.iter().zip(&self.std).map(|(&g, &s)| g / T::of(s)).collect()
    }
}
