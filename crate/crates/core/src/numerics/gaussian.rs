//! Gaussian sampling primitives: softmax weighting, reparameterized draws,
//! entropy and its gradient.

use crate::error::{Error, Result};
use crate::numerics::linalg::{lower_part, CholeskyFactor, Matrix, Vector};
use crate::scalar::Scalar;

/// `w_k = exp(-s_k / λ) / Σ_j exp(-s_j / λ)`.
///
/// The minimum cost is subtracted before exponentiating; costs in the
/// thousands would otherwise underflow every weight to zero.
pub fn softmax_neg_scaled<T: Scalar>(costs: &[T], lambda: T) -> Result<Vector<T>> {
    if !(lambda > T::zero()) || !lambda.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {lambda}")));
    }
    if costs.is_empty() {
        return Err(Error::invalid("softmax of an empty cost vector"));
    }
    if let Some(i) = costs.iter().position(|c| !c.is_finite()) {
        return Err(Error::invalid(format!("cost {i} is not finite")));
    }
    let min = costs.iter().copied().fold(T::infinity(), T::min);
    let mut w: Vec<T> = costs.iter().map(|&c| (-(c - min) / lambda).exp()).collect();
    let total: T = w.iter().copied().sum();
    for wk in &mut w {
        *wk /= total;
    }
    Ok(Vector::from(w))
}

/// `μ + L ε` with caller-supplied noise.
pub fn reparam_sample<T: Scalar>(mu: &[T], l: &CholeskyFactor<T>, eps: &[T]) -> Result<Vector<T>> {
    if mu.len() != l.dim() || eps.len() != l.dim() {
        return Err(Error::invalid(format!(
            "reparam_sample: mean {} / factor {} / noise {} dimensions disagree",
            mu.len(),
            l.dim(),
            eps.len()
        )));
    }
    let mut u = l.mul_vec(eps);
    for (ui, &m) in u.iter_mut().zip(mu) {
        *ui += m;
    }
    Ok(Vector::from(u))
}

/// Differential entropy of `N(μ, L Lᵀ)`: `(d/2) log(2πe) + Σ log L_ii`.
pub fn gaussian_entropy<T: Scalar>(l: &CholeskyFactor<T>) -> Result<T> {
    let d = l.dim();
    let two_pi_e = T::of(2.0) * T::PI() * T::E();
    let mut h = T::of(d as f64) * T::of(0.5) * two_pi_e.ln();
    for (i, lii) in l.diag().into_iter().enumerate() {
        if !(lii > T::zero()) {
            return Err(Error::invalid(format!("diagonal entry {i} is not positive")));
        }
        h += lii.ln();
    }
    Ok(h)
}

/// `∇_L H = (L⁻¹)ᵀ`, restricted to the lower-triangular entries of `L`.
///
/// For a triangular factor this leaves only the diagonal `1 / L_ii`; the
/// full transpose-inverse is formed anyway so singular factors surface as
/// errors.
pub fn entropy_grad_l<T: Scalar>(l: &CholeskyFactor<T>) -> Result<Matrix<T>> {
    let inv = l.inverse()?;
    Ok(lower_part(&inv.transpose()))
}
