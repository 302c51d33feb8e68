//! Central finite differences, the reference every analytic gradient is checked against.

use crate::error::{Error, Result};
use crate::numerics::linalg::{all_finite, norm, Matrix};
use crate::scalar::Scalar;

/// Central-difference Jacobian of `f` at `x0`, one column per input.
pub fn finite_diff_jacobian<T, F>(f: F, x0: &[T], h: T) -> Result<Matrix<T>>
where
    T: Scalar,
    F: Fn(&[T]) -> Result<Vec<T>>,
{
    if !(h > T::zero()) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let f0 = f(x0)?;
    if !all_finite(&f0) {
        return Err(Error::Evaluation("f(x0) is not finite".into()));
    }
    let mut jac = Matrix::zeros(f0.len(), x0.len());
    let mut x = x0.to_vec();
    let two_h = h + h;
    for j in 0..x0.len() {
        x[j] = x0[j] + h;
        let fp = f(&x)?;
        x[j] = x0[j] - h;
        let fm = f(&x)?;
        x[j] = x0[j];
        if fp.len() != f0.len() || fm.len() != f0.len() {
            return Err(Error::Evaluation(format!("output dimension changed at column {j}")));
        }
        if !all_finite(&fp) || !all_finite(&fm) {
            return Err(Error::Evaluation(format!("non-finite output perturbing input {j}")));
        }
        let col: Vec<T> = fp.iter().zip(&fm).map(|(&a, &b)| (a - b) / two_h).collect();
        jac.set_column(j, &col);
    }
    Ok(jac)
}

/// Central difference of a scalar function, i.e. its gradient.
pub fn finite_diff_gradient<T, F>(f: F, x0: &[T], h: T) -> Result<Vec<T>>
where
    T: Scalar,
    F: Fn(&[T]) -> Result<T>,
{
    let jac = finite_diff_jacobian(|x| f(x).map(|v| vec![v]), x0, h)?;
    Ok(jac.row(0).to_vec())
}

/// Relative error `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`; zero when both vanish.
///
/// Norm-wise rather than entrywise, so exact zeros in one operand do not
/// blow up against finite-difference round-off in the other.
pub fn rel_err<T: Scalar>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len(), "rel_err operands differ in length");
    let diff: Vec<T> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == T::zero() {
        return T::zero();
    }
    norm(&diff) / scale
}
