//! Central-difference gradient oracle.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gradient of a scalar-valued function by central differences:
/// g_i = (f(x + h e_i) - f(x - h e_i)) / (2 h).
///
/// `f` must be deterministic. Returns a numeric error if any evaluation is
/// non-finite.
pub fn finite_diff_grad<T: Scalar>(
    f: &mut dyn FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    h: f64,
) -> Result<Tensor<T>> {
    if !(h > 0.0) {
        return Err(Error::Config("finite_diff_grad: h must be positive".into()));
    }
    let mut grad = vec![T::ZERO; x.numel()];
    let mut probe = x.data().to_vec();
    for i in 0..x.numel() {
        let orig = probe[i];
        probe[i] = orig + T::from_f64(h);
        let plus = f(&Tensor::with_node(x.shape().to_vec(), probe.clone(), None))?;
        probe[i] = orig - T::from_f64(h);
        let minus = f(&Tensor::with_node(x.shape().to_vec(), probe.clone(), None))?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "finite_diff_grad: non-finite evaluation at coordinate {i}"
            )));
        }
        grad[i] = T::from_f64((plus.to_f64() - minus.to_f64()) / (2.0 * h));
    }
    Ok(Tensor::with_node(x.shape().to_vec(), grad, None))
}

/// Same oracle restricted to a subset of coordinates; entries outside
/// `coords` are left at zero. Used where probing every coordinate of a large
/// parameter tensor would be wasteful.
pub fn finite_diff_grad_at<T: Scalar>(
    f: &mut dyn FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    h: f64,
    coords: &[usize],
) -> Result<Tensor<T>> {
    if !(h > 0.0) {
        return Err(Error::Config("finite_diff_grad: h must be positive".into()));
    }
    let mut grad = vec![T::ZERO; x.numel()];
    let mut probe = x.data().to_vec();
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + T::from_f64(h);
        let plus = f(&Tensor::with_node(x.shape().to_vec(), probe.clone(), None))?;
        probe[i] = orig - T::from_f64(h);
        let minus = f(&Tensor::with_node(x.shape().to_vec(), probe.clone(), None))?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "finite_diff_grad: non-finite evaluation at coordinate {i}"
            )));
        }
        grad[i] = T::from_f64((plus.to_f64() - minus.to_f64()) / (2.0 * h));
    }
    Ok(Tensor::with_node(x.shape().to_vec(), grad, None))
}
