use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm2};
use crate::Scalar;

/// Finite-difference scheme for `vᵀ ∇²g(δ) v`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureScheme {
    /// `(g(δ+hv) − 2g(δ) + g(δ−hv)) / h²`.
    SecondDifference,
    /// `vᵀ(∇g(δ+hv) − ∇g(δ−hv)) / 2h` using exact gradients.
    #[default]
    GradientDifference,
}

/// `h = 1e-4 · max(1, ‖δ‖₂)`.
pub fn fd_step<T: Scalar>(delta: &[T]) -> T {
    T::of(1e-4) * T::one().max(norm2(delta))
}

fn check_args<T: Scalar>(v: &[T], h: T) -> Result<()> {
    if !((norm2(v) - T::one()).abs() <= T::of(1e-9)) {
        return Err(Error::config("curvature.v", "direction must be a unit vector"));
    }
    if !(h > T::zero() && h.is_finite()) {
        return Err(Error::config("curvature.h", "step must be positive"));
    }
    Ok(())
}

/// Central second difference of `g` along the unit direction `v`.
pub fn directional_curvature<T: Scalar>(
    g: impl Fn(&[T]) -> Result<T>,
    delta: &[T],
    v: &[T],
    h: T,
) -> Result<T> {
    check_args(v, h)?;
    let plus = g(&axpy(delta, h, v))?;
    let mid = g(delta)?;
    let minus = g(&axpy(delta, -h, v))?;
    let c = (plus - (mid + mid) + minus) / (h * h);
    if c.is_finite() {
        Ok(c)
    } else {
        Err(Error::numeric("directional curvature"))
    }
}

/// Central difference of the directional derivative `vᵀ∇g` along `v`.
pub fn directional_curvature_from_grad<T: Scalar>(
    grad: impl Fn(&[T]) -> Result<Vec<T>>,
    delta: &[T],
    v: &[T],
    h: T,
) -> Result<T> {
    check_args(v, h)?;
    let plus = dot(v, &grad(&axpy(delta, h, v))?);
    let minus = dot(v, &grad(&axpy(delta, -h, v))?);
    let c = (plus - minus) / (h + h);
    if c.is_finite() {
        Ok(c)
    } else {
        Err(Error::numeric("directional curvature"))
    }
}
