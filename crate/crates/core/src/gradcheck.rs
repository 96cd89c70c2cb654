//! Central finite differences for checking backward passes.
//!
//! Everything here works from forward evaluations only, so it stays an
//! independent oracle for the analytic gradients.

use crate::tensor::{Real, Tensor};

/// Finite-difference step for element type `T`: `eps^(1/3)` scaled by the
/// magnitude of the coordinate.
pub fn step_for<T: Real>(x: f64) -> f64 {
    let eps = T::epsilon().f64();
    eps.cbrt() * x.abs().max(1.0)
}

/// Relative-error tolerance expected at element type `T`.
pub fn tolerance_for<T: Real>() -> f64 {
    if std::mem::size_of::<T>() <= 4 {
        1e-3
    } else {
        1e-6
    }
}

/// `sum_i y_i * r_i` accumulated in `f64`: projects an output onto a fixed
/// random cotangent so a vector function becomes a scalar objective.
pub fn weighted_sum<T: Real>(y: &Tensor<T>, r: &Tensor<T>) -> f64 {
    assert_eq!(y.shape(), r.shape(), "weighted_sum shape mismatch");
    y.data().iter().zip(r.data()).map(|(a, b)| a.f64() * b.f64()).sum()
}

/// Gradient of `f` at `x` by central differences, one coordinate at a time.
pub fn numerical_gradient<T: Real>(x: &Tensor<T>, f: impl Fn(&Tensor<T>) -> f64) -> Tensor<T> {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        let h = step_for::<T>(orig.f64());
        let plus = T::of(orig.f64() + h);
        let minus = T::of(orig.f64() - h);
        probe.data_mut()[i] = plus;
        let fp = f(&probe);
        probe.data_mut()[i] = minus;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        // use the step actually representable in T
        grad.push(T::of((fp - fm) / (plus.f64() - minus.f64())));
    }
    Tensor::from_values(x.shape(), grad).expect("same shape as x")
}

/// Directional derivative of `f` at `x` along `dir` by central differences.
pub fn directional_derivative<T: Real>(
    x: &Tensor<T>,
    dir: &Tensor<T>,
    h: f64,
    f: impl Fn(&Tensor<T>) -> f64,
) -> f64 {
    let shift = |s: f64| {
        let data = x.data().iter().zip(dir.data()).map(|(a, d)| T::of(a.f64() + s * d.f64())).collect();
        Tensor::from_values(x.shape(), data).expect("same shape as x")
    };
    (f(&shift(h)) - f(&shift(-h))) / (2.0 * h)
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`, with a floor that
/// keeps all-zero gradients from dividing by zero.
pub fn relative_error<T: Real, U: Real>(analytic: &Tensor<T>, numeric: &Tensor<U>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "relative_error shape mismatch");
    let mut diff = 0f64;
    let mut na = 0f64;
    let mut nn = 0f64;
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        let (a, n) = (a.f64(), n.f64());
        diff += (a - n).powi(2);
        na += a * a;
        nn += n * n;
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12)
}

/// Scalar relative error with the same floor as [`relative_error`].
pub fn scalar_relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}
