use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        let v = v.f64();
        T::of(v * normal_cdf(v))
    })
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::of(sigmoid_scalar(v.f64())))
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn zip_grad<T: Real>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape(format!(
            "grad_out {:?} does not match activation input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| T::of(f(x.f64(), g.f64())))
        .collect();
    Tensor::from_values(input.shape(), data)
}

/// Gradient of GELU given its input.
pub fn gelu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    zip_grad(input, grad_out, |x, g| g * (normal_cdf(x) + x * normal_pdf(x)))
}

/// Gradient of ReLU given its input; zero where the input is negative.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    zip_grad(input, grad_out, |x, g| if x > 0.0 { g } else { 0.0 })
}

/// Gradient of the sigmoid given its *output*.
pub fn sigmoid_backward<T: Real>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    zip_grad(output, grad_out, |y, g| g * y * (1.0 - y))
}

/// Multiplies every channel of an `(N, C, H, W)` tensor by its own factor.
pub fn channel_scale<T: Real>(x: &Tensor<T>, scale: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if scale.len() != c {
        return Err(Error::shape(format!("{} scale factors for {c} channels", scale.len())));
    }
    let plane = h * w;
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let k = scale.data()[i % c];
        chunk.iter_mut().for_each(|v| *v = *v * k);
    }
    debug_assert_eq!(out.len(), n * c * plane);
    Ok(out)
}

/// Returns `(grad_input, grad_scale)`.
pub fn channel_scale_backward<T: Real>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, c, h, w) = x.dims4()?;
    if grad_out.shape() != x.shape() {
        return Err(Error::shape("grad_out does not match channel_scale input"));
    }
    let plane = h * w;
    let gx = channel_scale(grad_out, scale)?;
    let mut gs = vec![0f64; c];
    for (i, (xc, gc)) in x.data().chunks(plane).zip(grad_out.data().chunks(plane)).enumerate() {
        gs[i % c] += xc.iter().zip(gc).map(|(a, b)| a.f64() * b.f64()).sum::<f64>();
    }
    Ok((gx, Tensor::from_values(&[c], gs.into_iter().map(T::of).collect())?))
}

/// Swaps the channel and frequency axes: `(N, C, H, W) -> (N, W, H, C)`.
/// Its own inverse, so it also serves as its backward.
pub fn swap_channel_freq<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        for ch in 0..c {
            for t in 0..h {
                for f in 0..w {
                    out[((b * w + f) * h + t) * c + ch] = src[((b * c + ch) * h + t) * w + f];
                }
            }
        }
    }
    Tensor::from_values(&[n, w, h, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_values() {
        let x = Tensor::from_values(&[3], vec![0.0f64, -2.0, 1.0]).unwrap();
        assert_eq!(gelu(&x).data()[0], 0.0);
        assert_eq!(relu(&x).data()[1], 0.0);
        assert_eq!(sigmoid(&x).data()[0], 0.5);
        assert!((gelu(&x).data()[2] - 0.841_344_746_068_543).abs() < 1e-12);
    }

    #[test]
    fn relu_backward_masks_negatives() {
        let x = Tensor::from_values(&[4], vec![-1.0f32, 2.0, -0.5, 3.0]).unwrap();
        let g = Tensor::full(&[4], 1.0f32).unwrap();
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let x = Tensor::from_values(&[2], vec![-800.0f64, 800.0]).unwrap();
        let y = sigmoid(&x);
        assert_eq!(y.data(), &[0.0, 1.0]);
    }

    #[test]
    fn swap_is_an_involution() {
        let x = Tensor::from_values(&[2, 3, 4, 5], (0..120).map(|v| v as f32).collect()).unwrap();
        let s = swap_channel_freq(&x).unwrap();
        assert_eq!(s.shape(), &[2, 5, 4, 3]);
        assert_eq!(s.get(&[1, 4, 2, 1]).unwrap(), x.get(&[1, 1, 2, 4]).unwrap());
        assert_eq!(swap_channel_freq(&s).unwrap(), x);
    }
}
