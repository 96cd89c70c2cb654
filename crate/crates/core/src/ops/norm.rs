//! Batch normalization over `(N, H, W)` and layer normalization over the
//! channel axis.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-6;

/// Per-channel batch-norm parameters and running statistics.
#[derive(Clone, Debug)]
pub struct NormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
}

impl<T: Real> NormParams<T> {
    pub fn identity(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::full(&[channels], T::one())?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], T::one())?,
            eps: BN_EPS,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::shape("batch-norm parameter lengths differ"));
        }
        if self.eps <= 0.0 {
            return Err(Error::invalid("batch-norm epsilon must be positive"));
        }
        if self.running_var.data().iter().any(|v| *v < T::zero()) {
            return Err(Error::invalid("negative running variance"));
        }
        Ok(())
    }
}

/// What the backward pass needs from a batch-norm forward call.
#[derive(Clone, Debug)]
pub struct BnSaved<T = f32> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<f64>,
    pub training: bool,
}

/// Batch statistics observed in training mode, plus the updated running
/// statistics (`momentum` blend, unbiased variance).
#[derive(Clone, Debug)]
pub struct BnUpdate<T = f32> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

#[allow(clippy::type_complexity)]
pub fn batch_norm2d<T: Real>(
    x: &Tensor<T>,
    p: &NormParams<T>,
    training: bool,
) -> Result<(Tensor<T>, BnSaved<T>, Option<BnUpdate<T>>)> {
    p.validate()?;
    let (n, c, h, w) = x.dims4()?;
    if c != p.channels() {
        return Err(Error::shape(format!(
            "input has {c} channels, batch norm has {}",
            p.channels()
        )));
    }
    let plane = h * w;
    let count = (n * plane) as f64;
    let xd = x.data();
    let mut mean = vec![0f64; c];
    let mut var = vec![0f64; c];
    if training {
        for ch in 0..c {
            let mut s = 0f64;
            for b in 0..n {
                s += xd[(b * c + ch) * plane..][..plane].iter().map(|v| v.f64()).sum::<f64>();
            }
            let m = s / count;
            let mut ss = 0f64;
            for b in 0..n {
                ss += xd[(b * c + ch) * plane..][..plane]
                    .iter()
                    .map(|v| (v.f64() - m).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = ss / count;
        }
    } else {
        for ch in 0..c {
            mean[ch] = p.running_mean.data()[ch].f64();
            var[ch] = p.running_var.data()[ch].f64();
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut y = vec![T::zero(); xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let g = p.gamma.data()[ch].f64();
            let be = p.beta.data()[ch].f64();
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let xh = (xd[i].f64() - mean[ch]) * inv_std[ch];
                xhat[i] = T::of(xh);
                y[i] = T::of(xh * g + be);
            }
        }
    }
    let update = if training {
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let rm = (0..c)
            .map(|ch| {
                T::of((1.0 - BN_MOMENTUM) * p.running_mean.data()[ch].f64() + BN_MOMENTUM * mean[ch])
            })
            .collect();
        let rv = (0..c)
            .map(|ch| {
                T::of((1.0 - BN_MOMENTUM) * p.running_var.data()[ch].f64() + BN_MOMENTUM * var[ch] * unbias)
            })
            .collect();
        Some(BnUpdate {
            running_mean: Tensor::from_values(&[c], rm)?,
            running_var: Tensor::from_values(&[c], rv)?,
        })
    } else {
        None
    };
    let shape = x.shape();
    Ok((
        Tensor::from_values(shape, y)?,
        BnSaved {
            xhat: Tensor::from_values(shape, xhat)?,
            inv_std,
            training,
        },
        update,
    ))
}

#[derive(Clone, Debug)]
pub struct AffineGrads<T = f32> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batch_norm2d_backward<T: Real>(
    saved: &BnSaved<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<AffineGrads<T>> {
    if grad_out.shape() != saved.xhat.shape() {
        return Err(Error::shape("grad_out does not match batch-norm input"));
    }
    let (n, c, h, w) = grad_out.dims4()?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let gd = grad_out.data();
    let xh = saved.xhat.data();
    let mut dgamma = vec![0f64; c];
    let mut dbeta = vec![0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dbeta[ch] += gd[i].f64();
                dgamma[ch] += gd[i].f64() * xh[i].f64();
            }
        }
    }
    let mut dx = vec![T::zero(); gd.len()];
    for b in 0..n {
        for ch in 0..c {
            let g = gamma.data()[ch].f64();
            let k = g * saved.inv_std[ch];
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let v = if saved.training {
                    k * (gd[i].f64() - dbeta[ch] / count - xh[i].f64() * dgamma[ch] / count)
                } else {
                    k * gd[i].f64()
                };
                dx[i] = T::of(v);
            }
        }
    }
    Ok(AffineGrads {
        input: Tensor::from_values(grad_out.shape(), dx)?,
        gamma: Tensor::from_values(&[c], dgamma.into_iter().map(T::of).collect())?,
        beta: Tensor::from_values(&[c], dbeta.into_iter().map(T::of).collect())?,
    })
}

#[derive(Clone, Debug)]
pub struct LnSaved<T = f32> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<f64>,
}

/// Normalizes the channel vector at every `(n, h, w)` position to zero mean
/// and unit (population) variance, then applies the per-channel affine map.
/// Rank-2 `(N, C)` inputs are treated as `(N, C, 1, 1)`.
pub fn layer_norm_channels<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LnSaved<T>)> {
    let (n, c, plane) = ln_dims(x)?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(format!(
            "layer norm over {c} channels got gamma {} / beta {}",
            gamma.len(),
            beta.len()
        )));
    }
    let xd = x.data();
    let mut y = vec![T::zero(); xd.len()];
    let mut xhat = vec![T::zero(); xd.len()];
    let mut inv_std = Vec::with_capacity(n * plane);
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let idx = |ch: usize| base + ch * plane + p;
            let mean = (0..c).map(|ch| xd[idx(ch)].f64()).sum::<f64>() / c as f64;
            let var = (0..c).map(|ch| (xd[idx(ch)].f64() - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for ch in 0..c {
                let xh = (xd[idx(ch)].f64() - mean) * is;
                xhat[idx(ch)] = T::of(xh);
                y[idx(ch)] = T::of(xh * gamma.data()[ch].f64() + beta.data()[ch].f64());
            }
        }
    }
    Ok((
        Tensor::from_values(x.shape(), y)?,
        LnSaved {
            xhat: Tensor::from_values(x.shape(), xhat)?,
            inv_std,
        },
    ))
}

fn ln_dims<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match x.shape() {
        &[n, c] => Ok((n, c, 1)),
        &[n, c, h, w] => Ok((n, c, h * w)),
        s => Err(Error::shape(format!("layer norm expects rank 2 or 4, got {s:?}"))),
    }
}

pub fn layer_norm_channels_backward<T: Real>(
    saved: &LnSaved<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<AffineGrads<T>> {
    if grad_out.shape() != saved.xhat.shape() {
        return Err(Error::shape("grad_out does not match layer-norm input"));
    }
    let (n, c, plane) = ln_dims(grad_out)?;
    let gd = grad_out.data();
    let xh = saved.xhat.data();
    let mut dx = vec![T::zero(); gd.len()];
    let mut dgamma = vec![0f64; c];
    let mut dbeta = vec![0f64; c];
    let mut dxhat = vec![0f64; c];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let idx = |ch: usize| base + ch * plane + p;
            let mut sum_d = 0f64;
            let mut sum_dx = 0f64;
            for ch in 0..c {
                let g = gd[idx(ch)].f64();
                let x = xh[idx(ch)].f64();
                dgamma[ch] += g * x;
                dbeta[ch] += g;
                dxhat[ch] = g * gamma.data()[ch].f64();
                sum_d += dxhat[ch];
                sum_dx += dxhat[ch] * x;
            }
            let is = saved.inv_std[b * plane + p];
            let cf = c as f64;
            for ch in 0..c {
                let x = xh[idx(ch)].f64();
                dx[idx(ch)] = T::of(is / cf * (cf * dxhat[ch] - sum_d - x * sum_dx));
            }
        }
    }
    Ok(AffineGrads {
        input: Tensor::from_values(grad_out.shape(), dx)?,
        gamma: Tensor::from_values(&[c], dgamma.into_iter().map(T::of).collect())?,
        beta: Tensor::from_values(&[c], dbeta.into_iter().map(T::of).collect())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_values(shape, v).unwrap()
    }

    #[test]
    fn inference_identity_params() {
        let x = t(&[1, 2, 1, 2], vec![0.5, -1.0, 2.0, 3.0]);
        let p = NormParams::identity(2).unwrap();
        let (y, _, upd) = batch_norm2d(&x, &p, false).unwrap();
        assert!(upd.is_none());
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn training_constant_input_gives_shift() {
        let x = t(&[2, 1, 2, 2], vec![7.0; 8]);
        let mut p = NormParams::identity(1).unwrap();
        p.beta = t(&[1], vec![0.3]);
        p.gamma = t(&[1], vec![4.0]);
        let (y, _, upd) = batch_norm2d(&x, &p, true).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.3));
        let upd = upd.unwrap();
        assert!((upd.running_mean.data()[0] - 0.7).abs() < 1e-12);
        assert!((upd.running_var.data()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn scalar_formula() {
        let x = t(&[1, 1, 1, 2], vec![2.0, 4.0]);
        let p = NormParams {
            gamma: t(&[1], vec![2.0]),
            beta: t(&[1], vec![1.0]),
            running_mean: t(&[1], vec![3.0]),
            running_var: t(&[1], vec![1.0]),
            eps: 1e-5,
        };
        let (y, _, _) = batch_norm2d(&x, &p, false).unwrap();
        let k = 2.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] - (1.0 - k)).abs() < 1e-12);
        assert!((y.data()[1] - (1.0 + k)).abs() < 1e-12);
        assert!((y.data()[0] + 1.0).abs() < 1e-4 && (y.data()[1] - 3.0).abs() < 1e-4);
    }

    #[test]
    fn channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 3, 2, 2]).unwrap();
        let p = NormParams::identity(2).unwrap();
        assert!(matches!(batch_norm2d(&x, &p, false), Err(Error::Shape(_))));
        let g = Tensor::<f32>::zeros(&[2]).unwrap();
        assert!(layer_norm_channels(&x, &g, &g, LN_EPS).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let one = t(&[2], vec![1.0, 1.0]);
        let zero = t(&[2], vec![0.0, 0.0]);
        let x = t(&[1, 2, 1, 1], vec![1.0, 3.0]);
        let (y, _) = layer_norm_channels(&x, &one, &zero, LN_EPS).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5 && (y.data()[1] - 1.0).abs() < 1e-5);

        let beta = t(&[2], vec![0.5, -2.0]);
        let c = t(&[1, 2, 1, 1], vec![4.0, 4.0]);
        let (y, _) = layer_norm_channels(&c, &one, &beta, LN_EPS).unwrap();
        assert_eq!(y.data(), beta.data());
    }

    #[test]
    fn layer_norm_affine_invariance() {
        let x = t(&[1, 3, 1, 2], vec![0.1, -2.0, 0.7, 1.5, 3.0, -0.4]);
        let one = t(&[3], vec![1.0; 3]);
        let zero = t(&[3], vec![0.0; 3]);
        let (base, _) = layer_norm_channels(&x, &one, &zero, 0.0).unwrap();
        for (a, c) in [(2.0, 5.0), (0.1, -3.0), (17.0, 0.0)] {
            let xs = x.map(|v| a * v + c);
            let (y, _) = layer_norm_channels(&xs, &one, &zero, 0.0).unwrap();
            for (p, q) in y.data().iter().zip(base.data()) {
                assert!((p - q).abs() < 1e-9);
            }
        }
    }
}
