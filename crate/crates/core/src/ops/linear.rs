use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `x @ w^T + b` for `x: (N, D)`, `w: (O, D)`, `b: (O)`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, d) = x.dims2()?;
    let (o, dw) = w.dims2()?;
    if d != dw {
        return Err(Error::shape(format!("input dim {d} does not match weight {:?}", w.shape())));
    }
    if let Some(b) = b {
        if b.len() != o {
            return Err(Error::shape(format!("bias has {} values, expected {o}", b.len())));
        }
    }
    let mut out = Vec::with_capacity(n * o);
    for row in x.data().chunks(d) {
        for (j, wr) in w.data().chunks(d).enumerate() {
            let s: f64 = row.iter().zip(wr).map(|(a, b)| a.f64() * b.f64()).sum();
            out.push(T::of(s + b.map_or(0.0, |b| b.data()[j].f64())));
        }
    }
    Tensor::from_values(&[n, o], out)
}

#[derive(Clone, Debug)]
pub struct LinearGrads<T = f32> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, grad_out: &Tensor<T>) -> Result<LinearGrads<T>> {
    let (n, d) = x.dims2()?;
    let (o, _) = w.dims2()?;
    if grad_out.shape() != [n, o] {
        return Err(Error::shape(format!(
            "grad_out {:?} does not match linear output [{n}, {o}]",
            grad_out.shape()
        )));
    }
    let (xd, wd, gd) = (x.data(), w.data(), grad_out.data());
    let mut gx = vec![0f64; n * d];
    let mut gw = vec![0f64; o * d];
    let mut gb = vec![0f64; o];
    for i in 0..n {
        for j in 0..o {
            let g = gd[i * o + j].f64();
            gb[j] += g;
            for k in 0..d {
                gx[i * d + k] += g * wd[j * d + k].f64();
                gw[j * d + k] += g * xd[i * d + k].f64();
            }
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::of).collect::<Vec<_>>();
    Ok(LinearGrads {
        input: Tensor::from_values(&[n, d], cast(gx))?,
        weight: Tensor::from_values(&[o, d], cast(gw))?,
        bias: Tensor::from_values(&[o], cast(gb))?,
    })
}
