//! Stochastic depth on residual branches.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("drop-path rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Returns the branch output and the per-sample factors applied to it
/// (`0` for dropped samples, `1/(1-rate)` for kept ones, `1` outside
/// training).
pub fn drop_path<T: Real, R: Rng + ?Sized>(
    x: &Tensor<T>,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<f64>)> {
    check_rate(rate)?;
    let n = x.shape()[0];
    if !training || rate == 0.0 {
        return Ok((x.clone(), vec![1.0; n]));
    }
    let keep: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() >= rate).collect();
    drop_path_with_mask(x, rate, &keep)
}

/// Drop path with an explicit keep mask, one flag per sample.
pub fn drop_path_with_mask<T: Real>(x: &Tensor<T>, rate: f64, keep: &[bool]) -> Result<(Tensor<T>, Vec<f64>)> {
    check_rate(rate)?;
    let n = x.shape()[0];
    if keep.len() != n {
        return Err(Error::shape(format!("{} mask flags for batch of {n}", keep.len())));
    }
    let factors: Vec<f64> = keep
        .iter()
        .map(|&k| if k { 1.0 / (1.0 - rate) } else { 0.0 })
        .collect();
    Ok((apply_factors(x, &factors)?, factors))
}

/// Multiplies every sample of `x` by its factor; also the backward of
/// [`drop_path`].
pub fn apply_factors<T: Real>(x: &Tensor<T>, factors: &[f64]) -> Result<Tensor<T>> {
    let n = x.shape()[0];
    if factors.len() != n {
        return Err(Error::shape(format!("{} factors for batch of {n}", factors.len())));
    }
    let per = x.len() / n;
    let mut out = x.clone();
    for (chunk, &f) in out.data_mut().chunks_mut(per).zip(factors) {
        if f != 1.0 {
            chunk.iter_mut().for_each(|v| *v = T::of(v.f64() * f));
        }
    }
    Ok(out)
}
