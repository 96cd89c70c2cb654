//! Dense row-major tensors of rank 1 to 4.
//!
//! Feature maps use the `(N, C, H, W)` layout where `H` is time frames and `W`
//! is frequency bins. Reductions accumulate in `f64` regardless of the
//! element type.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type of a tensor. Implemented for `f32` (the working precision)
/// and `f64` (used to run gradient checks in high precision).
pub trait Real: Float + Default + Debug + Send + Sync + Sum + 'static {
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn f64(self) -> f64 {
        self
    }
}

pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::shape(format!(
            "rank must be between 1 and {MAX_RANK}, got shape {shape:?}"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::shape(format!("zero extent in shape {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn from_values(shape: &[usize], values: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != values.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: values,
        })
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Extents of a rank-4 tensor as `(n, c, h, w)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!(
                "expected a (N, C, H, W) tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [n, d] => Ok((n, d)),
            _ => Err(Error::shape(format!(
                "expected a (N, D) tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::shape(format!(
                "index {index:?} has wrong rank for shape {:?}",
                self.shape
            )));
        }
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return Err(Error::shape(format!(
                    "index {index:?} out of bounds for shape {:?}",
                    self.shape
                )));
            }
            off = off * d + i;
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: T) -> Result<()> {
        let off = self.offset(index)?;
        self.data[off] = value;
        Ok(())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        let data = if other.data.len() == 1 {
            let s = other.data[0];
            self.data.iter().map(|&a| f(a, s)).collect()
        } else if self.shape == other.shape {
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect()
        } else {
            return Err(Error::shape(format!(
                "incompatible shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        };
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Elementwise sum; `other` may be a single-element tensor.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    /// Elementwise product; `other` may be a single-element tensor.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "incompatible shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().map(|v| v.f64()).sum()
    }

    pub fn mean_all(&self) -> f64 {
        self.sum_all() / self.data.len() as f64
    }

    pub fn sum(&self, axis: usize, keep_dim: bool) -> Result<Self> {
        self.reduce(axis, keep_dim, 0.0, |acc, v| acc + v, |acc, _| acc)
    }

    pub fn mean(&self, axis: usize, keep_dim: bool) -> Result<Self> {
        self.reduce(axis, keep_dim, 0.0, |acc, v| acc + v, |acc, n| acc / n as f64)
    }

    pub fn max_reduce(&self, axis: usize, keep_dim: bool) -> Result<Self> {
        self.reduce(axis, keep_dim, f64::NEG_INFINITY, f64::max, |acc, _| acc)
    }

    fn reduce(
        &self,
        axis: usize,
        keep_dim: bool,
        init: f64,
        step: impl Fn(f64, f64) -> f64,
        finish: impl Fn(f64, usize) -> f64,
    ) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::shape(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let extent = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            for i in 0..inner {
                let mut acc = init;
                for k in 0..extent {
                    acc = step(acc, self.data[base + k * inner + i].f64());
                }
                data.push(T::of(finish(acc, extent)));
            }
        }
        let mut shape = self.shape.clone();
        if keep_dim || shape.len() == 1 {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(Self { shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constructors() {
        let z = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        assert_eq!(z.shape(), &[2, 3]);
        assert_eq!(z.data(), &[0.0; 6]);
        assert_eq!(Tensor::<f32>::full(&[1], 1.5).unwrap().data(), &[1.5]);
        let t = Tensor::from_values(&[2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.get(&[1, 0]).unwrap(), 3.0);
    }

    #[test]
    fn construction_errors() {
        assert!(Tensor::from_values(&[2, 2], vec![1.0f32; 3]).is_err());
        assert!(Tensor::<f32>::zeros(&[2, 0]).is_err());
        assert!(Tensor::<f32>::zeros(&[1, 1, 1, 1, 1]).is_err());
        assert!(Tensor::<f32>::zeros(&[]).is_err());
    }

    #[test]
    fn reductions() {
        let t = Tensor::from_values(&[4], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.mean(0, false).unwrap().data(), &[2.5]);

        let m = Tensor::from_values(&[2, 2], vec![1.0f32, 5.0, 3.0, 2.0]).unwrap();
        let r = m.max_reduce(0, false).unwrap();
        assert_eq!(r.shape(), &[2]);
        assert_eq!(r.data(), &[3.0, 5.0]);
        assert_eq!(m.max_reduce(1, true).unwrap().shape(), &[2, 1]);

        let z = Tensor::<f32>::zeros(&[3, 3]).unwrap();
        assert_eq!(z.sum_all(), 0.0);
        assert_eq!(z.sum(1, false).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn broadcasting_is_scalar_only() {
        let a = Tensor::from_values(&[2], vec![1.0f32, 2.0]).unwrap();
        let s = Tensor::scalar(10.0f32);
        assert_eq!(a.add(&s).unwrap().data(), &[11.0, 12.0]);
        assert_eq!(a.mul(&a).unwrap().data(), &[1.0, 4.0]);
        let b = Tensor::from_values(&[3], vec![1.0f32; 3]).unwrap();
        assert!(matches!(a.add(&b), Err(Error::Shape(_))));
        assert!(a.max_reduce(1, false).is_err());
    }

    fn shape_and_values() -> impl Strategy<Value = (Vec<usize>, Vec<f32>)> {
        prop::collection::vec(1usize..5, 1..=4).prop_flat_map(|shape| {
            let n = shape.iter().product::<usize>();
            (Just(shape), prop::collection::vec(-1e3f32..1e3, n))
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_exact((shape, values) in shape_and_values()) {
            let t = Tensor::from_values(&shape, values.clone()).unwrap();
            prop_assert_eq!(t.into_data(), values);
        }

        #[test]
        fn mean_times_count_is_sum((shape, values) in shape_and_values(), axis in 0usize..4) {
            let t = Tensor::from_values(&shape, values).unwrap();
            let axis = axis % shape.len();
            let s = t.sum(axis, true).unwrap();
            let m = t.mean(axis, true).unwrap();
            let count = shape[axis] as f64;
            for (a, b) in m.data().iter().zip(s.data()) {
                let lhs = *a as f64 * count;
                let rhs = *b as f64;
                prop_assert!((lhs - rhs).abs() <= 1e-5 * rhs.abs().max(1.0));
            }
        }

        #[test]
        fn singleton_axis_reduction_is_identity((shape, values) in shape_and_values()) {
            let mut shape = shape;
            if shape.len() == 4 { shape.pop(); }
            let n: usize = shape.iter().product();
            let mut with_one = shape.clone();
            with_one.push(1);
            let t = Tensor::from_values(&with_one, values[..n].to_vec()).unwrap();
            let axis = with_one.len() - 1;
            prop_assert_eq!(t.sum(axis, false).unwrap().into_data(), values[..n].to_vec());
            prop_assert_eq!(t.mean(axis, false).unwrap().into_data(), values[..n].to_vec());
            prop_assert_eq!(t.max_reduce(axis, false).unwrap().into_data(), values[..n].to_vec());
        }
    }
}
