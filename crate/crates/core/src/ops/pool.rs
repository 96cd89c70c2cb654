use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Global pooling flavours.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    /// Mean over time and frequency.
    Gap,
    /// Mean over frequency, then mean plus max over time.
    Pann,
}

impl PoolMode {
    pub fn name(self) -> &'static str {
        match self {
            PoolMode::Gap => "gap",
            PoolMode::Pann => "pann",
        }
    }
}

/// 2x2 average pooling with stride 2. Odd trailing rows/columns are dropped.
pub fn avg_pool2x2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::shape(format!("2x2 pooling needs H, W >= 2, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in src.chunks(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let i = 2 * oy * w + 2 * ox;
                let s = plane[i].f64() + plane[i + 1].f64() + plane[i + w].f64() + plane[i + w + 1].f64();
                out.push(T::of(0.25 * s));
            }
        }
    }
    Tensor::from_values(&[n, c, oh, ow], out)
}

/// `input_shape` is the shape of the forward input.
pub fn avg_pool2x2_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = match *input_shape {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::shape("avg pool input must be rank 4")),
    };
    let (oh, ow) = (h / 2, w / 2);
    if grad_out.shape() != [n, c, oh, ow] {
        return Err(Error::shape("grad_out does not match pooled shape"));
    }
    let mut gx = vec![T::zero(); n * c * h * w];
    let quarter = T::of(0.25);
    for (dst, g) in gx.chunks_mut(h * w).zip(grad_out.data().chunks(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let v = g[oy * ow + ox] * quarter;
                let i = 2 * oy * w + 2 * ox;
                dst[i] = v;
                dst[i + 1] = v;
                dst[i + w] = v;
                dst[i + w + 1] = v;
            }
        }
    }
    Tensor::from_values(input_shape, gx)
}

/// Reduces `(N, C, H, W)` to `(N, C)`.
pub fn global_pool<T: Real>(x: &Tensor<T>, mode: PoolMode) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let mut out = Vec::with_capacity(n * c);
    for plane in x.data().chunks(h * w) {
        let v = match mode {
            PoolMode::Gap => plane.iter().map(|v| v.f64()).sum::<f64>() / (h * w) as f64,
            PoolMode::Pann => {
                let rows: Vec<f64> = plane
                    .chunks(w)
                    .map(|r| r.iter().map(|v| v.f64()).sum::<f64>() / w as f64)
                    .collect();
                let mean = rows.iter().sum::<f64>() / h as f64;
                let max = rows.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                mean + max
            }
        };
        out.push(T::of(v));
    }
    Tensor::from_values(&[n, c], out)
}

pub fn global_pool_backward<T: Real>(
    x: &Tensor<T>,
    mode: PoolMode,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if grad_out.shape() != [n, c] {
        return Err(Error::shape("grad_out does not match pooled shape"));
    }
    let mut gx = vec![T::zero(); x.len()];
    for ((dst, plane), &g) in gx.chunks_mut(h * w).zip(x.data().chunks(h * w)).zip(grad_out.data()) {
        let g = g.f64();
        match mode {
            PoolMode::Gap => dst.fill(T::of(g / (h * w) as f64)),
            PoolMode::Pann => {
                let rows: Vec<f64> = plane
                    .chunks(w)
                    .map(|r| r.iter().map(|v| v.f64()).sum::<f64>())
                    .collect();
                // first maximal row receives the max-branch gradient
                let argmax = rows
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0;
                for (t, row) in dst.chunks_mut(w).enumerate() {
                    let mut dr = g / h as f64;
                    if t == argmax {
                        dr += g;
                    }
                    row.fill(T::of(dr / w as f64));
                }
            }
        }
    }
    Tensor::from_values(x.shape(), gx)
}
