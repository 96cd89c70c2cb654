//! Grouped 2-D convolution with zero padding.
//!
//! All sums use `f64` accumulators. Ungrouped convolutions run as dot
//! products over im2col tiles. Grouped ones (depthwise) use direct loops over
//! `(n, c_out)` planes. Every output element is produced by exactly one task
//! with a fixed summation order, which keeps results independent of the
//! thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Dense convolution, stride 1, no padding, with bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
            bias: true,
        }
    }

    /// Depthwise convolution producing `multiplier` output maps per input
    /// channel, padded to preserve the spatial extent for odd kernels.
    pub fn depthwise(channels: usize, multiplier: usize, kernel: usize) -> Self {
        Self::new(channels, channels * multiplier, (kernel, kernel))
            .with_groups(channels)
            .with_padding((kernel / 2, kernel / 2))
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, (1, 1))
    }

    /// Non-overlapping patch convolution: stride equal to the kernel size.
    pub fn patchify(in_channels: usize, out_channels: usize, patch: usize) -> Self {
        Self::new(in_channels, out_channels, (patch, patch)).with_stride((patch, patch))
    }

    pub fn with_stride(mut self, stride: (usize, usize)) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: (usize, usize)) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let Self {
            in_channels: cin,
            out_channels: cout,
            groups: g,
            ..
        } = *self;
        if cin == 0 || cout == 0 || g == 0 {
            return Err(Error::invalid(format!("degenerate conv spec {self:?}")));
        }
        if cin % g != 0 || cout % g != 0 {
            return Err(Error::invalid(format!(
                "groups {g} must divide both in_channels {cin} and out_channels {cout}"
            )));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::invalid(format!("zero kernel or stride in {self:?}")));
        }
        Ok(())
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels
    }

    /// `K = C_out / C_in` for depthwise convolutions.
    pub fn depthwise_multiplier(&self) -> Option<usize> {
        self.is_depthwise()
            .then(|| self.out_channels / self.in_channels)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (ph, pw) = self.padding;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * ph,
                w + 2 * pw
            )));
        }
        Ok((
            (h + 2 * ph - kh) / self.stride.0 + 1,
            (w + 2 * pw - kw) / self.stride.1 + 1,
        ))
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + if self.bias { self.out_channels } else { 0 }
    }

    /// Multiply-accumulates for a batch of `n` inputs of spatial size `h x w`,
    /// counting taps that land on zero padding.
    pub fn macs(&self, n: usize, h: usize, w: usize) -> Result<u64> {
        let (oh, ow) = self.output_hw(h, w)?;
        let [cout, cin_g, kh, kw] = self.weight_shape();
        Ok((n * cout * oh * ow * cin_g * kh * kw) as u64)
    }
}

/// Multiply-accumulates actually executed by a convolution or linear call.
/// Taps that fall on zero padding are skipped by the loops and tallied
/// separately so the sum is comparable to the analytic count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacTally {
    pub performed: u64,
    pub padded: u64,
}

impl MacTally {
    pub fn total(&self) -> u64 {
        self.performed + self.padded
    }
}

impl std::ops::AddAssign for MacTally {
    fn add_assign(&mut self, rhs: Self) {
        self.performed += rhs.performed;
        self.padded += rhs.padded;
    }
}

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
}

impl Geometry {
    fn new<T: Real>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Result<Self> {
        spec.validate()?;
        let (n, cin, h, wd) = x.dims4()?;
        if cin != spec.in_channels {
            return Err(Error::shape(format!(
                "input has {cin} channels, conv expects {}",
                spec.in_channels
            )));
        }
        let ws = spec.weight_shape();
        if w.shape() != ws {
            return Err(Error::shape(format!(
                "weight shape {:?} does not match {ws:?}",
                w.shape()
            )));
        }
        let (oh, ow) = spec.output_hw(h, wd)?;
        Ok(Self {
            n,
            cin,
            h,
            w: wd,
            cout: spec.out_channels,
            cin_g: ws[1],
            cout_g: spec.out_channels / spec.groups,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            oh,
            ow,
            sh: spec.stride.0,
            sw: spec.stride.1,
            ph: spec.padding.0,
            pw: spec.padding.1,
        })
    }

    fn is_plain_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }

    /// Input row hit by output row `oy` at kernel row `ky`, if inside the image.
    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.sh + ky) as isize - self.ph as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }

    /// Range of output columns whose tap at kernel column `kx` lands inside
    /// the image.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pw > kx {
            (self.pw - kx).div_ceil(self.sw)
        } else {
            0
        }
        .min(self.ow);
        let limit = self.w + self.pw;
        let hi = if limit > kx {
            ((limit - kx - 1) / self.sw + 1).min(self.ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn check_bias<T: Real>(b: Option<&Tensor<T>>, spec: &ConvSpec) -> Result<()> {
    match (b, spec.bias) {
        (Some(b), true) if b.len() == spec.out_channels => Ok(()),
        (Some(b), true) => Err(Error::shape(format!(
            "bias has {} values, expected {}",
            b.len(),
            spec.out_channels
        ))),
        (None, false) => Ok(()),
        (Some(_), false) => Err(Error::invalid("bias given to a conv spec without bias")),
        (None, true) => Err(Error::invalid("conv spec requires a bias tensor")),
    }
}

pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    conv2d_impl::<T, false>(x, w, b, spec).map(|(y, _)| y)
}

/// Same as [`conv2d`], also reporting the multiply-accumulates executed.
pub fn conv2d_counted<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<(Tensor<T>, MacTally)> {
    conv2d_impl::<T, true>(x, w, b, spec)
}

fn conv2d_impl<T: Real, const COUNT: bool>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<(Tensor<T>, MacTally)> {
    let g = Geometry::new(x, w, spec)?;
    check_bias(b, spec)?;
    let (out, performed) = if spec.groups == 1 {
        dense_forward(&g, x.data(), w.data(), b.map(Tensor::data))
    } else {
        grouped_forward::<T, COUNT>(&g, x.data(), w.data(), b.map(Tensor::data))
    };
    let tally = if COUNT {
        let total = spec.macs(g.n, g.h, g.w)?;
        MacTally {
            performed,
            padded: total - performed,
        }
    } else {
        MacTally::default()
    };
    let y = Tensor::from_values(&[g.n, g.cout, g.oh, g.ow], out)?;
    Ok((y, tally))
}

/// Output positions per im2col tile.
const TILE: usize = 64;

/// Dot products of the four consecutive `k`-long rows of `w` with `c`.
#[inline]
fn dot4(w: &[f64], c: &[f64]) -> [f64; 4] {
    let k = c.len();
    let (w0, w1, w2, w3) = (&w[..k], &w[k..2 * k], &w[2 * k..3 * k], &w[3 * k..4 * k]);
    let mut s = [[0f64; 2]; 4];
    let mut i = 0;
    while i + 2 <= k {
        for l in 0..2 {
            let v = c[i + l];
            s[0][l] += w0[i + l] * v;
            s[1][l] += w1[i + l] * v;
            s[2][l] += w2[i + l] * v;
            s[3][l] += w3[i + l] * v;
        }
        i += 2;
    }
    let mut out = [s[0][0] + s[0][1], s[1][0] + s[1][1], s[2][0] + s[2][1], s[3][0] + s[3][1]];
    if i < k {
        for (o, wr) in out.iter_mut().zip([w0, w1, w2, w3]) {
            *o += wr[i] * c[i];
        }
    }
    out
}

#[inline]
fn axpy<T: Real>(acc: &mut [f64], a: f64, x: &[T]) {
    for (d, v) in acc.iter_mut().zip(x) {
        *d += a * v.f64();
    }
}

/// Fills `col` with one row per output position `p0..p0 + rows` of sample
/// `n`: the `cin * kh * kw` taps feeding it, zero on padding. Returns the
/// number of taps inside the image.
fn im2col<T: Real>(g: &Geometry, xd: &[T], n: usize, p0: usize, rows: usize, col: &mut [f64]) -> u64 {
    let k = g.cin * g.kh * g.kw;
    let in_plane = g.h * g.w;
    let mut inside = 0u64;
    for r in 0..rows {
        let (oy, ox) = ((p0 + r) / g.ow, (p0 + r) % g.ow);
        let dst = &mut col[r * k..][..k];
        for ci in 0..g.cin {
            let src = &xd[(n * g.cin + ci) * in_plane..][..in_plane];
            for ky in 0..g.kh {
                let taps = &mut dst[(ci * g.kh + ky) * g.kw..][..g.kw];
                let Some(iy) = g.in_row(oy, ky) else {
                    taps.fill(0.0);
                    continue;
                };
                for (kx, t) in taps.iter_mut().enumerate() {
                    let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                    *t = if ix >= 0 && (ix as usize) < g.w {
                        inside += 1;
                        src[iy * g.w + ix as usize].f64()
                    } else {
                        0.0
                    };
                }
            }
        }
    }
    inside
}

/// Adjoint of [`im2col`]: adds tile rows back onto the input taps.
fn col2im(g: &Geometry, col: &[f64], p0: usize, rows: usize, acc: &mut [f64]) {
    let k = g.cin * g.kh * g.kw;
    let in_plane = g.h * g.w;
    for r in 0..rows {
        let (oy, ox) = ((p0 + r) / g.ow, (p0 + r) % g.ow);
        let src = &col[r * k..][..k];
        for ci in 0..g.cin {
            let dst = &mut acc[ci * in_plane..][..in_plane];
            for ky in 0..g.kh {
                let Some(iy) = g.in_row(oy, ky) else { continue };
                let taps = &src[(ci * g.kh + ky) * g.kw..][..g.kw];
                for (kx, &t) in taps.iter().enumerate() {
                    let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                    if ix >= 0 && (ix as usize) < g.w {
                        dst[iy * g.w + ix as usize] += t;
                    }
                }
            }
        }
    }
}

fn tiles(g: &Geometry) -> Vec<(usize, usize)> {
    let plane = g.oh * g.ow;
    (0..g.n)
        .flat_map(|n| (0..plane).step_by(TILE).map(move |p0| (n, p0)))
        .collect()
}

fn dense_forward<T: Real>(g: &Geometry, xd: &[T], wd: &[T], b: Option<&[T]>) -> (Vec<T>, u64) {
    let k = g.cin * g.kh * g.kw;
    let plane = g.oh * g.ow;
    let tiles = tiles(g);
    let parts: Vec<(Vec<f64>, u64)> = tiles
        .par_iter()
        .map(|&(n, p0)| {
            let rows = TILE.min(plane - p0);
            let mut col = vec![0f64; rows * k];
            let inside = im2col(g, xd, n, p0, rows, &mut col);
            let mut vals = vec![0f64; g.cout * rows];
            // Rows past `cout` keep stale values and are never stored.
            let mut wbuf = vec![0f64; 4 * k];
            for co0 in (0..g.cout).step_by(4) {
                let nb = 4.min(g.cout - co0);
                for (d, v) in wbuf.iter_mut().zip(&wd[co0 * k..(co0 + nb) * k]) {
                    *d = v.f64();
                }
                for r in 0..rows {
                    let sums = dot4(&wbuf, &col[r * k..][..k]);
                    for (j, s) in sums.iter().enumerate().take(nb) {
                        let bias = b.map_or(0.0, |b| b[co0 + j].f64());
                        vals[(co0 + j) * rows + r] = s + bias;
                    }
                }
            }
            (vals, inside * g.cout as u64)
        })
        .collect();
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    let mut performed = 0;
    for (&(n, p0), (vals, inside)) in tiles.iter().zip(&parts) {
        let rows = TILE.min(plane - p0);
        for (co, v) in vals.chunks_exact(rows).enumerate() {
            for (d, &a) in out[(n * g.cout + co) * plane + p0..][..rows].iter_mut().zip(v) {
                *d = T::of(a);
            }
        }
        performed += inside;
    }
    (out, performed)
}

fn dense_backward<T: Real>(g: &Geometry, xd: &[T], wd: &[T], gd: &[T]) -> (Vec<T>, Vec<T>) {
    let k = g.cin * g.kh * g.kw;
    let plane = g.oh * g.ow;
    let in_len = g.cin * g.h * g.w;

    let mut gx = vec![T::zero(); g.n * in_len];
    gx.par_chunks_mut(in_len).enumerate().for_each(|(n, dst)| {
        let mut acc = vec![0f64; in_len];
        let mut gcol = vec![0f64; TILE * k];
        for p0 in (0..plane).step_by(TILE) {
            let rows = TILE.min(plane - p0);
            for (r, grow) in gcol.chunks_exact_mut(k).take(rows).enumerate() {
                grow.fill(0.0);
                for co in 0..g.cout {
                    axpy(grow, gd[(n * g.cout + co) * plane + p0 + r].f64(), &wd[co * k..][..k]);
                }
            }
            col2im(g, &gcol, p0, rows, &mut acc);
        }
        for (d, a) in dst.iter_mut().zip(&acc) {
            *d = T::of(*a);
        }
    });

    // Rows of the weight gradient in chunks; each chunk redoes im2col.
    let chunk = g.cout.div_ceil(4 * rayon::current_num_threads()).max(8).min(g.cout);
    let mut gw = vec![T::zero(); g.cout * k];
    gw.par_chunks_mut(chunk * k).enumerate().for_each(|(c, dst)| {
        let co0 = c * chunk;
        let cos = dst.len() / k;
        let mut acc = vec![0f64; cos * k];
        let mut col = vec![0f64; TILE * k];
        for n in 0..g.n {
            for p0 in (0..plane).step_by(TILE) {
                let rows = TILE.min(plane - p0);
                im2col(g, xd, n, p0, rows, &mut col);
                for (r, crow) in col.chunks_exact(k).take(rows).enumerate() {
                    for (j, a) in acc.chunks_exact_mut(k).enumerate() {
                        let gv = gd[(n * g.cout + co0 + j) * plane + p0 + r].f64();
                        for (d, &v) in a.iter_mut().zip(crow) {
                            *d += gv * v;
                        }
                    }
                }
            }
        }
        for (d, a) in dst.iter_mut().zip(&acc) {
            *d = T::of(*a);
        }
    });
    (gx, gw)
}

fn grouped_forward<T: Real, const COUNT: bool>(
    g: &Geometry,
    xd: &[T],
    wd: &[T],
    b: Option<&[T]>,
) -> (Vec<T>, u64) {
    let plane = g.oh * g.ow;
    let in_plane = g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.cout * plane];

    let performed: u64 = out
        .par_chunks_mut(plane)
        .enumerate()
        .map(|(idx, dst)| {
            let (n, co) = (idx / g.cout, idx % g.cout);
            let group = co / g.cout_g;
            let mut acc = vec![0f64; plane];
            let mut count = 0u64;
            for cl in 0..g.cin_g {
                let ci = group * g.cin_g + cl;
                let src = &xd[(n * g.cin + ci) * in_plane..][..in_plane];
                let wbase = (co * g.cin_g + cl) * g.kh * g.kw;
                if g.is_plain_pointwise() {
                    let wv = wd[wbase].f64();
                    for (a, &v) in acc.iter_mut().zip(src) {
                        *a += wv * v.f64();
                    }
                    if COUNT {
                        count += plane as u64;
                    }
                    continue;
                }
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wd[wbase + ky * g.kw + kx].f64();
                        let (lo, hi) = g.col_range(kx);
                        if lo == hi {
                            continue;
                        }
                        for oy in 0..g.oh {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let row = &src[iy * g.w..][..g.w];
                            let arow = &mut acc[oy * g.ow..][..g.ow];
                            let shift = kx as isize - g.pw as isize;
                            if g.sw == 1 {
                                let start = (lo as isize + shift) as usize;
                                for (a, &v) in arow[lo..hi].iter_mut().zip(&row[start..]) {
                                    *a += wv * v.f64();
                                }
                            } else {
                                for (ox, a) in arow.iter_mut().enumerate().take(hi).skip(lo) {
                                    let ix = (ox * g.sw) as isize + shift;
                                    *a += wv * row[ix as usize].f64();
                                }
                            }
                            if COUNT {
                                count += (hi - lo) as u64;
                            }
                        }
                    }
                }
            }
            let bias = b.map_or(0.0, |b| b[co].f64());
            for (d, a) in dst.iter_mut().zip(&acc) {
                *d = T::of(a + bias);
            }
            count
        })
        .sum();
    (out, performed)
}

/// 1x1 convolution. `w` has shape `(C_out, C_in, 1, 1)`.
pub fn pointwise<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let [cout, cin, kh, kw] = match w.shape() {
        &[a, b, c, d] => [a, b, c, d],
        s => return Err(Error::shape(format!("pointwise weight must be rank 4, got {s:?}"))),
    };
    if kh != 1 || kw != 1 {
        return Err(Error::shape(format!("pointwise weight must be 1x1, got {kh}x{kw}")));
    }
    let mut spec = ConvSpec::pointwise(cin, cout);
    spec.bias = b.is_some();
    conv2d(x, w, b, &spec)
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T = f32> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = Geometry::new(x, w, spec)?;
    if grad_out.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::shape(format!(
            "grad_out shape {:?} does not match conv output {:?}",
            grad_out.shape(),
            [g.n, g.cout, g.oh, g.ow]
        )));
    }
    let plane = g.oh * g.ow;
    let xd = x.data();
    let wd = w.data();
    let gd = grad_out.data();
    let (gx, gw) = if spec.groups == 1 {
        dense_backward(&g, xd, wd, gd)
    } else {
        grouped_backward(&g, xd, wd, gd)
    };

    let bias = if spec.bias {
        let mut gb = Vec::with_capacity(g.cout);
        for co in 0..g.cout {
            let mut s = 0f64;
            for n in 0..g.n {
                s += gd[(n * g.cout + co) * plane..][..plane]
                    .iter()
                    .map(|v| v.f64())
                    .sum::<f64>();
            }
            gb.push(T::of(s));
        }
        Some(Tensor::from_values(&[g.cout], gb)?)
    } else {
        None
    };

    Ok(ConvGrads {
        input: Tensor::from_values(&[g.n, g.cin, g.h, g.w], gx)?,
        weight: Tensor::from_values(&spec.weight_shape(), gw)?,
        bias,
    })
}

fn grouped_backward<T: Real>(g: &Geometry, xd: &[T], wd: &[T], gd: &[T]) -> (Vec<T>, Vec<T>) {
    let plane = g.oh * g.ow;
    let in_plane = g.h * g.w;
    let ksize = g.kh * g.kw;

    // d/dx: each (n, ci) input plane gathers from the outputs of its group.
    let mut gx = vec![T::zero(); g.n * g.cin * in_plane];
    gx.par_chunks_mut(in_plane).enumerate().for_each(|(idx, dst)| {
        let (n, ci) = (idx / g.cin, idx % g.cin);
        let group = ci / g.cin_g;
        let cl = ci % g.cin_g;
        let mut acc = vec![0f64; in_plane];
        for co in group * g.cout_g..(group + 1) * g.cout_g {
            let go = &gd[(n * g.cout + co) * plane..][..plane];
            let wbase = (co * g.cin_g + cl) * ksize;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = wd[wbase + ky * g.kw + kx].f64();
                    let (lo, hi) = g.col_range(kx);
                    if lo == hi {
                        continue;
                    }
                    let shift = kx as isize - g.pw as isize;
                    for oy in 0..g.oh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let grow = &go[oy * g.ow..][..g.ow];
                        let arow = &mut acc[iy * g.w..][..g.w];
                        if g.sw == 1 {
                            let start = (lo as isize + shift) as usize;
                            axpy(&mut arow[start..start + hi - lo], wv, &grow[lo..hi]);
                        } else {
                            for (ox, &gv) in grow.iter().enumerate().take(hi).skip(lo) {
                                let ix = (ox * g.sw) as isize + shift;
                                arow[ix as usize] += wv * gv.f64();
                            }
                        }
                    }
                }
            }
        }
        for (d, a) in dst.iter_mut().zip(&acc) {
            *d = T::of(*a);
        }
    });

    // d/dw: one task per output channel, summing over the batch.
    let wlen = g.cin_g * ksize;
    let mut gw = vec![T::zero(); g.cout * wlen];
    gw.par_chunks_mut(wlen).enumerate().for_each(|(co, dst)| {
        let group = co / g.cout_g;
        let mut acc = vec![0f64; wlen];
        for n in 0..g.n {
            let go = &gd[(n * g.cout + co) * plane..][..plane];
            for cl in 0..g.cin_g {
                let ci = group * g.cin_g + cl;
                let src = &xd[(n * g.cin + ci) * in_plane..][..in_plane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let (lo, hi) = g.col_range(kx);
                        if lo == hi {
                            continue;
                        }
                        let shift = kx as isize - g.pw as isize;
                        let mut s = 0f64;
                        for oy in 0..g.oh {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let row = &src[iy * g.w..][..g.w];
                            let grow = &go[oy * g.ow..][..g.ow];
                            if g.sw == 1 {
                                let start = (lo as isize + shift) as usize;
                                s += grow[lo..hi]
                                    .iter()
                                    .zip(&row[start..])
                                    .map(|(a, b)| a.f64() * b.f64())
                                    .sum::<f64>();
                            } else {
                                for (ox, &gv) in grow.iter().enumerate().take(hi).skip(lo) {
                                    let ix = (ox * g.sw) as isize + shift;
                                    s += gv.f64() * row[ix as usize].f64();
                                }
                            }
                        }
                        acc[(cl * g.kh + ky) * g.kw + kx] += s;
                    }
                }
            }
        }
        for (d, a) in dst.iter_mut().zip(&acc) {
            *d = T::of(*a);
        }
    });

    (gx, gw)
}
