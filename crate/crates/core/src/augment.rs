//! Training-time augmentation: SpecAugment stripes, mixup and speed
//! perturbation.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::frontend::Waveform;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Widest time stripe, in frames.
    pub max_time_width: usize,
    /// Widest frequency stripe, in mel bins.
    pub max_freq_width: usize,
    /// Stripes per axis are drawn uniformly from `0..=max_stripes`.
    pub max_stripes: usize,
    /// Mixup draws lambda from Beta(alpha, alpha).
    pub mixup_alpha: f64,
    /// Speed-perturbation rates are drawn uniformly from this range.
    pub speed_range: (f64, f64),
    pub seed: u64,
}

impl AugmentConfig {
    /// 64 frames, 8 bins, two stripes, alpha 1, rates in [0.5, 1.5].
    pub fn cnn() -> Self {
        Self {
            max_time_width: 64,
            max_freq_width: 8,
            max_stripes: 2,
            mixup_alpha: 1.0,
            speed_range: (0.5, 1.5),
            seed: 0,
        }
    }

    /// As [`AugmentConfig::cnn`] with 28-bin frequency stripes for 224 bins.
    pub fn convnext() -> Self {
        Self {
            max_freq_width: 28,
            ..Self::cnn()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mixup_alpha > 0.0) {
            return Err(Error::invalid(format!("mixup alpha must be > 0, got {}", self.mixup_alpha)));
        }
        let (lo, hi) = self.speed_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::invalid(format!("speed range needs 0 < lo <= hi, got [{lo}, {hi}]")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Dimension 2 (frames).
    Time,
    /// Dimension 3 (mel bins).
    Freq,
}

/// A zeroed band `start..start + width` along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stripe {
    pub axis: Axis,
    pub start: usize,
    pub width: usize,
}

/// Draws the stripes for one `h x w` spectrogram. Widths larger than the
/// axis are clamped to it.
pub fn draw_stripes<R: Rng + ?Sized>(h: usize, w: usize, cfg: &AugmentConfig, rng: &mut R) -> Vec<Stripe> {
    let mut out = Vec::new();
    for (axis, extent, max) in [(Axis::Time, h, cfg.max_time_width), (Axis::Freq, w, cfg.max_freq_width)] {
        let count = rng.gen_range(0..=cfg.max_stripes);
        let max = max.min(extent);
        for _ in 0..count {
            let width = rng.gen_range(0..=max);
            let start = rng.gen_range(0..=extent - width);
            out.push(Stripe { axis, start, width });
        }
    }
    out
}

/// Zeroes the given stripes in one `(h, w)` plane.
pub fn apply_stripes(plane: &mut [f32], h: usize, w: usize, stripes: &[Stripe]) {
    debug_assert_eq!(plane.len(), h * w);
    for s in stripes {
        match s.axis {
            Axis::Time => plane[s.start * w..(s.start + s.width) * w].fill(0.0),
            Axis::Freq => {
                for row in plane.chunks_mut(w) {
                    row[s.start..s.start + s.width].fill(0.0);
                }
            }
        }
    }
}

/// SpecAugment on an `(N, 1, H, W)` batch, returning the stripes used for
/// each sample.
pub fn spec_augment_traced<R: Rng + ?Sized>(
    x: &Tensor,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Tensor, Vec<Vec<Stripe>>)> {
    let (n, c, h, w) = x.dims4()?;
    if c != 1 {
        return Err(Error::shape(format!("expected (N, 1, H, W), got {:?}", x.shape())));
    }
    let mut y = x.clone();
    let mut record = Vec::with_capacity(n);
    for plane in y.data_mut().chunks_mut(h * w) {
        let stripes = draw_stripes(h, w, cfg, rng);
        apply_stripes(plane, h, w, &stripes);
        record.push(stripes);
    }
    Ok((y, record))
}

pub fn spec_augment<R: Rng + ?Sized>(x: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Result<Tensor> {
    spec_augment_traced(x, cfg, rng).map(|(y, _)| y)
}

/// Result of mixing two samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixed {
    pub x: Tensor,
    pub y: Tensor,
    pub lambda: f64,
}

/// `lambda * a + (1 - lambda) * b` for inputs and labels.
pub fn mixup_with(x1: &Tensor, y1: &Tensor, x2: &Tensor, y2: &Tensor, lambda: f64) -> Result<Mixed> {
    if x1.shape() != x2.shape() || y1.shape() != y2.shape() {
        return Err(Error::shape(format!(
            "mixup of {:?}/{:?} with {:?}/{:?}",
            x1.shape(),
            y1.shape(),
            x2.shape(),
            y2.shape()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let mix = |a: &Tensor, b: &Tensor| {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&u, &v)| (lambda * u as f64 + (1.0 - lambda) * v as f64) as f32)
            .collect();
        Tensor::from_values(a.shape(), data)
    };
    Ok(Mixed {
        x: mix(x1, x2)?,
        y: mix(y1, y2)?,
        lambda,
    })
}

/// Mixup with `lambda ~ Beta(alpha, alpha)`.
pub fn mixup<R: Rng + ?Sized>(
    x1: &Tensor,
    y1: &Tensor,
    x2: &Tensor,
    y2: &Tensor,
    alpha: f64,
    rng: &mut R,
) -> Result<Mixed> {
    let lambda = sample_lambda(alpha, rng)?;
    mixup_with(x1, y1, x2, y2, lambda)
}

pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::invalid(format!("mixup alpha {alpha}: {e}")))?;
    Ok(beta.sample(rng))
}

/// Nearest-neighbour stretch to `round(L / r)` samples: output `i` takes
/// input `floor(i * r)`. Rates above 1 shorten the signal.
pub fn stretch(samples: &[f32], rate: f64) -> Result<Vec<f32>> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::invalid(format!("speed rate must be > 0, got {rate}")));
    }
    let len = samples.len();
    let out_len = ((len as f64 / rate).round() as usize).max(1);
    Ok((0..out_len)
        .map(|i| samples[((i as f64 * rate).floor() as usize).min(len - 1)])
        .collect())
}

/// Stretches by `rate` then restores the original length, splitting the
/// crop or zero padding randomly between start and end.
pub fn speed_perturb<R: Rng + ?Sized>(w: &Waveform, rate: f64, rng: &mut R) -> Result<Waveform> {
    let len = w.samples.len();
    let stretched = stretch(&w.samples, rate)?;
    let samples = if stretched.len() >= len {
        let offset = rng.gen_range(0..=stretched.len() - len);
        stretched[offset..offset + len].to_vec()
    } else {
        let lead = rng.gen_range(0..=len - stretched.len());
        let mut out = vec![0.0; len];
        out[lead..lead + stretched.len()].copy_from_slice(&stretched);
        out
    };
    Ok(Waveform {
        samples,
        sample_rate: w.sample_rate,
    })
}

/// Draws a rate from `cfg.speed_range` and perturbs.
pub fn random_speed_perturb<R: Rng + ?Sized>(w: &Waveform, cfg: &AugmentConfig, rng: &mut R) -> Result<Waveform> {
    cfg.validate()?;
    let (lo, hi) = cfg.speed_range;
    let rate = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    speed_perturb(w, rate, rng)
}
