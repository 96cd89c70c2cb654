//! Waveform loading and log-mel spectrogram extraction.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frames fed to every model after cropping or padding.
pub const TARGET_FRAMES: usize = 1000;
/// Time extent ConvNeXt models need so the stride-4 stem divides evenly.
pub const CONVNEXT_FRAMES: usize = 1008;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    /// Periodic Hann window.
    Hann,
    Rectangular,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub window: Window,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Power values below this are clamped before the log.
    pub log_floor: f64,
}

impl MelConfig {
    /// 32 kHz, 1024-point FFT, hop 320, 50 Hz to 14 kHz.
    pub fn with_mels(n_mels: usize) -> Self {
        Self {
            sample_rate: 32_000,
            n_fft: 1024,
            hop: 320,
            window: Window::Hann,
            n_mels,
            f_min: 50.0,
            f_max: 14_000.0,
            log_floor: 1e-10,
        }
    }

    /// 64 bins, used by the CNN models.
    pub fn cnn() -> Self {
        Self::with_mels(64)
    }

    /// 224 bins, used by the ConvNeXt models.
    pub fn convnext() -> Self {
        Self::with_mels(224)
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(0.0 <= self.f_min && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(Error::invalid(format!(
                "need 0 <= f_min < f_max <= {nyquist}, got f_min {} f_max {}",
                self.f_min, self.f_max
            )));
        }
        if self.n_mels == 0 || self.hop == 0 || self.n_fft < 2 || self.sample_rate == 0 {
            return Err(Error::invalid("n_mels, hop, sample_rate must be >= 1 and n_fft >= 2"));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::invalid("log floor must be positive"));
        }
        Ok(())
    }

    /// Frame count of a centered STFT over `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        let pad = self.n_fft / 2;
        1 + (len + 2 * pad - self.n_fft) / self.hop
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform is empty"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("waveform has non-finite samples"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a 16-bit integer or 32-bit float PCM WAV, averaging channels.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let audio_err = |reason: String| Error::Audio {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| audio_err(e.to_string()))?;
    let spec = reader.spec();
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (hound::SampleFormat::Float, 32) => reader.samples::<f32>().collect::<std::result::Result<_, _>>(),
        (format, bits) => return Err(audio_err(format!("unsupported encoding {format:?} {bits}-bit"))),
    }
    .map_err(|e| audio_err(e.to_string()))?;
    let channels = spec.channels as usize;
    if channels == 0 || interleaved.is_empty() {
        return Err(audio_err("no samples".into()));
    }
    if !interleaved.len().is_multiple_of(channels) {
        return Err(audio_err("truncated file".into()));
    }
    let samples = interleaved
        .chunks_exact(channels)
        .map(|frame| (frame.iter().map(|&v| v as f64).sum::<f64>() / channels as f64) as f32)
        .collect();
    Waveform::new(samples, spec.sample_rate).map_err(|e| audio_err(e.to_string()))
}

/// Writes a mono 16-bit WAV. Samples are clipped to [-1, 1].
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let path = path.as_ref();
    let audio_err = |e: hound::Error| Error::Audio {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(audio_err)?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(audio_err)?;
    }
    writer.finalize().map_err(audio_err)
}

/// Linear-interpolation resampling to `round(len * target / source)` samples.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::invalid("target rate must be >= 1"));
    }
    if target_rate == w.sample_rate {
        return Ok(w.clone());
    }
    let len = w.samples.len();
    let out_len = ((len as f64 * target_rate as f64 / w.sample_rate as f64).round() as usize).max(1);
    let ratio = w.sample_rate as f64 / target_rate as f64;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let left = (pos.floor() as usize).min(len - 1);
            let right = (left + 1).min(len - 1);
            let frac = pos - left as f64;
            let (a, b) = (w.samples[left] as f64, w.samples[right] as f64);
            (a + (b - a) * frac.clamp(0.0, 1.0)) as f32
        })
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: target_rate,
    })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies of the `n_mels` triangular filters.
pub fn mel_centers(cfg: &MelConfig) -> Vec<f64> {
    mel_points(cfg)[1..=cfg.n_mels].to_vec()
}

fn mel_points(cfg: &MelConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Triangular HTK filterbank, `n_mels` rows of `n_fft / 2 + 1` weights.
/// Peaks are 1; no area normalization.
pub fn mel_filterbank(cfg: &MelConfig) -> Vec<Vec<f64>> {
    let bins = cfg.n_fft / 2 + 1;
    let points = mel_points(cfg);
    let bin_hz = |k: usize| k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = bin_hz(k);
                    let up = (f - left) / (center - left);
                    let down = (right - f) / (right - center);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

fn window(cfg: &MelConfig) -> Vec<f64> {
    let n = cfg.n_fft;
    match cfg.window {
        Window::Hann => (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect(),
        Window::Rectangular => vec![1.0; n],
    }
}

/// Reflection padding without repeating the edge sample.
fn reflect_pad(x: &[f32], pad: usize) -> Vec<f64> {
    let n = x.len() as isize;
    (-(pad as isize)..n + pad as isize)
        .map(|i| {
            let mut j = i;
            if j < 0 {
                j = -j;
            }
            if j >= n {
                j = 2 * (n - 1) - j;
            }
            x[j as usize] as f64
        })
        .collect()
}

/// Log-mel spectrogram of shape `(1, 1, frames, n_mels)` from a centered
/// STFT with reflection padding.
pub fn logmel(w: &Waveform, cfg: &MelConfig) -> Result<Tensor> {
    cfg.validate()?;
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::invalid(format!(
            "waveform is {} Hz, config expects {} Hz; resample first",
            w.sample_rate, cfg.sample_rate
        )));
    }
    if w.samples.len() < cfg.n_fft {
        return Err(Error::invalid(format!(
            "signal of {} samples is shorter than one {}-sample frame",
            w.samples.len(),
            cfg.n_fft
        )));
    }
    let padded = reflect_pad(&w.samples, cfg.n_fft / 2);
    let frames = cfg.frames(w.samples.len());
    let win = window(cfg);
    let bank = mel_filterbank(cfg);
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(cfg.n_fft);
    let bins = cfg.n_fft / 2 + 1;

    let mut out = vec![0f32; frames * cfg.n_mels];
    out.par_chunks_mut(cfg.n_mels).enumerate().for_each(|(t, row)| {
        let start = t * cfg.hop;
        let mut buf: Vec<Complex<f64>> = padded[start..start + cfg.n_fft]
            .iter()
            .zip(&win)
            .map(|(&s, &h)| Complex::new(s * h, 0.0))
            .collect();
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..bins].iter().map(|c| c.norm_sqr()).collect();
        for (dst, filter) in row.iter_mut().zip(&bank) {
            let e: f64 = filter.iter().zip(&power).map(|(a, b)| a * b).sum();
            *dst = (10.0 * e.max(cfg.log_floor).log10()) as f32;
        }
    });
    Tensor::from_values(&[1, 1, frames, cfg.n_mels], out)
}

/// Zero-pads the time axis (dim 2) at the end up to `target_frames`.
pub fn pad_time(x: &Tensor, target_frames: usize) -> Result<Tensor> {
    let (n, c, h, _) = x.dims4()?;
    if h > target_frames {
        return Err(Error::shape(format!("{h} frames exceed target {target_frames}")));
    }
    fit_time(x, target_frames).inspect(|t| debug_assert_eq!(t.shape()[..2], [n, c]))
}

/// Crops or zero-pads the time axis at the end to exactly `frames`.
pub fn fit_time(x: &Tensor, frames: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if frames == 0 {
        return Err(Error::shape("target frame count must be >= 1"));
    }
    if h == frames {
        return Ok(x.clone());
    }
    let keep = h.min(frames);
    let mut out = vec![0f32; n * c * frames * w];
    for (dst, src) in out.chunks_mut(frames * w).zip(x.data().chunks(h * w)) {
        dst[..keep * w].copy_from_slice(&src[..keep * w]);
    }
    Tensor::from_values(&[n, c, frames, w], out)
}

/// Resamples to the config rate, extracts log-mels and fits to `frames`.
pub fn extract(w: &Waveform, cfg: &MelConfig, frames: usize) -> Result<Tensor> {
    let w = resample(w, cfg.sample_rate)?;
    fit_time(&logmel(&w, cfg)?, frames)
}

/// Frame count a model expects after fitting: ConvNeXt time extents are
/// end-padded to a multiple of four stem patches, so 1000 becomes 1008 and
/// the post-stem extent (252) stays divisible by 4.
pub fn frames_for_patch(frames: usize, patch: Option<usize>) -> usize {
    match patch {
        Some(p) if p > 1 => frames.div_ceil(4 * p) * 4 * p,
        _ => frames,
    }
}
