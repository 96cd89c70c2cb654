//! Parameter and multiply-accumulate counting plus a CPU throughput harness.
//!
//! MACs follow one convention throughout: a convolution costs
//! `N * C_out * H' * W' * (C_in / groups) * kh * kw` (padding taps
//! included), a linear layer `N * in * out`; normalization, activations and
//! pooling count zero. The log-mel frontend is not counted.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frontend::{self, MelConfig, Waveform};
use crate::model::{Family, ForwardCtx, Model};
use crate::ops::MacTally;
use crate::tensor::Tensor;

pub fn count_params(model: &Model) -> usize {
    model.param_count()
}

/// Analytic MACs for one forward pass over `input_shape`.
pub fn count_macs(model: &Model, input_shape: &[usize]) -> Result<u64> {
    Ok(model.trace(input_shape)?.macs)
}

/// Runs the model and tallies the multiply-adds its loops execute.
pub fn count_macs_instrumented(model: &Model, x: &Tensor) -> Result<MacTally> {
    let mut ctx = ForwardCtx::inference().counting();
    model.forward_with(x, &mut ctx)?;
    Ok(ctx.macs)
}

/// Model input frames for a clip of `seconds`, padded to the stem patch for
/// ConvNeXt models. Ten seconds gives 1000 (1008 for ConvNeXt).
pub fn frames_for_seconds(model: &Model, seconds: f64, mel: &MelConfig) -> Result<usize> {
    if !(seconds > 0.0 && seconds.is_finite()) {
        return Err(Error::invalid(format!("clip length must be positive, got {seconds}")));
    }
    let frames = ((seconds * mel.sample_rate as f64 / mel.hop as f64).round() as usize).max(1);
    Ok(match model.config.family {
        Family::ConvNeXt => frontend::frames_for_patch(frames, model.config.stem_patch),
        Family::Pann => frames,
    })
}

/// `(batch, 1, frames, mels)` for clips of `seconds`.
pub fn input_shape_for(model: &Model, batch: usize, seconds: f64) -> Result<[usize; 4]> {
    let mel = MelConfig::with_mels(model.config.input.1);
    Ok([batch, 1, frames_for_seconds(model, seconds, &mel)?, model.config.input.1])
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub batch: usize,
    pub seconds: f64,
    pub repeats: usize,
    pub warmup: usize,
    /// Time log-mel extraction from raw waveforms as well.
    pub include_frontend: bool,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch: 2,
            seconds: 10.0,
            repeats: 5,
            warmup: 1,
            include_frontend: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThroughputStats {
    /// Samples per second of every timed run.
    pub runs: Vec<f64>,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub threads: usize,
    pub batch: usize,
    pub include_frontend: bool,
}

impl ThroughputStats {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// End-to-end samples per second over `repeats` timed runs after warmup.
pub fn bench_throughput(model: &Model, cfg: &BenchConfig) -> Result<ThroughputStats> {
    if cfg.batch == 0 || cfg.repeats == 0 {
        return Err(Error::invalid("batch and repeats must be >= 1"));
    }
    let mel = MelConfig::with_mels(model.config.input.1);
    let shape = input_shape_for(model, cfg.batch, cfg.seconds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let len = (cfg.seconds * mel.sample_rate as f64).round() as usize;
    let waves: Vec<Waveform> = if cfg.include_frontend {
        (0..cfg.batch)
            .map(|_| Waveform::new((0..len).map(|_| rng.gen_range(-0.5..0.5)).collect(), mel.sample_rate))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let fixed = Tensor::from_values(
        &shape,
        (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-80.0..0.0)).collect(),
    )?;
    let run = || -> Result<()> {
        let x = if cfg.include_frontend {
            let mut data = Vec::with_capacity(fixed.len());
            for w in &waves {
                let spec = frontend::fit_time(&frontend::logmel(w, &mel)?, shape[2])?;
                data.extend_from_slice(spec.data());
            }
            Tensor::from_values(&shape, data)?
        } else {
            fixed.clone()
        };
        model.forward(&x)?;
        Ok(())
    };
    for _ in 0..cfg.warmup {
        run()?;
    }
    let mut runs = Vec::with_capacity(cfg.repeats);
    for _ in 0..cfg.repeats {
        let t = Instant::now();
        run()?;
        runs.push(cfg.batch as f64 / t.elapsed().as_secs_f64());
    }
    let mut sorted = runs.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(ThroughputStats {
        median: quantile(&sorted, 0.5),
        q1: quantile(&sorted, 0.25),
        q3: quantile(&sorted, 0.75),
        runs,
        threads: rayon::current_num_threads(),
        batch: cfg.batch,
        include_frontend: cfg.include_frontend,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileReport {
    pub model: String,
    pub input_shape: [usize; 4],
    pub params: usize,
    pub macs: u64,
    pub throughput: Option<ThroughputStats>,
}

impl ProfileReport {
    pub fn new(model: &Model, input_shape: [usize; 4]) -> Result<Self> {
        Ok(Self {
            model: model.config.name.clone(),
            input_shape,
            params: count_params(model),
            macs: count_macs(model, &input_shape)?,
            throughput: None,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "model       {}", self.model).unwrap();
        writeln!(s, "input       {:?}", self.input_shape).unwrap();
        writeln!(s, "params      {} ({:.2}M)", self.params, self.params as f64 / 1e6).unwrap();
        writeln!(s, "MACs        {} ({:.2}G)", self.macs, self.macs as f64 / 1e9).unwrap();
        writeln!(s, "2xMACs      {} ({:.2}G)", 2 * self.macs, 2.0 * self.macs as f64 / 1e9).unwrap();
        writeln!(s, "note        counts exclude the log-mel frontend").unwrap();
        if let Some(t) = &self.throughput {
            writeln!(
                s,
                "throughput  median {:.2} samples/s, IQR {:.2} ({} runs, batch {}, {} threads{})",
                t.median,
                t.iqr(),
                t.runs.len(),
                t.batch,
                t.threads,
                if t.include_frontend { ", frontend included" } else { "" }
            )
            .unwrap();
        }
        s
    }

    /// Line-delimited `key=value` form.
    pub fn to_key_values(&self) -> String {
        let [n, c, h, w] = self.input_shape;
        let mut s = format!(
            "model={}\ninput={n}x{c}x{h}x{w}\nparams={}\nmacs={}\nflops_2x={}\nfrontend_counted=false\n",
            self.model,
            self.params,
            self.macs,
            2 * self.macs
        );
        if let Some(t) = &self.throughput {
            write!(
                s,
                "throughput_median={}\nthroughput_iqr={}\nthreads={}\nbatch={}\nrepeats={}\n",
                t.median,
                t.iqr(),
                t.threads,
                t.batch,
                t.runs.len()
            )
            .unwrap();
        }
        s
    }
}
