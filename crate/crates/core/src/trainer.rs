//! Toy-scale training: BCE loss, AdamW, one-cycle schedule, a synthetic
//! tone dataset and the training loop.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{self, AugmentConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::frontend::{self, MelConfig, Waveform};
use crate::model::{ForwardCtx, Grads, Model, ModelConfig, ParamKind, ParamStore, TOY_MODEL};
use crate::ops::sigmoid_scalar;
use crate::tensor::{Real, Tensor};

/// Probabilities are clamped to `[EPS, 1 - EPS]` inside the log.
pub const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy over all entries, with its gradient with
/// respect to the logits, `(p - t) / count`.
pub fn bce_loss<T: Real>(probabilities: &Tensor<T>, targets: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if probabilities.shape() != targets.shape() {
        return Err(Error::shape(format!(
            "probabilities {:?} vs targets {:?}",
            probabilities.shape(),
            targets.shape()
        )));
    }
    let count = probabilities.len() as f64;
    let mut loss = 0f64;
    let mut grad = Vec::with_capacity(probabilities.len());
    for (&p, &t) in probabilities.data().iter().zip(targets.data()) {
        let (p, t) = (p.f64(), t.f64());
        let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        loss -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        grad.push(T::of((p - t) / count));
    }
    Ok((loss / count, Tensor::from_values(probabilities.shape(), grad)?))
}

/// [`bce_loss`] on sigmoid(logits), computed in 64-bit.
pub fn bce_with_logits<T: Real>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let p: Tensor<f64> = logits.cast::<f64>().map(sigmoid_scalar);
    let (loss, grad) = bce_loss(&p, &targets.cast())?;
    Ok((loss, grad.cast()))
}

/// AdamW with decoupled weight decay. Only [`ParamKind::Weight`] tensors
/// decay; buffers are never touched.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, e)| vec![0.0; e.value.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::invalid("optimizer state does not match the parameter store"));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, entry) in params.iter_mut() {
            if !entry.kind.is_learnable() {
                continue;
            }
            let decay = if entry.kind == ParamKind::Weight {
                1.0 - lr * self.weight_decay
            } else {
                1.0
            };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let g = grads.get(id);
            if let Some(g) = g {
                if g.shape() != entry.value.shape() {
                    return Err(Error::shape(format!("gradient for {} has shape {:?}", entry.name, g.shape())));
                }
            }
            for (i, p) in entry.value.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g.data()[i].f64());
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *p = T::of(p.f64() * decay - lr * update);
            }
        }
        Ok(())
    }
}

/// Cosine warmup from `max_lr / start_div` to `max_lr` at
/// `round(warmup_frac * total)`, then cosine decay to `max_lr / end_div`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneCycle {
    pub total: usize,
    pub max_lr: f64,
    pub warmup_frac: f64,
    pub start_div: f64,
    pub end_div: f64,
}

impl OneCycle {
    pub fn new(total: usize, max_lr: f64, warmup_frac: f64) -> Self {
        Self {
            total,
            max_lr,
            warmup_frac,
            start_div: 25.0,
            end_div: 1e4,
        }
    }

    pub fn peak_step(&self) -> usize {
        (self.warmup_frac * self.total as f64).round() as usize
    }

    pub fn lr(&self, step: usize) -> f64 {
        let step = step.min(self.total);
        let peak = self.peak_step();
        let (start, end) = (self.max_lr / self.start_div, self.max_lr / self.end_div);
        let cos_mix = |from: f64, to: f64, frac: f64| to + (from - to) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0;
        if step <= peak {
            if peak == 0 {
                return self.max_lr;
            }
            cos_mix(start, self.max_lr, step as f64 / peak as f64)
        } else {
            cos_mix(self.max_lr, end, (step - peak) as f64 / (self.total - peak) as f64)
        }
    }
}

pub fn one_cycle_lr(step: usize, total: usize, max_lr: f64, warmup_frac: f64) -> f64 {
    OneCycle::new(total, max_lr, warmup_frac).lr(step)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: String,
    pub batch_size: usize,
    pub steps: usize,
    pub max_lr: f64,
    pub warmup_frac: f64,
    pub start_div: f64,
    pub end_div: f64,
    pub weight_decay: f64,
    pub drop_path: f64,
    pub mixup: bool,
    pub mixup_alpha: f64,
    pub spec_augment: bool,
    pub seed: u64,
    /// Synthetic dataset size and number of frequency-band classes.
    pub clips: usize,
    pub bands: usize,
    /// Train-set mAP is measured every this many steps (0: only at the end).
    pub eval_every: usize,
    pub history: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: TOY_MODEL.into(),
            batch_size: 16,
            steps: 300,
            max_lr: 4e-3,
            warmup_frac: 0.3,
            start_div: 25.0,
            end_div: 1e4,
            weight_decay: 0.05,
            drop_path: 0.0,
            mixup: false,
            mixup_alpha: 1.0,
            spec_augment: false,
            seed: 0,
            clips: 64,
            bands: 8,
            eval_every: 50,
            history: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys and
    /// bad values are errors carrying the line number.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.split('#').next().unwrap_or("").trim();
            if l.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.display().to_string(),
                line,
                message,
            };
            let (key, value) = l.split_once('=').ok_or_else(|| err(format!("expected key = value, got {l:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            fn num<V: std::str::FromStr>(v: &str, key: &str) -> std::result::Result<V, String> {
                v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
            }
            fn flag(v: &str, key: &str) -> std::result::Result<bool, String> {
                match v {
                    "true" | "on" | "yes" | "1" => Ok(true),
                    "false" | "off" | "no" | "0" => Ok(false),
                    _ => Err(format!("{key}: expected true or false, got {v:?}")),
                }
            }
            let r: std::result::Result<(), String> = (|| {
                match key {
                    "model" => cfg.model = value.to_string(),
                    "batch_size" => cfg.batch_size = num(value, key)?,
                    "steps" => cfg.steps = num(value, key)?,
                    "max_lr" => cfg.max_lr = num(value, key)?,
                    "warmup_frac" => cfg.warmup_frac = num(value, key)?,
                    "start_div" => cfg.start_div = num(value, key)?,
                    "end_div" => cfg.end_div = num(value, key)?,
                    "weight_decay" => cfg.weight_decay = num(value, key)?,
                    "drop_path" => cfg.drop_path = num(value, key)?,
                    "mixup" => cfg.mixup = flag(value, key)?,
                    "mixup_alpha" => cfg.mixup_alpha = num(value, key)?,
                    "spec_augment" => cfg.spec_augment = flag(value, key)?,
                    "seed" => cfg.seed = num(value, key)?,
                    "clips" => cfg.clips = num(value, key)?,
                    "bands" => cfg.bands = num(value, key)?,
                    "eval_every" => cfg.eval_every = num(value, key)?,
                    "history" => cfg.history = Some(PathBuf::from(value)),
                    "checkpoint_dir" => cfg.checkpoint_dir = Some(PathBuf::from(value)),
                    _ => return Err(format!("unknown key {key:?}")),
                }
                Ok(())
            })();
            r.map_err(err)?;
        }
        cfg.validate().map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return bad(format!("warmup_frac must be in (0, 1), got {}", self.warmup_frac));
        }
        if !(self.max_lr > 0.0) || self.weight_decay < 0.0 {
            return bad("max_lr must be > 0 and weight_decay >= 0".into());
        }
        if self.batch_size == 0 || self.steps == 0 || self.clips == 0 || self.bands == 0 {
            return bad("batch_size, steps, clips and bands must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return bad(format!("drop_path must be in [0, 1), got {}", self.drop_path));
        }
        if !(self.start_div > 0.0 && self.end_div > 0.0) {
            return bad("start_div and end_div must be positive".into());
        }
        if self.mixup && !(self.mixup_alpha > 0.0) {
            return bad("mixup_alpha must be > 0".into());
        }
        ModelConfig::by_name(&self.model).map(|_| ())
    }

    pub fn schedule(&self) -> OneCycle {
        OneCycle {
            start_div: self.start_div,
            end_div: self.end_div,
            ..OneCycle::new(self.steps, self.max_lr, self.warmup_frac)
        }
    }

    /// The named model with this run's class count and drop-path rate.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::by_name(&self.model)?;
        m.num_classes = self.bands;
        m.drop_path = self.drop_path;
        Ok(m)
    }
}

/// Spectrograms `(1, 1, frames, mels)` with multi-hot targets.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Vec<f32>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }

    fn gather(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let shape = self.inputs[0].shape();
        let (h, w) = (shape[2], shape[3]);
        let mut x = Vec::with_capacity(idx.len() * h * w);
        let mut y = Vec::with_capacity(idx.len() * self.classes());
        for &i in idx {
            x.extend_from_slice(self.inputs[i].data());
            y.extend_from_slice(&self.targets[i]);
        }
        Ok((
            Tensor::from_values(&[idx.len(), 1, h, w], x)?,
            Tensor::from_values(&[idx.len(), self.classes()], y)?,
        ))
    }

    /// Frequency range of band `b` out of `bands`, log-spaced over 150 Hz to
    /// 10 kHz.
    pub fn band_edges(b: usize, bands: usize) -> (f64, f64) {
        let (lo, hi) = (150f64.ln(), 10_000f64.ln());
        let at = |k: usize| (lo + (hi - lo) * k as f64 / bands as f64).exp();
        (at(b), at(b + 1))
    }

    /// Clips of one or two pure tones; the label marks the band of each
    /// tone. Clip `i` always contains band `i % bands`. Spectrograms are
    /// standardized with the dataset mean and deviation.
    pub fn tones(clips: usize, bands: usize, frames: usize, mels: usize, seed: u64) -> Result<Self> {
        let mel = MelConfig::with_mels(mels);
        let len = frames * mel.hop;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = Vec::with_capacity(clips);
        let mut targets = Vec::with_capacity(clips);
        for i in 0..clips {
            let mut active = vec![i % bands];
            if bands > 1 && rng.gen_bool(0.5) {
                let other = rng.gen_range(0..bands);
                if other != active[0] {
                    active.push(other);
                }
            }
            let mut samples: Vec<f64> = (0..len).map(|_| rng.gen_range(-1e-3..1e-3)).collect();
            for &b in &active {
                let (lo, hi) = Self::band_edges(b, bands);
                // middle of the band in log frequency, away from neighbours
                let span = (hi / lo).ln();
                let f = lo * (span * rng.gen_range(0.3..0.7)).exp();
                let amp = rng.gen_range(0.1..0.3);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                for (n, s) in samples.iter_mut().enumerate() {
                    *s += amp * (std::f64::consts::TAU * f * n as f64 / mel.sample_rate as f64 + phase).sin();
                }
            }
            let w = Waveform::new(samples.into_iter().map(|v| v as f32).collect(), mel.sample_rate)?;
            inputs.push(frontend::fit_time(&frontend::logmel(&w, &mel)?, frames)?);
            let mut t = vec![0f32; bands];
            for b in active {
                t[b] = 1.0;
            }
            targets.push(t);
        }
        let all = inputs.iter().flat_map(|x| x.data()).map(|&v| v as f64);
        let n = (clips * frames * mels) as f64;
        let mean = all.clone().sum::<f64>() / n;
        let std = (all.map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
        let inputs = inputs
            .into_iter()
            .map(|x| x.map(|v| ((v as f64 - mean) / std) as f32))
            .collect();
        Ok(Self { inputs, targets })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
    /// `(steps completed, train mAP)` at each evaluation.
    pub evals: Vec<(usize, f64)>,
    pub final_map: f64,
    pub checkpoints: Vec<PathBuf>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,loss\n");
        for r in &self.rows {
            writeln!(s, "{},{},{}", r.step, r.lr, r.loss).unwrap();
        }
        s
    }

    /// First evaluation step reaching `target` mAP.
    pub fn steps_to(&self, target: f64) -> Option<usize> {
        self.evals.iter().find(|(_, m)| *m >= target).map(|(s, _)| *s)
    }
}

/// Macro mAP of the model on a whole dataset, in inference mode.
pub fn dataset_map(model: &Model, data: &Dataset) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut scores = Vec::with_capacity(data.len() * data.classes());
    for chunk in idx.chunks(32) {
        let (x, _) = data.gather(chunk)?;
        scores.extend_from_slice(model.forward(&x)?.probabilities.data());
    }
    let (_, y) = data.gather(&idx)?;
    let report = EvalReport::from_scores(&Tensor::from_values(y.shape(), scores)?, &y, None)?;
    Ok(report.mean_ap)
}

/// One optimization step. Returns the loss.
fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    x: &Tensor,
    y: &Tensor,
    lr: f64,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut ctx = ForwardCtx::training(rng);
    let (pred, tape) = model.forward_recorded(x, &mut ctx)?;
    let updates = std::mem::take(&mut ctx.bn_updates);
    drop(ctx);
    let (loss, grad) = bce_with_logits(&pred.logits, y)?;
    let grads = model.backward(tape, grad)?;
    let grad_norm = grads.global_norm();
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(Error::Diverged { step, lr, grad_norm });
    }
    model.apply_bn_updates(updates)?;
    opt.step(&mut model.params, &grads, lr)?;
    Ok(loss)
}

/// Trains `model` on `data` following `cfg`. Checkpoints are written at
/// each epoch end when `cfg.checkpoint_dir` is set.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if data.is_empty() || data.classes() != model.config.num_classes {
        return Err(Error::invalid(format!(
            "dataset with {} classes for a model with {}",
            data.classes(),
            model.config.num_classes
        )));
    }
    let schedule = cfg.schedule();
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let aug = AugmentConfig {
        mixup_alpha: cfg.mixup_alpha,
        ..if model.config.input.1 > 64 {
            AugmentConfig::convnext()
        } else {
            AugmentConfig::cnn()
        }
    };
    let batch = cfg.batch_size.min(data.len());
    let per_epoch = data.len().div_ceil(batch);
    let mut order: Vec<usize> = Vec::new();
    let mut history = History::default();
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    for step in 0..cfg.steps {
        if order.len() < batch {
            let mut fresh: Vec<usize> = (0..data.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let idx: Vec<usize> = order.drain(..batch).collect();
        let (mut x, mut y) = data.gather(&idx)?;
        if cfg.spec_augment {
            x = augment::spec_augment(&x, &aug, &mut rng)?;
        }
        if cfg.mixup {
            let mut partner = idx.clone();
            partner.shuffle(&mut rng);
            let (x2, y2) = data.gather(&partner)?;
            let m = augment::mixup(&x, &y, &x2, &y2, cfg.mixup_alpha, &mut rng)?;
            x = m.x;
            y = m.y;
        }
        let lr = schedule.lr(step);
        let loss = train_step(model, &mut opt, &x, &y, lr, step, &mut rng)?;
        history.rows.push(HistoryRow { step, lr, loss });
        let done = step + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && done != cfg.steps {
            history.evals.push((done, dataset_map(model, data)?));
        }
        if done % per_epoch == 0 || done == cfg.steps {
            if let Some(dir) = &cfg.checkpoint_dir {
                let path = dir.join(format!("epoch{:04}.acnx", done.div_ceil(per_epoch)));
                Checkpoint::from_params(&model.params).save(&path)?;
                history.checkpoints.push(path);
            }
        }
    }
    history.final_map = dataset_map(model, data)?;
    history.evals.push((cfg.steps, history.final_map));
    Ok(history)
}

/// Builds the configured model and tone dataset, then trains.
pub fn train_toy(cfg: &TrainConfig) -> Result<(Model, History)> {
    let mcfg = cfg.model_config()?;
    let mut model = Model::build(&mcfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let (frames, mels) = mcfg.input;
    let data = Dataset::tones(cfg.clips, cfg.bands, frames, mels, cfg.seed.wrapping_add(1))?;
    let history = train(&mut model, &data, cfg)?;
    Ok((model, history))
}
