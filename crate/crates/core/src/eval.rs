//! Multi-label metrics (AP, ROC AUC, d-prime), manifests and macro-averaged
//! evaluation reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frontend::{self, MelConfig};
use crate::model::{Family, Model};
use crate::tensor::Tensor;

/// Indices sorted by descending score, grouped into runs of equal scores.
fn tie_groups(scores: &[f32]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

fn check_lengths(scores: &[f32], targets: &[bool]) -> Result<()> {
    if scores.len() != targets.len() {
        return Err(Error::shape(format!("{} scores for {} targets", scores.len(), targets.len())));
    }
    Ok(())
}

/// Step-interpolated average precision, `sum (R_n - R_{n-1}) P_n` over
/// descending distinct thresholds. `None` when there are no positives.
pub fn average_precision(scores: &[f32], targets: &[bool]) -> Result<Option<f64>> {
    check_lengths(scores, targets)?;
    let positives = targets.iter().filter(|&&t| t).count();
    if positives == 0 {
        return Ok(None);
    }
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0f64);
    for group in tie_groups(scores) {
        let hits = group.iter().filter(|&&i| targets[i]).count();
        tp += hits;
        seen += group.len();
        if hits > 0 {
            ap += (hits as f64 / positives as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(Some(ap))
}

/// Probability a random positive outranks a random negative, ties counted
/// as one half (midrank formulation). `None` without both classes.
pub fn auc(scores: &[f32], targets: &[bool]) -> Result<Option<f64>> {
    check_lengths(scores, targets)?;
    let pos = targets.iter().filter(|&&t| t).count();
    let neg = targets.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    // Ascending midranks, 1-based.
    let mut rank_sum = 0f64;
    let mut below = 0usize;
    for group in tie_groups(scores).into_iter().rev() {
        let midrank = below as f64 + (group.len() as f64 + 1.0) / 2.0;
        rank_sum += midrank * group.iter().filter(|&&i| targets[i]).count() as f64;
        below += group.len();
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(Some(u / (pos * neg) as f64))
}

/// Inverse of the standard normal CDF. Acklam's rational approximation
/// refined with one Halley step, accurate to about 1e-15 relative.
pub fn inverse_normal_cdf(p: f64) -> f64 {
    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    #[allow(clippy::excessive_precision)]
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    const LOW: f64 = 0.02425;
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let mut x = if p < LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    };
    // Halley step on Phi(x) - p.
    let e = 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    x -= u / (1.0 + x * u / 2.0);
    x
}

/// `sqrt(2) * Phi^-1(auc)`. Infinite at 0 and 1, NaN outside [0, 1].
pub fn d_prime(auc_value: f64) -> f64 {
    std::f64::consts::SQRT_2 * inverse_normal_cdf(auc_value)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub index: usize,
    pub name: String,
    pub positives: usize,
    pub ap: Option<f64>,
    pub auc: Option<f64>,
    /// `None` when AUC is undefined; infinite when AUC is 0 or 1.
    pub d_prime: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassMetrics>,
    pub clips: usize,
    pub failed_clips: Vec<(String, String)>,
    pub mean_ap: f64,
    pub mean_auc: f64,
    /// Mean of per-class d-primes over classes with finite values.
    pub mean_d_prime: f64,
    /// d-prime of the macro AUC, reported for comparison.
    pub d_prime_of_mean_auc: f64,
    /// Classes without positives (no AP).
    pub skipped_ap: usize,
    /// Classes lacking positives or negatives (no AUC).
    pub skipped_auc: usize,
    /// Classes whose AUC is exactly 0 or 1.
    pub saturated_d_prime: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0f64, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl EvalReport {
    /// Scores `(N, C)` against multi-hot targets `(N, C)`.
    pub fn from_scores(scores: &Tensor, targets: &Tensor, names: Option<&ClassMap>) -> Result<Self> {
        let (n, c) = scores.dims2()?;
        if targets.shape() != scores.shape() {
            return Err(Error::shape(format!(
                "scores {:?} vs targets {:?}",
                scores.shape(),
                targets.shape()
            )));
        }
        if let Some(map) = names {
            if map.len() != c {
                return Err(Error::invalid(format!("class map has {} names for {c} classes", map.len())));
            }
        }
        let classes = (0..c)
            .into_par_iter()
            .map(|k| {
                let s: Vec<f32> = (0..n).map(|i| scores.data()[i * c + k]).collect();
                let t: Vec<bool> = (0..n).map(|i| targets.data()[i * c + k] >= 0.5).collect();
                let ap = average_precision(&s, &t)?;
                let auc = auc(&s, &t)?;
                Ok(ClassMetrics {
                    index: k,
                    name: names.map_or_else(|| k.to_string(), |m| m.names[k].clone()),
                    positives: t.iter().filter(|&&v| v).count(),
                    ap,
                    auc,
                    d_prime: auc.map(d_prime),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mean_auc = mean(classes.iter().filter_map(|m| m.auc));
        Ok(Self {
            clips: n,
            failed_clips: Vec::new(),
            mean_ap: mean(classes.iter().filter_map(|m| m.ap)),
            mean_auc,
            mean_d_prime: mean(classes.iter().filter_map(|m| m.d_prime).filter(|d| d.is_finite())),
            d_prime_of_mean_auc: d_prime(mean_auc),
            skipped_ap: classes.iter().filter(|m| m.ap.is_none()).count(),
            skipped_auc: classes.iter().filter(|m| m.auc.is_none()).count(),
            saturated_d_prime: classes.iter().filter(|m| m.d_prime.is_some_and(|d| d.is_infinite())).count(),
            classes,
        })
    }

    pub fn summary(&self) -> String {
        format!(
            "mAP={:.4} AUC={:.4} d-prime={:.4} (d-prime of mean AUC {:.4}) clips={} failed={} skipped_classes={}",
            self.mean_ap,
            self.mean_auc,
            self.mean_d_prime,
            self.d_prime_of_mean_auc,
            self.clips,
            self.failed_clips.len(),
            self.skipped_ap.max(self.skipped_auc)
        )
    }

    /// Machine-readable `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("mean_ap", self.mean_ap),
            ("mean_auc", self.mean_auc),
            ("mean_d_prime", self.mean_d_prime),
            ("d_prime_of_mean_auc", self.d_prime_of_mean_auc),
        ] {
            writeln!(s, "{k}={v}").unwrap();
        }
        for (k, v) in [
            ("clips", self.clips),
            ("failed_clips", self.failed_clips.len()),
            ("skipped_ap", self.skipped_ap),
            ("skipped_auc", self.skipped_auc),
            ("saturated_d_prime", self.saturated_d_prime),
        ] {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }

    /// Per-class CSV: `class_id,name,positives,ap,auc,d_prime`; undefined
    /// values are left empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        let mut s = String::from("class_id,name,positives,ap,auc,d_prime\n");
        for m in &self.classes {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                m.index,
                csv_field(&m.name),
                m.positives,
                opt(m.ap),
                opt(m.auc),
                opt(m.d_prime)
            )
            .unwrap();
        }
        s
    }

    /// Aligned human-readable table of per-class values.
    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut s = format!("{:>5}  {:<32} {:>5} {:>8} {:>8} {:>8}\n", "id", "class", "pos", "AP", "AUC", "d'");
        for m in &self.classes {
            writeln!(
                s,
                "{:>5}  {:<32} {:>5} {:>8} {:>8} {:>8}",
                m.index,
                m.name,
                m.positives,
                opt(m.ap),
                opt(m.auc),
                opt(m.d_prime)
            )
            .unwrap();
        }
        s.push_str(&self.summary());
        s.push('\n');
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Splits one CSV line, honouring double-quoted fields.
fn split_csv(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(ch) = chars.next() {
        match (ch, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => fields.push(std::mem::take(&mut cur)),
            _ => cur.push(ch),
        }
    }
    fields.push(cur);
    fields
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Content lines with 1-based line numbers; blank lines, `#` comments and a
/// header whose first field is `header` are skipped.
fn data_lines<'a>(text: &'a str, header: &'a str) -> impl Iterator<Item = (usize, &'a str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .enumerate()
        .filter(move |(k, (_, l))| !(*k == 0 && l.split(',').next().is_some_and(|f| f.trim() == header)))
        .map(|(_, v)| v)
}

/// Class index to display name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    pub names: Vec<String>,
}

impl ClassMap {
    pub fn numbered(count: usize) -> Self {
        Self {
            names: (0..count).map(|i| format!("class_{i}")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Parses `id,name` rows; ids must cover `0..n` exactly once.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut rows: Vec<(usize, String)> = Vec::new();
        for (line, l) in data_lines(text, "id") {
            let f = split_csv(l);
            if f.len() < 2 {
                return Err(parse_err(path, line, "expected id,name"));
            }
            let id: usize = f[0].trim().parse().map_err(|_| parse_err(path, line, format!("bad id {:?}", f[0])))?;
            rows.push((id, f[1..].join(",").trim().to_string()));
        }
        rows.sort_by_key(|r| r.0);
        for (i, (id, _)) in rows.iter().enumerate() {
            if *id != i {
                return Err(parse_err(path, 0, format!("class ids must be 0..{} without gaps or repeats", rows.len())));
            }
        }
        if rows.is_empty() {
            return Err(parse_err(path, 0, "no classes"));
        }
        Ok(Self {
            names: rows.into_iter().map(|r| r.1).collect(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path)?, path)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub clip_id: String,
    pub path: PathBuf,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    /// Parses `clip_id,path,label_ids` with `;`-separated label ids.
    /// Relative paths are resolved against `base`.
    pub fn parse(text: &str, path: &Path, base: &Path, num_classes: usize) -> Result<Self> {
        let mut rows = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (line, l) in data_lines(text, "clip_id") {
            let f = split_csv(l);
            if f.len() != 3 {
                return Err(parse_err(path, line, format!("expected 3 fields, got {}", f.len())));
            }
            let labels = f[2]
                .split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| match s.parse::<usize>() {
                    Ok(v) if v < num_classes => Ok(v),
                    _ => Err(parse_err(path, line, format!("label {s:?} not in [0, {num_classes})"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let clip_path = base.join(f[1].trim());
            if !seen.insert(clip_path.clone()) {
                return Err(parse_err(path, line, format!("duplicate path {}", f[1].trim())));
            }
            rows.push(ManifestRow {
                clip_id: f[0].trim().to_string(),
                path: clip_path,
                labels,
            });
        }
        Ok(Self { rows })
    }

    pub fn load(path: impl AsRef<Path>, num_classes: usize) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&std::fs::read_to_string(path)?, path, base, num_classes)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Mel settings matching a model: bin count from its input width.
pub fn mel_config_for(model: &Model) -> MelConfig {
    MelConfig::with_mels(model.config.input.1)
}

/// Frame count fed to a model when its configured input is `frames` long.
pub fn frames_for(model: &Model, frames: usize) -> usize {
    match model.config.family {
        Family::ConvNeXt => frontend::frames_for_patch(frames, model.config.stem_patch),
        Family::Pann => frames,
    }
}

/// Loads a clip and produces the model input `(1, 1, frames, mels)`.
pub fn clip_input(model: &Model, path: &Path, cfg: &MelConfig, frames: usize) -> Result<Tensor> {
    let w = frontend::load_wav(path)?;
    let x = frontend::extract(&w, cfg, frames)?;
    frontend::fit_time(&x, frames_for(model, frames))
}

/// Runs the model over every clip. Unreadable clips are recorded in the
/// report and excluded.
pub fn evaluate(
    model: &Model,
    manifest: &Manifest,
    classes: Option<&ClassMap>,
    cfg: &MelConfig,
    frames: usize,
) -> Result<EvalReport> {
    if manifest.is_empty() {
        return Err(Error::invalid("manifest has no clips"));
    }
    let c = model.config.num_classes;
    let mut scores = Vec::new();
    let mut targets = Vec::new();
    let mut failed = Vec::new();
    for row in &manifest.rows {
        let out = clip_input(model, &row.path, cfg, frames).and_then(|x| model.forward(&x));
        match out {
            Ok(pred) => {
                scores.extend_from_slice(pred.probabilities.data());
                let mut t = vec![0f32; c];
                for &l in &row.labels {
                    t[l] = 1.0;
                }
                targets.extend(t);
            }
            Err(e @ (Error::Audio { .. } | Error::Io(_))) => failed.push((row.clip_id.clone(), e.to_string())),
            Err(e) => return Err(e),
        }
    }
    let n = scores.len() / c;
    if n == 0 {
        return Err(Error::invalid(format!("all {} clips failed to load", failed.len())));
    }
    let mut report = EvalReport::from_scores(
        &Tensor::from_values(&[n, c], scores)?,
        &Tensor::from_values(&[n, c], targets)?,
        classes,
    )?;
    report.failed_clips = failed;
    Ok(report)
}
