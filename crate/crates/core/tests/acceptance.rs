//! Acceptance report: one PASS/FAIL line per criterion. Exits nonzero when
//! any criterion fails.
//!
//! Run with `cargo test -p dsc-core --test acceptance`.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use common::oracles::{brute_ap, brute_auc, inverse_normal_series, ks_uniform};
use common::{model_check, op_suite, tiny_convnext, tiny_panns, Check, CASES};
use dsc_core::augment::{self, AugmentConfig, Axis};
use dsc_core::eval::{auc, average_precision, d_prime};
use dsc_core::frontend::Waveform;
use dsc_core::model::{Family, ModelConfig, MODEL_NAMES, TOY_MODEL};
use dsc_core::trainer::{train_toy, TrainConfig};
use dsc_core::{Checkpoint, Model, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn build(cfg: &ModelConfig) -> Model {
    Model::build(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

/// Published parameter counts in millions, with the allowed deviation.
const PAPER_PARAMS: [(&str, f64, f64); 6] = [
    ("cnn6", 4.8, 0.05),
    ("cnn6next", 3.3, 0.05),
    // the paper lists both 80.8M and 80.7M
    ("cnn14", 80.8, 0.1),
    ("cnn14sep", 30.5, 0.05),
    ("convnext-tiny", 28.2, 0.05),
    ("convnext-small", 49.9, 0.05),
];

fn param_counts() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, paper, tol) in PAPER_PARAMS {
        let m = build(&ModelConfig::by_name(name).unwrap());
        let got = m.param_count() as f64 / 1e6;
        let ok = (got - paper).abs() <= tol + 1e-9;
        pass &= ok;
        parts.push(format!("{name} {got:.3}M vs {paper}M{}", if ok { "" } else { " (out of range)" }));
    }
    outcome(pass, parts.join(", "))
}

fn mac_counts() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, shape, paper) in [
        ("cnn14", [1, 1, 1000, 64], 21.2e9),
        ("convnext-tiny", [1, 1, 1008, 224], 21.1e9),
    ] {
        let m = build(&ModelConfig::by_name(name).unwrap());
        let macs = m.trace(&shape).unwrap().macs as f64;
        let rel = (macs - paper) / paper;
        pass &= rel.abs() <= 0.10;
        parts.push(format!("{name} {:.2}G vs {:.1}G ({:+.1}%)", macs / 1e9, paper / 1e9, 100.0 * rel));
    }
    outcome(pass, parts.join(", "))
}

fn stem_and_stage_shapes() -> Outcome {
    let m = build(&ModelConfig::convnext_tiny());
    let x = Tensor::zeros(&[1, 1, 1008, 224]).unwrap();
    let stem = m.stem(&x).unwrap();
    let trace = m.trace(&[1, 1, 1008, 224]).unwrap();
    let block = |name: &str| trace.blocks.iter().find(|(n, _)| n == name).map(|(_, s)| s.clone());
    let mut pass = stem.shape() == [1, 96, 252, 56];
    let mut parts = vec![format!("stem {:?}", stem.shape())];
    for (i, expect) in [[1, 192, 126, 28], [1, 384, 63, 14], [1, 768, 31, 7]].iter().enumerate() {
        let down = block(&format!("downsample.{i}"));
        // the last block of the stage keeps the downsampled shape
        let depth = m.config.depths[i + 1];
        let last = block(&format!("stages.{}.blocks.{}", i + 1, depth - 1));
        pass &= down.as_deref() == Some(&expect[..]) && last.as_deref() == Some(&expect[..]);
        parts.push(format!("stage {} {}x{}", i + 1, expect[2], expect[3]));
    }
    outcome(pass, parts.join(", "))
}

fn bottleneck_widths() -> Outcome {
    let mut pass = true;
    let mut total = 0;
    let mut configs: Vec<ModelConfig> = MODEL_NAMES.iter().map(|n| ModelConfig::by_name(n).unwrap()).collect();
    configs.push(ModelConfig::by_name(TOY_MODEL).unwrap());
    for cfg in configs {
        let expected_blocks = match (cfg.family, cfg.name.as_str()) {
            (Family::ConvNeXt, _) => cfg.depths.iter().sum(),
            (_, "cnn6next") => cfg.channels.len(),
            _ => 0,
        };
        let b = build(&cfg).bottlenecks();
        pass &= b.len() == expected_blocks && b.iter().all(|b| b.hidden == 4 * b.width);
        total += b.len();
    }
    outcome(pass, format!("{total} blocks over {} configs, hidden = 4C in all", MODEL_NAMES.len() + 1))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut checks: Vec<Check> = op_suite::<f32>(1);
    checks.extend(op_suite::<f64>(2));
    checks.extend((0..5).map(|seed| model_check::<f32>(&tiny_convnext(), seed)));
    checks.push(model_check::<f64>(&tiny_convnext(), 7));
    for cfg in tiny_panns() {
        checks.push(model_check::<f64>(&cfg, 7));
    }
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    let min_cases = checks.iter().filter(|c| !c.name.contains("end-to-end")).map(|c| c.cases).min().unwrap_or(0);
    let worst32 = checks.iter().filter(|c| c.tolerance > 1e-4).map(|c| c.worst).fold(0.0, f64::max);
    let worst64 = checks.iter().filter(|c| c.tolerance < 1e-4).map(|c| c.worst).fold(0.0, f64::max);
    outcome(
        failed.is_empty() && min_cases >= CASES && secs < 120.0,
        format!(
            "{} checks, >= {min_cases} cases per op, worst 32-bit {worst32:.1e}, worst 64-bit {worst64:.1e}, {secs:.1}s{}",
            checks.len(),
            if failed.is_empty() { String::new() } else { format!(", failed: {failed:?}") }
        ),
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases = 0usize;
    let mut worst = 0f64;
    let mut agree = true;
    for n in 1..=8usize {
        for mask in 0u32..(1 << n) {
            let targets: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            let score_sets: [Vec<f32>; 3] = [
                (0..n).map(|_| rng.gen::<f32>()).collect(),
                (0..n).map(|_| [0.1f32, 0.2, 0.3][rng.gen_range(0..3)]).collect(),
                vec![0.5; n],
            ];
            for scores in &score_sets {
                cases += 1;
                for (got, want) in [
                    (average_precision(scores, &targets).unwrap(), brute_ap(scores, &targets)),
                    (auc(scores, &targets).unwrap(), brute_auc(scores, &targets)),
                ] {
                    match (got, want) {
                        (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                        (None, None) => {}
                        _ => agree = false,
                    }
                }
            }
        }
    }
    let mut d_err = 0f64;
    for i in 1..10_000 {
        let a = i as f64 / 10_000.0;
        d_err = d_err.max((d_prime(a) - std::f64::consts::SQRT_2 * inverse_normal_series(a)).abs());
    }
    let half = d_prime(0.5);
    outcome(
        agree && worst < 1e-12 && d_err < 1e-6 && half == 0.0,
        format!(
            "{cases} exhaustive AP/AUC cases, worst diff {worst:.1e}; d' max error {d_err:.1e} over 9999 AUCs; d'(0.5) = {half}"
        ),
    )
}

fn augmentation_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut stripes_ok = true;
    let mut draws = 0;
    for (cfg, h, w, freq_max) in [(AugmentConfig::cnn(), 1000, 64, 8), (AugmentConfig::convnext(), 1008, 224, 28)] {
        for _ in 0..200 {
            let x = Tensor::full(&[2, 1, h, w], 1.0).unwrap();
            let (y, record) = augment::spec_augment_traced(&x, &cfg, &mut rng).unwrap();
            for (plane, stripes) in y.data().chunks(h * w).zip(&record) {
                draws += 1;
                let time: Vec<_> = stripes.iter().filter(|s| s.axis == Axis::Time).collect();
                let freq: Vec<_> = stripes.iter().filter(|s| s.axis == Axis::Freq).collect();
                stripes_ok &= time.len() <= 2 && freq.len() <= 2;
                stripes_ok &= time.iter().all(|s| s.width <= 64 && s.start + s.width <= h);
                stripes_ok &= freq.iter().all(|s| s.width <= freq_max && s.start + s.width <= w);
                // zeroed cells are exactly the union of the stripes
                for (i, &v) in plane.iter().enumerate() {
                    let (t, f) = (i / w, i % w);
                    let masked = stripes.iter().any(|s| match s.axis {
                        Axis::Time => (s.start..s.start + s.width).contains(&t),
                        Axis::Freq => (s.start..s.start + s.width).contains(&f),
                    });
                    stripes_ok &= masked == (v == 0.0);
                }
            }
        }
    }

    let n = 100_000;
    let mut lambdas: Vec<f64> = (0..n).map(|_| augment::sample_lambda(1.0, &mut rng).unwrap()).collect();
    let mean = lambdas.iter().sum::<f64>() / n as f64;
    let ks = ks_uniform(&mut lambdas);
    // 1% critical value of the one-sample KS statistic
    let ks_crit = 1.628 / (n as f64).sqrt();

    let mut lengths_ok = true;
    for _ in 0..1000 {
        let len = rng.gen_range(1..20_000);
        let rate = rng.gen_range(0.5..=1.5);
        let w = Waveform::new((0..len).map(|i| (i as f32 * 0.01).sin()).collect(), 32_000).unwrap();
        let out = augment::speed_perturb(&w, rate, &mut rng).unwrap();
        lengths_ok &= out.samples.len() == len && out.sample_rate == 32_000;
    }
    outcome(
        stripes_ok && ks < ks_crit && (mean - 0.5).abs() < 0.005 && lengths_ok,
        format!(
            "{draws} SpecAugment draws in bounds; mixup lambda KS {ks:.4} < {ks_crit:.4}, mean {mean:.4}; 1000 speed-perturb lengths preserved"
        ),
    )
}

fn toy_overfit() -> Outcome {
    let cfg = TrainConfig::default();
    let schedule = cfg.schedule();
    let lrs: Vec<f64> = (0..=cfg.steps).map(|s| schedule.lr(s)).collect();
    let argmax = (0..lrs.len()).max_by(|&a, &b| lrs[a].total_cmp(&lrs[b]).then(b.cmp(&a))).unwrap();
    let peak_expected = (0.3 * cfg.steps as f64).round() as usize;
    let start = Instant::now();
    let (_, history) = train_toy(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let reached = history.steps_to(0.95);
    let pass = cfg.steps <= 300
        && history.rows.len() == cfg.steps
        && history.final_map >= 0.95
        && secs < 600.0
        && argmax == peak_expected
        && lrs[argmax] == 4e-3
        && history.rows[peak_expected].lr == 4e-3;
    outcome(
        pass,
        format!(
            "train mAP {:.4} after {} steps (>= 0.95 by step {}), {secs:.0}s; lr peak {:e} at step {argmax} of {}",
            history.final_map,
            history.rows.len(),
            reached.map_or("-".into(), |s| s.to_string()),
            lrs[argmax],
            cfg.steps
        ),
    )
}

fn checkpoint_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    // arbitrary bit patterns, NaN payloads and subnormals included
    let mut model = build(&ModelConfig::cnn6());
    for (_, e) in model.params.iter_mut() {
        for v in e.value.data_mut() {
            *v = f32::from_bits(rng.gen());
        }
    }
    let ck = Checkpoint::from_params(&model.params);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cnn6.acnx");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let mut fresh = build(&ModelConfig::cnn6());
    let report = back.apply(&mut fresh.params, true).unwrap();
    let bit_exact = model.params.iter().zip(fresh.params.iter()).all(|((_, a), (_, b))| {
        a.name == b.name
            && a.value.shape() == b.value.shape()
            && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    });

    // every single-bit flip of a small file, sampled flips of the large one
    let small = Checkpoint::from_params(&build(&tiny_convnext()).params).encode();
    let mut detected = 0usize;
    let mut flips = 0usize;
    for bit in 0..small.len() * 8 {
        let mut b = small.clone();
        b[bit / 8] ^= 1 << (bit % 8);
        flips += 1;
        detected += Checkpoint::decode(&b).is_err() as usize;
    }
    let big = ck.encode();
    for _ in 0..200 {
        let bit = rng.gen_range(0..big.len() * 8);
        let mut b = big.clone();
        b[bit / 8] ^= 1 << (bit % 8);
        flips += 1;
        detected += Checkpoint::decode(&b).is_err() as usize;
    }
    let truncations_caught = (0..small.len()).step_by(7).all(|n| Checkpoint::decode(&small[..n]).is_err());
    outcome(
        bit_exact && report.is_clean() && detected == flips && truncations_caught,
        format!(
            "{} tensors bit-exact through save/load; {detected}/{flips} bit flips detected; truncations rejected",
            report.loaded.len()
        ),
    )
}

fn main() {
    type Check = fn() -> Outcome;
    let criteria: [(&str, Check); 9] = [
        ("parameter counts", param_counts),
        ("MAC counts", mac_counts),
        ("stem and stage shapes", stem_and_stage_shapes),
        ("inverted bottleneck width", bottleneck_widths),
        ("gradient suite", gradient_suite),
        ("metric oracles", metric_oracles),
        ("augmentation invariants", augmentation_invariants),
        ("toy overfit and one-cycle peak", toy_overfit),
        ("checkpoint round trip and CRC", checkpoint_round_trip),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failures += !o.pass as usize;
        println!("{} {}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
