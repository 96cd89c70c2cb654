use std::time::Instant;

use dsc_core::trainer::{train_toy, TrainConfig};

#[test]
fn reduced_convnext_fits_tone_dataset() {
    let cfg = TrainConfig::default();
    let t = Instant::now();
    let (_, history) = train_toy(&cfg).unwrap();
    eprintln!("evals {:?} in {:.1}s", history.evals, t.elapsed().as_secs_f64());
    assert_eq!(history.rows.len(), 300);
    assert!(history.final_map >= 0.95, "train mAP {}", history.final_map);
    let first = history.rows[..10].iter().map(|r| r.loss).sum::<f64>();
    let last = history.rows[290..].iter().map(|r| r.loss).sum::<f64>();
    assert!(last < first);
}
