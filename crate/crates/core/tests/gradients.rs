mod common;

use common::{model_check, op_suite, tiny_convnext, tiny_panns};

fn report(checks: &[common::Check]) {
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).collect();
    for c in checks {
        eprintln!("{:<40} {:>3} cases  worst {:.2e}  (tol {:.0e})", c.name, c.cases, c.worst, c.tolerance);
    }
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn every_op_at_32_bit() {
    report(&op_suite::<f32>(1));
}

#[test]
fn every_op_at_64_bit() {
    report(&op_suite::<f64>(2));
}

#[test]
fn tiny_convnext_end_to_end_32_bit() {
    let checks: Vec<_> = (0..5).map(|seed| model_check::<f32>(&tiny_convnext(), seed)).collect();
    report(&checks);
}

#[test]
fn tiny_models_end_to_end_64_bit() {
    let mut checks = vec![model_check::<f64>(&tiny_convnext(), 7)];
    for cfg in tiny_panns() {
        checks.push(model_check::<f64>(&cfg, 7));
    }
    report(&checks);
}
