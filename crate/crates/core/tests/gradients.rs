mod common;

use common::suites::gradient_suite;

#[test]
fn every_op_and_loss_matches_finite_differences() {
    let results = gradient_suite();
    let failed: Vec<_> = results.iter().filter(|(_, e)| e.is_nan() || *e >= 1e-3).collect();
    assert!(failed.is_empty(), "gradient mismatches: {failed:?}");
}
