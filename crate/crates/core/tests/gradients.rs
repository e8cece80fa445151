mod common;

use common::gradcheck;

#[test]
fn every_op_matches_finite_differences() {
    let results = gradcheck::run_suite(20, 0x5eed);
    let failures: Vec<_> = results
        .iter()
        .filter_map(|(name, r)| r.as_ref().err().map(|e| format!("{name}: {e}")))
        .collect();
    assert!(failures.is_empty(), "{failures:#?}");
}
