//! Gradient checks: every registered tape op against central finite
//! differences on random small inputs, ten draws each, relative error
//! at most 1e-3.

mod common;

use flowseg::tensor::REGISTERED_OPS;

const TOL: f64 = 1e-3;

#[test]
fn every_registered_op_matches_finite_differences() {
    let started = std::time::Instant::now();
    let mut failures = Vec::new();
    for &name in REGISTERED_OPS {
        let err = common::gradcheck::check_op(name);
        if !(err <= TOL) {
            failures.push(format!("{name}: rel err {err:.3e}"));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {}", failures.join("; "));
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs_f64() < 60.0,
        "gradient suite took {elapsed:?}, budget is one minute"
    );
}

#[test]
fn the_op_registry_is_complete() {
    // A new tape op must land in REGISTERED_OPS (and thus the check
    // above); 19 is the current contract.
    assert_eq!(REGISTERED_OPS.len(), 19);
}
