mod common;

use common::{composite_error, op_cases, op_error, COMPOSITE_TOL, OP_TOL};

#[test]
fn every_operation_matches_central_differences() {
    let mut failures = Vec::new();
    for case in op_cases() {
        let err = op_error(&case).unwrap();
        if !(err < OP_TOL) {
            failures.push(format!("{}: {err:e}", case.name));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn three_module_loss_matches_central_differences() {
    let err = composite_error(40).unwrap();
    assert!(err < COMPOSITE_TOL, "relative error {err:e}");
}
