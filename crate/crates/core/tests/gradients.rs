mod common;

use common::{op_cases, op_grad_error, GRAD_TOL};

#[test]
fn every_op_passes_finite_differences_over_100_draws() {
    let mut failures = Vec::new();
    for c in op_cases() {
        let err = op_grad_error(&c, 100);
        if err > GRAD_TOL {
            failures.push(format!("{}: {err:.3e}", c.name));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}
