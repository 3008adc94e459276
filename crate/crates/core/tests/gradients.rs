mod common;

use common::{module_cases, op_cases, worst_over, FD_TOL};

#[test]
fn every_op_matches_finite_differences() {
    for case in op_cases() {
        let worst = worst_over(&case, 20, 11).unwrap();
        assert!(worst < FD_TOL, "{}: rel err {worst:e}", case.name);
    }
}

#[test]
fn every_module_matches_finite_differences() {
    for case in module_cases() {
        let worst = worst_over(&case, 5, 12).unwrap();
        assert!(worst < FD_TOL, "{}: rel err {worst:e}", case.name);
    }
}

#[test]
fn matmul_tight_tolerance() {
    let case = op_cases().into_iter().find(|c| c.name == "matmul").unwrap();
    assert!(worst_over(&case, 20, 13).unwrap() < 1e-6);
}
