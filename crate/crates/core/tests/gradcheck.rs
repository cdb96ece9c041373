mod common;

use common::grad_suite::{fused_model_case, op_cases};

const TOL: f64 = 1e-4;

#[test]
fn every_op_matches_finite_differences() {
    for (name, r) in op_cases() {
        assert!(r.max_rel < TOL, "{name}: rel err {} at {:?}", r.max_rel, r.worst);
    }
}

#[test]
fn fused_model_matches_finite_differences() {
    let (name, r) = fused_model_case();
    assert!(r.checked > 1000, "{name}: only {} coordinates", r.checked);
    assert!(r.max_rel < TOL, "{name}: rel err {} at {:?}", r.max_rel, r.worst);
}
