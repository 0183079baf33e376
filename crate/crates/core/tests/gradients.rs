//! Central finite-difference checks for every tape operation and the full model.

mod common;

use common::gradcheck::{case_error, model_cases, model_error, multi_head_attention_errors, op_cases, FD_TOL};

#[test]
fn every_tape_operation() {
    for (i, c) in op_cases().iter().enumerate() {
        let worst = case_error(c, i as u64 + 1);
        assert!(worst < FD_TOL, "{}: worst relative error {worst:e}", c.name);
    }
}

#[test]
fn multi_head_attention() {
    let (inputs, params) = multi_head_attention_errors(24);
    assert!(inputs < FD_TOL, "inputs: {inputs:e}");
    assert!(params < FD_TOL, "parameters: {params:e}");
}

#[test]
fn full_model() {
    for (i, (name, model, data)) in model_cases().into_iter().enumerate() {
        let worst = model_error(model, data, 31 + i as u64);
        assert!(worst < FD_TOL, "{name}: worst relative error {worst:e}");
    }
}
