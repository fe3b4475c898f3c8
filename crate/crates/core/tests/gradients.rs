mod common;

use common::*;
use proptest::prelude::*;
use skillmerge_core::model::{Attachment, ToyModel, Trainable};

const TOL: f64 = 1e-6;

#[test]
fn every_op_matches_central_differences() {
    for seed in 0..3 {
        for case in op_cases(seed) {
            let err = check_op(&*case.build, &case.inputs, seed + 100);
            assert!(err <= TOL, "{} (seed {seed}): relative error {err:e}", case.name);
        }
    }
}

#[test]
fn cat_coefficient_gradient_matches_central_differences() {
    let mut model = cat_model(7);
    let err = check_model_grads(&mut model, Trainable::Coefficients, &tiny_batch());
    assert!(err <= TOL, "relative error {err:e}");
}

#[test]
fn lora_factor_gradients_match_central_differences() {
    let base = ToyModel::init(small_config(), 3).unwrap();
    let adapter = loud_adapter(&base, 2, 0.3, 4);
    let mut model = base.with_attachment(Attachment::Adapter(adapter)).unwrap();
    let err = check_model_grads(&mut model, Trainable::Lora, &tiny_batch());
    assert!(err <= TOL, "relative error {err:e}");
}

#[test]
fn router_gradients_match_central_differences() {
    let mut model = moe_model(11);
    let err = check_model_grads(&mut model, Trainable::Routers, &tiny_batch());
    assert!(err <= TOL, "relative error {err:e}");
}

#[test]
fn base_weight_gradients_match_central_differences() {
    let mut model = ToyModel::init(small_config(), 5).unwrap();
    let err = check_model_grads(&mut model, Trainable::Base, &tiny_batch());
    assert!(err <= TOL, "relative error {err:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn op_gradients_hold_on_random_inputs(seed in 0u64..10_000, which in 0usize..17) {
        let case = op_cases(seed).swap_remove(which);
        let err = check_op(&*case.build, &case.inputs, seed ^ 1);
        prop_assert!(err <= TOL, "{}: {err:e}", case.name);
    }
}
