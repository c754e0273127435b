mod common;

use common::gradcheck::{case, worst_over, OPS};

#[test]
fn every_op_matches_finite_differences() {
    for op in OPS {
        let worst = worst_over(op, 100);
        assert!(worst < 1e-4, "{op}: relative error {worst:e}");
    }
}

#[test]
fn matmul_gradient_is_tight() {
    let worst = worst_over("matmul", 100);
    assert!(worst < 1e-6, "matmul relative error {worst:e}");
}

#[test]
fn cross_entropy_gradient_on_4x7_batch() {
    for seed in 0..20 {
        let err = case("softmax_cross_entropy", seed);
        assert!(err < 1e-6, "seed {seed}: {err:e}");
    }
}

#[test]
fn conv_gradients_on_1x2x5x5_input() {
    for seed in 0..20 {
        let err = case("conv2d", seed);
        assert!(err < 1e-6, "seed {seed}: {err:e}");
    }
}
