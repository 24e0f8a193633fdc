//! Shared fixtures for the kernel benchmarks.

use clf_core::expr::Expression;
use clf_core::pinn::NeuralValueFunction;
use clf_core::pmp::TransformSpec;
use clf_core::system::{get_benchmark, ControlAffineSystem, CostSpec};

pub fn reversed_vdp() -> (ControlAffineSystem, CostSpec) {
    get_benchmark("reversed_vdp").expect("benchmark registry")
}

pub fn vdp_drift_expr() -> Expression {
    Expression::parse("-x1 + x2*(1 - x1^2)", 2).expect("valid expression")
}

pub fn paper_sized_net(seed: u64) -> NeuralValueFunction {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    NeuralValueFunction::glorot(&[2, 30, 30, 1], TransformSpec::tanh(0.1), &mut rng)
}
