use super::*;
use crate::expr::{BoxDomain, Expression};
use crate::pmp::{DatasetConfig, PMPDataset, PMPSample, TransformKind};
use crate::system::ControlAffineSystem;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// xdot = u with q = x^2, R = 1. The optimal value is V = x^2, so the exact
/// transformed solution under tanh(alpha s) is W = tanh(alpha x^2).
fn scalar_control_system() -> (ControlAffineSystem, CostSpec) {
    let f = vec![Expression::zero(1)];
    let g = vec![vec![Expression::constant(1.0, 1)]];
    let sys = ControlAffineSystem::new(
        "integrator",
        f,
        g,
        BoxDomain::from_bounds(&[(-5.0, 5.0)]),
    )
    .unwrap();
    (sys, CostSpec::identity(1, 1))
}

struct ExactScalarW {
    alpha: f64,
}

impl ValueFunction for ExactScalarW {
    fn dim(&self) -> usize {
        1
    }
    fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let w = (self.alpha * x[0] * x[0]).tanh();
        (w, vec![(1.0 - w * w) * 2.0 * self.alpha * x[0]])
    }
}

fn tiny_net(widths: &[usize], seed: u64) -> NeuralValueFunction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NeuralValueFunction::glorot(widths, TransformSpec::tanh(0.1), &mut rng)
}

#[test]
fn zero_weight_network_outputs_final_bias() {
    let mut net = tiny_net(&[2, 4, 1], 0);
    for l in &mut net.layers {
        l.w.fill(0.0);
        l.b.fill(0.0);
    }
    net.layers.last_mut().unwrap().b[0] = 0.75;
    assert_eq!(net.forward(&[1.0, -2.0]), 0.75);
    assert_eq!(net.input_gradient(&[1.0, -2.0]), vec![0.0, 0.0]);
}

#[test]
fn single_tanh_unit_matches_closed_form() {
    // 1 -> 1 -> 1: W1 = [[1]], b1 = 0, tanh, output weight 1, bias 0.
    let mut net = tiny_net(&[1, 1, 1], 0);
    net.layers[0].w[0] = 1.0;
    net.layers[0].b[0] = 0.0;
    net.layers[1].w[0] = 1.0;
    net.layers[1].b[0] = 0.0;
    let y = net.forward(&[0.5]);
    assert!((y - 0.5f64.tanh()).abs() < 1e-15);
    assert!((y - 0.462117).abs() < 1e-6);
    let g = net.input_gradient(&[0.5]);
    let expect = 1.0 - 0.5f64.tanh().powi(2);
    assert!((g[0] - expect).abs() < 1e-15);
    assert!((g[0] - 0.786448).abs() < 1e-6);
}

#[test]
fn serialization_round_trip_is_bit_exact() {
    let net = tiny_net(&[2, 30, 30, 1], 3);
    let json = serde_json::to_string(&net).unwrap();
    assert!(json.contains("\"widths\""));
    assert!(json.contains("\"activation\":\"tanh\""));
    let back: NeuralValueFunction = serde_json::from_str(&json).unwrap();
    assert_eq!(back, net);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let x = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        assert_eq!(net.forward(&x), back.forward(&x));
    }
}

#[test]
fn input_gradient_matches_central_differences() {
    let net = tiny_net(&[3, 8, 8, 1], 5);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..50 {
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let grad = net.input_gradient(&x);
        for i in 0..3 {
            let h = 1e-6;
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi[i] += h;
            lo[i] -= h;
            let fd = (net.forward(&hi) - net.forward(&lo)) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / (1.0 + fd.abs());
            assert!(rel <= 1e-5, "component {i}: {} vs {fd}", grad[i]);
        }
    }
}

#[test]
fn exact_solution_zeroes_the_residual() {
    let (sys, cost) = scalar_control_system();
    let transform = TransformSpec::tanh(0.1);
    let exact = ExactScalarW { alpha: 0.1 };
    for i in 0..100 {
        let x = -3.0 + 6.0 * (i as f64 + 0.5) / 100.0;
        let r = zubov_residual(&sys, &cost, &exact, &transform, &[x]).unwrap();
        assert!(r.abs() <= 1e-10, "residual {r} at x={x}");
    }
}

#[test]
fn residual_vanishes_at_origin_with_flat_function() {
    // With W(0)=0 and DW(0)=0 only the -q(0) psi^2(0) term survives, and
    // q(0)=0, so the residual must be exactly zero.
    struct Flat;
    impl ValueFunction for Flat {
        fn dim(&self) -> usize {
            2
        }
        fn value_grad(&self, _x: &[f64]) -> (f64, Vec<f64>) {
            (0.0, vec![0.0, 0.0])
        }
    }
    let (sys, cost) = crate::system::get_benchmark("reversed_vdp").unwrap();
    let r =
        zubov_residual(&sys, &cost, &Flat, &TransformSpec::tanh(0.1), &[0.0, 0.0]).unwrap();
    assert_eq!(r, 0.0);
}

/// Assemble the residual literally: khat = -1/2 R^-1 g' p, then
/// -p.(f phi + g khat) - khat'R khat - q phi^2, using only forward and
/// input_gradient calls plus matrix evaluations — an independent path from
/// `residual_from_parts`.
fn hand_assembled_residual(
    sys: &ControlAffineSystem,
    cost: &CostSpec,
    net: &NeuralValueFunction,
    x: &[f64],
) -> f64 {
    let w = net.forward(x);
    let p = net.input_gradient(x);
    let f = sys.eval_f(x).unwrap();
    let g = sys.eval_g(x).unwrap();
    let r = cost.eval_r(x).unwrap();
    let r_inv = r.clone().try_inverse().unwrap();
    let pvec = nalgebra::DVector::from_column_slice(&p);
    let khat = -0.5 * &r_inv * g.transpose() * &pvec;
    let phi = (1.0 - w) * net.transform.psi(w);
    let q = cost.q.eval(x).unwrap();
    let term1 = -pvec.dot(&(f * phi + &g * &khat));
    let term2 = -(khat.transpose() * r * &khat)[(0, 0)];
    let term3 = -q * phi * phi;
    term1 + term2 + term3
}

#[test]
fn residual_matches_hand_assembly_on_random_nets() {
    let (sys, cost) = crate::system::get_benchmark("reversed_vdp").unwrap();
    let net = tiny_net(&[2, 10, 10, 1], 23);
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for _ in 0..100 {
        let x = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
        let ours = zubov_residual(&sys, &cost, &net, &net.transform.clone(), &x).unwrap();
        let oracle = hand_assembled_residual(&sys, &cost, &net, &x);
        assert!(
            (ours - oracle).abs() <= 1e-9 * (1.0 + oracle.abs()),
            "{ours} vs {oracle} at {x:?}"
        );
    }
}

/// Same identity, but the second route is assembled through the symbolic
/// expression engine on constant leaves.
#[test]
fn residual_matches_expression_assembly() {
    let (sys, cost) = crate::system::get_benchmark("reversed_vdp").unwrap();
    let net = tiny_net(&[2, 8, 1], 31);
    let c = |v: f64| Expression::constant(v, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    for _ in 0..100 {
        let x = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
        let w = net.forward(&x);
        let p = net.input_gradient(&x);
        let f = sys.eval_f(&x).unwrap();
        let g = sys.eval_g(&x).unwrap();
        let q = cost.q.eval(&x).unwrap();
        // khat (k=1, R=1): -1/2 (g . p)
        let khat = c(-0.5).mul(&c(g[(0, 0)]).mul(&c(p[0])).add(&c(g[(1, 0)]).mul(&c(p[1]))));
        let phi = c(1.0).sub(&c(w)).mul(&c(net.transform.psi(w)));
        let dot = c(p[0])
            .mul(&c(f[0]).mul(&phi).add(&c(g[(0, 0)]).mul(&khat)))
            .add(&c(p[1]).mul(&c(f[1]).mul(&phi).add(&c(g[(1, 0)]).mul(&khat))));
        let expr = dot
            .neg()
            .sub(&khat.mul(&khat))
            .sub(&c(q).mul(&phi.powi(2)));
        let symbolic = expr.eval(&[0.0]).unwrap();
        let ours = zubov_residual(&sys, &cost, &net, &net.transform.clone(), &x).unwrap();
        assert!((ours - symbolic).abs() <= 1e-9 * (1.0 + symbolic.abs()));
    }
}

#[test]
fn loss_composition() {
    let (sys, cost) = scalar_control_system();
    let net = tiny_net(&[1, 6, 1], 41);
    let colloc: Vec<Vec<f64>> = (0..16).map(|i| vec![-2.0 + 0.25 * i as f64]).collect();
    let pure = loss(&sys, &cost, &net, &colloc, &[], &[], 0.0, 0.0).unwrap();
    let mut expect = 0.0;
    for x in &colloc {
        let r = zubov_residual(&sys, &cost, &net, &net.transform.clone(), x).unwrap();
        expect += r * r;
    }
    expect /= colloc.len() as f64;
    assert!((pure - expect).abs() < 1e-15);

    // doubling lambda_d doubles the data contribution exactly
    let data: Vec<(Vec<f64>, f64)> = (0..8).map(|i| (vec![0.3 * i as f64], 0.1)).collect();
    let l1 = loss(&sys, &cost, &net, &colloc, &data, &[], 1.0, 0.0).unwrap();
    let l2 = loss(&sys, &cost, &net, &colloc, &data, &[], 2.0, 0.0).unwrap();
    assert!(((l2 - pure) - 2.0 * (l1 - pure)).abs() < 1e-12);
}

#[test]
fn loss_of_near_exact_network_is_tiny() {
    // Train a small net hard on the exact scalar solution, then check the
    // composite loss against exact data is small; the exact-solution loss
    // bound itself is covered by `exact_solution_zeroes_the_residual`.
    let (sys, cost) = scalar_control_system();
    let exact = ExactScalarW { alpha: 0.1 };
    // exact residual => loss contribution ~ 1e-20; emulate by evaluating the
    // loss formula with the exact function through a 1-point adapter is not
    // possible for a net, so check the formula pieces instead.
    let colloc: Vec<Vec<f64>> = (0..32).map(|i| vec![-2.0 + 0.125 * i as f64]).collect();
    let mut acc: f64 = 0.0;
    for x in &colloc {
        let r = zubov_residual(&sys, &cost, &exact, &TransformSpec::tanh(0.1), x).unwrap();
        acc += r * r;
    }
    assert!(acc / colloc.len() as f64 <= 1e-16);
}

#[test]
fn parameter_gradients_match_central_differences() {
    // Full augmented objective on a 2->4->1 network:
    // sum over points of residual^2 + data error^2.
    let (sys, cost) = crate::system::get_benchmark("reversed_vdp").unwrap();
    let net0 = tiny_net(&[2, 4, 1], 53);
    let transform = net0.transform;
    let pts: Vec<Vec<f64>> = vec![vec![0.8, -1.2], vec![-2.0, 0.5], vec![1.4, 1.1]];
    let data: Vec<(Vec<f64>, f64)> = vec![(vec![0.5, 0.5], 0.2), (vec![-1.0, 2.0], 0.6)];
    let point_data: Vec<PointData> =
        pts.iter().map(|x| PointData::compute(&sys, &cost, x).unwrap()).collect();

    let objective = |net: &NeuralValueFunction| -> f64 {
        let mut acc = 0.0;
        for (x, pd) in pts.iter().zip(&point_data) {
            let (w, grad) = net.value_and_grad(x);
            let r = residual_from_parts(pd, &transform, w, &grad);
            acc += r * r;
        }
        for (x, t) in &data {
            let e = net.forward(x) - t;
            acc += e * e;
        }
        acc
    };

    // analytic gradient
    let mut grads = ParamGrads::zeros_like(&net0);
    let mut scratch = net0.scratch();
    for (x, pd) in pts.iter().zip(&point_data) {
        let w = net0.forward_cached(x, &mut scratch);
        net0.input_gradient_cached(&mut scratch);
        let grad = scratch.grad_input.clone();
        let (r, dr_dw, dr_dgrad) = residual_partials(pd, &transform, w, &grad);
        net0.tangent_forward_cached(&dr_dgrad, &mut scratch);
        net0.accumulate_augmented(2.0 * r * dr_dw, 2.0 * r, &mut scratch, &mut grads);
    }
    for (x, t) in &data {
        let w = net0.forward_cached(x, &mut scratch);
        net0.accumulate_augmented(2.0 * (w - t), 0.0, &mut scratch, &mut grads);
    }

    // finite differences over every parameter
    let h = 1e-6;
    for l in 0..net0.layers.len() {
        for i in 0..net0.layers[l].w.len() {
            let mut plus = net0.clone();
            plus.layers[l].w[i] += h;
            let mut minus = net0.clone();
            minus.layers[l].w[i] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let an = grads.layers[l].w[i];
            assert!(
                (an - fd).abs() <= 1e-5 * (1.0 + fd.abs()),
                "layer {l} w[{i}]: {an} vs {fd}"
            );
        }
        for i in 0..net0.layers[l].b.len() {
            let mut plus = net0.clone();
            plus.layers[l].b[i] += h;
            let mut minus = net0.clone();
            minus.layers[l].b[i] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let an = grads.layers[l].b[i];
            assert!(
                (an - fd).abs() <= 1e-5 * (1.0 + fd.abs()),
                "layer {l} b[{i}]: {an} vs {fd}"
            );
        }
    }
}

fn exact_dataset(alpha: f64, n: usize) -> PMPDataset {
    let samples: Vec<PMPSample> = (0..n)
        .map(|i| {
            let x = -2.0 + 4.0 * i as f64 / (n - 1) as f64;
            let v = x * x;
            PMPSample {
                x0: vec![x],
                v0: v,
                w0: (alpha * v).tanh(),
                newton_iters: 0,
                defect: 0.0,
                quad_residual: 0.0,
            }
        })
        .collect();
    PMPDataset {
        attempts: n,
        samples,
        config: DatasetConfig {
            n_samples: n,
            t_final: 0.0,
            n_steps: 0,
            tol: 0.0,
            domain: vec![[-2.0, 2.0]],
            seed: 0,
            transform: TransformSpec { kind: TransformKind::Tanh, alpha },
            threads: None,
        },
    }
}

#[test]
fn training_recovers_exact_scalar_solution() {
    let (sys, cost) = scalar_control_system();
    let dataset = exact_dataset(0.1, 200);
    let config = TrainConfig {
        collocation_count: 4096,
        data_weight: 1.0,
        boundary_weight: 0.0,
        residual_weight: 1.0,
        epochs: 60,
        batch_size: 32,
        learning_rate: 2e-3,
        seed: 1,
        domain: vec![[-3.0, 3.0]],
        hidden: vec![20, 20],
        transform: TransformSpec::tanh(0.1),
        parallel: false,
    };
    let (net, report) = train(&sys, &cost, &dataset, &config).unwrap();
    assert!(report.final_residual_mse.is_finite());
    let mut sup = 0.0f64;
    for i in 0..=200 {
        let x = -2.0 + 4.0 * i as f64 / 200.0;
        let exact = (0.1 * x * x).tanh();
        sup = sup.max((net.forward(&[x]) - exact).abs());
    }
    assert!(sup <= 1e-2, "sup-norm error {sup}");
}

#[test]
fn training_is_deterministic_for_fixed_seed() {
    let (sys, cost) = scalar_control_system();
    let dataset = exact_dataset(0.1, 50);
    let config = TrainConfig {
        collocation_count: 320,
        data_weight: 1.0,
        boundary_weight: 0.0,
        residual_weight: 1.0,
        epochs: 3,
        batch_size: 32,
        learning_rate: 1e-3,
        seed: 9,
        domain: vec![[-3.0, 3.0]],
        hidden: vec![8, 8],
        transform: TransformSpec::tanh(0.1),
        parallel: false,
    };
    let (a, _) = train(&sys, &cost, &dataset, &config).unwrap();
    let (b, _) = train(&sys, &cost, &dataset, &config).unwrap();
    assert_eq!(a, b, "same seed must give bit-identical weights");
}

#[test]
fn invalid_config_rejected() {
    let (sys, cost) = scalar_control_system();
    let dataset = exact_dataset(0.1, 10);
    let mut config = TrainConfig::paper_defaults(vec![[-1.0, 1.0]]);
    config.collocation_count = 16;
    config.batch_size = 32;
    assert!(matches!(
        train(&sys, &cost, &dataset, &config),
        Err(TrainError::Config(_))
    ));
}
