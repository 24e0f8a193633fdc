use clf_bench::{paper_sized_net, reversed_vdp, vdp_drift_expr};
use clf_core::expr::tape::CompiledTape;
use clf_core::expr::BoxDomain;
use clf_core::pmp::{self, TpbvpConfig, TpbvpProblem};
use clf_core::riccati;
use clf_core::system::get_benchmark;
use clf_core::verify::{self, check_condition, BnbBudget};
use criterion::{black_box, criterion_group, criterion_main, Criterion};

fn bench_expr(c: &mut Criterion) {
    let e = vdp_drift_expr();
    let x = [1.3, -0.7];
    c.bench_function("expr_eval_tree", |b| {
        b.iter(|| e.eval(black_box(&x)).unwrap())
    });

    let tape = CompiledTape::compile(&[e.clone()]);
    let mut scratch = tape.scratch();
    let mut out = [0.0];
    c.bench_function("expr_eval_tape", |b| {
        b.iter(|| {
            tape.eval(black_box(&x), &mut scratch, &mut out).unwrap();
            out[0]
        })
    });

    let domain = BoxDomain::from_bounds(&[(-1.0, 2.0), (-0.5, 0.5)]);
    c.bench_function("expr_eval_interval", |b| {
        b.iter(|| e.eval_interval(black_box(&domain)).unwrap())
    });
}

fn bench_net(c: &mut Criterion) {
    let net = paper_sized_net(7);
    let x = [0.8, -1.1];
    c.bench_function("net_forward_30x30", |b| b.iter(|| net.forward(black_box(&x))));
    c.bench_function("net_value_and_grad_30x30", |b| {
        b.iter(|| net.value_and_grad(black_box(&x)))
    });
    let domain = BoxDomain::from_bounds(&[(0.5, 0.7), (-1.2, -1.0)]);
    c.bench_function("net_interval_value_grad_30x30", |b| {
        b.iter(|| verify::funcs::net_value_grad_interval(black_box(&net), &domain))
    });
}

fn bench_riccati(c: &mut Criterion) {
    let (sys, cost) = get_benchmark("mass_spring_chain(6)").unwrap();
    c.bench_function("riccati_certificate_12d", |b| {
        b.iter(|| riccati::certificate(black_box(&sys), &cost).unwrap())
    });
}

fn bench_tpbvp(c: &mut Criterion) {
    let (sys, cost) = reversed_vdp();
    let cert = riccati::certificate(&sys, &cost).unwrap();
    let problem = TpbvpProblem::new(
        &sys,
        &cost,
        Some(pmp::LqrSeed { gain: cert.k.clone(), p: cert.p.clone() }),
    )
    .unwrap();
    let cfg = TpbvpConfig::new(50.0, 500, 1e-6);
    c.bench_function("tpbvp_reversed_vdp_T50_N500", |b| {
        b.iter(|| pmp::tpbvp::solve(&problem, black_box(&[1.5, -0.5]), &cfg).unwrap())
    });
}

fn bench_bnb(c: &mut Criterion) {
    let (sys, cost) = reversed_vdp();
    let cert = riccati::certificate(&sys, &cost).unwrap();
    let cond = verify::global_clf_condition(
        &sys,
        &cert,
        Some(BoxDomain::from_bounds(&[(-2.0, 2.0), (-2.0, 2.0)])),
        Some(0.5),
    )
    .unwrap();
    c.bench_function("bnb_reversed_vdp_small_box", |b| {
        b.iter(|| check_condition(black_box(&cond), 1e-4, &BnbBudget::default(), 1))
    });
}

criterion_group!(benches, bench_expr, bench_net, bench_riccati, bench_tpbvp, bench_bnb);
criterion_main!(benches);
