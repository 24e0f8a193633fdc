use clf_core::pmp::{generate_dataset, DatasetConfig, TransformSpec};
use clf_core::system::get_benchmark;
use std::time::Instant;

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let (sys, cost) = get_benchmark("reversed_vdp").unwrap();
    let config = DatasetConfig {
        n_samples: n,
        t_final: 200.0,
        n_steps: 2000,
        tol: 1e-5,
        domain: vec![[-4.0, 4.0], [-4.0, 4.0]],
        seed: 7,
        transform: TransformSpec::tanh(0.1),
        threads: Some(4),
    };
    let t0 = Instant::now();
    let ds = generate_dataset(&sys, &cost, &config).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "samples {}/{} = {:.1}%  in {:.1}s ({:.0} ms/attempt wall, 4 threads)",
        ds.samples.len(),
        ds.attempts,
        100.0 * ds.success_fraction(),
        dt,
        1000.0 * dt / n as f64
    );
    let wmax = ds.samples.iter().map(|s| s.w0).fold(0.0f64, f64::max);
    let vmax = ds.samples.iter().map(|s| s.v0).fold(0.0f64, f64::max);
    println!("max W = {wmax:.6}, max V = {vmax:.3}");
    let far = ds.samples.iter().filter(|s| (s.x0[0].powi(2) + s.x0[1].powi(2)) > 9.0).count();
    println!("samples with ||x0|| > 3: {far}");
}
