//! Physics-informed training of the neural value function.
//!
//! Collocation points are drawn once before training. Per step the loss is
//! the mean-square Zubov-HJB residual over a collocation minibatch, plus the
//! weighted mean-square data error over a minibatch of PMP samples. Adam
//! with fixed hyperparameters, single-threaded and bit-deterministic for a
//! fixed seed (an opt-in parallel mode reduces batch gradients in
//! nondeterministic order).

use super::{NeuralValueFunction, ParamGrads, PointData};
use crate::expr::BoxDomain;
use crate::pmp::{PMPDataset, TransformSpec};
use crate::system::{ControlAffineSystem, CostSpec};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged (non-finite loss) at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("system error: {0}")]
    System(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Number of interior collocation points, sampled once.
    pub collocation_count: usize,
    pub data_weight: f64,
    pub boundary_weight: f64,
    /// Weight on the PDE residual term; zero gives data-only training.
    pub residual_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Collocation domain, one [lo, hi] per dimension.
    pub domain: Vec<[f64; 2]>,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    pub transform: TransformSpec,
    /// Reduce batch gradients in parallel (nondeterministic accumulation
    /// order; off by default).
    #[serde(default)]
    pub parallel: bool,
}

impl TrainConfig {
    /// The setup used for the two-dimensional studies: 30-30 tanh net,
    /// 300k collocation points, 20 epochs of batch 32, tanh transform.
    pub fn paper_defaults(domain: Vec<[f64; 2]>) -> Self {
        TrainConfig {
            collocation_count: 300_000,
            data_weight: 1.0,
            boundary_weight: 0.0,
            residual_weight: 1.0,
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            domain,
            hidden: vec![30, 30],
            transform: TransformSpec::tanh(0.1),
            parallel: false,
        }
    }

    fn validate(&self, n_data: usize) -> Result<(), TrainError> {
        if self.collocation_count > 0 && self.collocation_count < self.batch_size {
            return Err(TrainError::Config("collocation count below batch size".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if self.data_weight < 0.0 || self.boundary_weight < 0.0 || self.residual_weight < 0.0 {
            return Err(TrainError::Config("weights must be nonnegative".into()));
        }
        if self.residual_weight == 0.0 && (n_data == 0 || self.data_weight == 0.0) {
            return Err(TrainError::Config(
                "nothing to train on: residual weight is zero and no data term".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LossRow {
    pub epoch: usize,
    pub step: usize,
    pub residual: f64,
    pub data: f64,
    pub boundary: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<LossRow>,
    /// Mean-square residual over the full collocation set after training.
    pub final_residual_mse: f64,
    pub steps: usize,
}

impl TrainReport {
    pub fn write_history_csv(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "epoch,step,residual,data,boundary,total")?;
        for r in &self.history {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.epoch, r.step, r.residual, r.data, r.boundary, r.total
            )?;
        }
        Ok(())
    }
}

struct Adam {
    m: ParamGrads,
    v: ParamGrads,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(net: &NeuralValueFunction) -> Self {
        Adam {
            m: ParamGrads::zeros_like(net),
            v: ParamGrads::zeros_like(net),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn step(&mut self, net: &mut NeuralValueFunction, grads: &ParamGrads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let g = &grads.layers[l];
            let m = &mut self.m.layers[l];
            let v = &mut self.v.layers[l];
            for i in 0..layer.w.len() {
                m.w[i] = self.beta1 * m.w[i] + (1.0 - self.beta1) * g.w[i];
                v.w[i] = self.beta2 * v.w[i] + (1.0 - self.beta2) * g.w[i] * g.w[i];
                layer.w[i] -= lr * (m.w[i] / bc1) / ((v.w[i] / bc2).sqrt() + self.eps);
            }
            for i in 0..layer.b.len() {
                m.b[i] = self.beta1 * m.b[i] + (1.0 - self.beta1) * g.b[i];
                v.b[i] = self.beta2 * v.b[i] + (1.0 - self.beta2) * g.b[i] * g.b[i];
                layer.b[i] -= lr * (m.b[i] / bc1) / ((v.b[i] / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Per-point contribution of the collocation term: returns the squared
/// residual and accumulates parameter gradients of `residual^2 / batch`.
fn collocation_backward(
    net: &NeuralValueFunction,
    transform: &TransformSpec,
    x: &[f64],
    data: &PointData,
    scale: f64,
    scratch: &mut super::NetScratch,
    grads: &mut ParamGrads,
) -> f64 {
    let w = net.forward_cached(x, scratch);
    net.input_gradient_cached(scratch);
    let grad = scratch.grad_input.clone();
    let (r, dr_dw, dr_dgrad) = super::residual_partials(data, transform, w, &grad);
    // d(r^2)/dtheta = 2 r (dr/dW dW/dtheta + dr/dDW . dDW/dtheta)
    let tangent_dot = net.tangent_forward_cached(&dr_dgrad, scratch);
    debug_assert!(tangent_dot.is_finite() || !r.is_finite());
    net.accumulate_augmented(2.0 * r * dr_dw * scale, 2.0 * r * scale, scratch, grads);
    r * r
}

fn data_backward(
    net: &NeuralValueFunction,
    x: &[f64],
    target: f64,
    scale: f64,
    scratch: &mut super::NetScratch,
    grads: &mut ParamGrads,
) -> f64 {
    let w = net.forward_cached(x, scratch);
    let e = w - target;
    net.accumulate_augmented(2.0 * e * scale, 0.0, scratch, grads);
    e * e
}

/// Train a fresh network on the Zubov-HJB residual plus PMP data.
pub fn train(
    sys: &ControlAffineSystem,
    cost: &CostSpec,
    dataset: &PMPDataset,
    config: &TrainConfig,
) -> Result<(NeuralValueFunction, TrainReport), TrainError> {
    config.validate(dataset.samples.len())?;
    let n = sys.n;
    let domain = BoxDomain::from_bounds(
        &config.domain.iter().map(|b| (b[0], b[1])).collect::<Vec<_>>(),
    );
    if domain.dim() != n {
        return Err(TrainError::Config("collocation domain dimension mismatch".into()));
    }

    let mut widths = vec![n];
    widths.extend_from_slice(&config.hidden);
    widths.push(1);
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = NeuralValueFunction::glorot(&widths, config.transform, &mut init_rng);

    // Collocation points and their dynamics data, fixed for all epochs.
    let mut colloc_rng = ChaCha8Rng::seed_from_u64(config.seed);
    colloc_rng.set_stream(u64::MAX); // distinct from PMP sample streams
    let use_pde = config.residual_weight > 0.0 && config.collocation_count > 0;
    let (points, point_data) = if use_pde {
        let pts: Vec<Vec<f64>> =
            (0..config.collocation_count).map(|_| domain.sample(&mut colloc_rng)).collect();
        let data: Result<Vec<PointData>, _> = pts
            .par_iter()
            .map(|x| PointData::compute(sys, cost, x).map_err(|e| e.to_string()))
            .collect();
        let data = data.map_err(TrainError::System)?;
        (pts, data)
    } else {
        (Vec::new(), Vec::new())
    };

    let data_pairs: Vec<(Vec<f64>, f64)> =
        dataset.samples.iter().map(|s| (s.x0.clone(), s.w0)).collect();
    let use_data = config.data_weight > 0.0 && !data_pairs.is_empty();

    let steps_per_epoch = if use_pde {
        points.len() / config.batch_size
    } else {
        (data_pairs.len() / config.batch_size).max(1)
    };
    let data_batch = config.batch_size.min(data_pairs.len().max(1));

    let mut adam = Adam::new(&net);
    let mut grads = ParamGrads::zeros_like(&net);
    let mut scratch = net.scratch();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(u64::MAX - 1);

    let mut colloc_order: Vec<usize> = (0..points.len()).collect();
    let mut data_order: Vec<usize> = (0..data_pairs.len()).collect();
    let mut data_cursor = 0usize;

    let mut history = Vec::new();
    let mut total_steps = 0usize;
    let log_every = 100;

    for epoch in 0..config.epochs {
        colloc_order.shuffle(&mut shuffle_rng);
        data_order.shuffle(&mut shuffle_rng);
        for step in 0..steps_per_epoch {
            grads.clear();
            let mut residual_mse = 0.0;
            let mut data_mse = 0.0;

            if use_pde {
                let batch = &colloc_order[step * config.batch_size..(step + 1) * config.batch_size];
                let scale = config.residual_weight / config.batch_size as f64;
                if config.parallel {
                    let (sum, partial): (f64, ParamGrads) = batch
                        .par_iter()
                        .map(|&idx| {
                            let mut local = ParamGrads::zeros_like(&net);
                            let mut sc = net.scratch();
                            let r2 = collocation_backward(
                                &net,
                                &config.transform,
                                &points[idx],
                                &point_data[idx],
                                scale,
                                &mut sc,
                                &mut local,
                            );
                            (r2, local)
                        })
                        .reduce(
                            || (0.0, ParamGrads::zeros_like(&net)),
                            |(ra, mut ga), (rb, gb)| {
                                for (la, lb) in ga.layers.iter_mut().zip(&gb.layers) {
                                    for (a, b) in la.w.iter_mut().zip(&lb.w) {
                                        *a += b;
                                    }
                                    for (a, b) in la.b.iter_mut().zip(&lb.b) {
                                        *a += b;
                                    }
                                }
                                (ra + rb, ga)
                            },
                        );
                    for (la, lb) in grads.layers.iter_mut().zip(&partial.layers) {
                        for (a, b) in la.w.iter_mut().zip(&lb.w) {
                            *a += b;
                        }
                        for (a, b) in la.b.iter_mut().zip(&lb.b) {
                            *a += b;
                        }
                    }
                    residual_mse = sum / config.batch_size as f64;
                } else {
                    for &idx in batch {
                        residual_mse += collocation_backward(
                            &net,
                            &config.transform,
                            &points[idx],
                            &point_data[idx],
                            scale,
                            &mut scratch,
                            &mut grads,
                        );
                    }
                    residual_mse /= config.batch_size as f64;
                }
            }

            if use_data {
                let scale = config.data_weight / data_batch as f64;
                for _ in 0..data_batch {
                    if data_cursor == data_order.len() {
                        data_order.shuffle(&mut shuffle_rng);
                        data_cursor = 0;
                    }
                    let (x, target) = &data_pairs[data_order[data_cursor]];
                    data_cursor += 1;
                    data_mse += data_backward(&net, x, *target, scale, &mut scratch, &mut grads);
                }
                data_mse /= data_batch as f64;
            }

            let total = config.residual_weight * residual_mse + config.data_weight * data_mse;
            if !total.is_finite() {
                return Err(TrainError::Diverged { epoch, step });
            }
            adam.step(&mut net, &grads, config.learning_rate);
            total_steps += 1;

            if step % log_every == 0 || step + 1 == steps_per_epoch {
                history.push(LossRow {
                    epoch,
                    step,
                    residual: residual_mse,
                    data: data_mse,
                    boundary: 0.0,
                    total,
                });
            }
        }
    }

    // Full-set residual after training.
    let final_residual_mse = if use_pde {
        let acc: f64 = points
            .par_iter()
            .zip(&point_data)
            .map(|(x, pd)| {
                let (w, grad) = net.value_and_grad(x);
                let r = super::residual_from_parts(pd, &config.transform, w, &grad);
                r * r
            })
            .sum();
        acc / points.len() as f64
    } else {
        f64::NAN
    };

    Ok((net, TrainReport { history, final_residual_mse, steps: total_steps }))
}
