//! Pontryagin-maximum-principle data generation: the two-point boundary
//! value problem, the value transform, and the sampled dataset feeding
//! neural training.

mod banded;
pub mod tpbvp;

pub use tpbvp::{LqrSeed, TpbvpConfig, TpbvpProblem, TpbvpSolution};

use crate::expr::BoxDomain;
use crate::riccati;
use crate::system::{ControlAffineSystem, CostSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

#[derive(Debug, thiserror::Error)]
pub enum PmpError {
    #[error("Newton iteration diverged after {iters} iterations (residual {residual:.3e})")]
    NewtonDiverged { iters: usize, residual: f64 },
    #[error("evaluation failed: {0}")]
    Eval(String),
    #[error("invalid input: {0}")]
    Domain(String),
    #[error("{0}")]
    Unsupported(String),
    #[error("transform requires a nonnegative value, got {0}")]
    NegativeValue(f64),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset: {0}")]
    Malformed(String),
}

/// Value transform `W = beta(V)` mapping `[0, inf)` into `[0, 1)`.
///
/// Both choices satisfy `betadot = (1 - beta) psi(beta)`: the Kruzkov
/// transform `1 - exp(-alpha s)` with `psi = alpha`, and `tanh(alpha s)`
/// with `psi(s) = alpha (1 + s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Kruzkov,
    Tanh,
}

impl TransformSpec {
    pub fn kruzkov(alpha: f64) -> Self {
        assert!(alpha > 0.0);
        TransformSpec { kind: TransformKind::Kruzkov, alpha }
    }

    pub fn tanh(alpha: f64) -> Self {
        assert!(alpha > 0.0);
        TransformSpec { kind: TransformKind::Tanh, alpha }
    }

    pub fn beta(&self, v: f64) -> f64 {
        match self.kind {
            TransformKind::Kruzkov => 1.0 - (-self.alpha * v).exp(),
            TransformKind::Tanh => (self.alpha * v).tanh(),
        }
    }

    /// `psi(w)` evaluated at a transformed value `w`.
    pub fn psi(&self, w: f64) -> f64 {
        match self.kind {
            TransformKind::Kruzkov => self.alpha,
            TransformKind::Tanh => self.alpha * (1.0 + w),
        }
    }

    /// `phi(w) = (1 - w) psi(w)`, the factor in the transformed gradient.
    pub fn phi(&self, w: f64) -> f64 {
        match self.kind {
            TransformKind::Kruzkov => self.alpha * (1.0 - w),
            TransformKind::Tanh => self.alpha * (1.0 - w * w),
        }
    }

    /// Derivative of `phi` with respect to `w`.
    pub fn phi_prime(&self, w: f64) -> f64 {
        match self.kind {
            TransformKind::Kruzkov => -self.alpha,
            TransformKind::Tanh => -2.0 * self.alpha * w,
        }
    }
}

/// Apply the transform, rejecting negative cost-to-go values.
pub fn beta_transform(v: f64, t: &TransformSpec) -> Result<f64, PmpError> {
    if v < 0.0 {
        return Err(PmpError::NegativeValue(v));
    }
    Ok(t.beta(v))
}

/// Convenience wrapper building the symbolic problem and solving one TPBVP.
pub fn solve_tpbvp(
    sys: &ControlAffineSystem,
    cost: &CostSpec,
    x0: &[f64],
    t_final: f64,
    n_steps: usize,
    tol: f64,
) -> Result<TpbvpSolution, PmpError> {
    let seed = riccati::certificate(sys, cost)
        .ok()
        .map(|c| LqrSeed { gain: c.k, p: c.p });
    let problem = TpbvpProblem::new(sys, cost, seed)?;
    tpbvp::solve(&problem, x0, &TpbvpConfig::new(t_final, n_steps, tol))
}

/// One converged sample: the initial state, its cost-to-go, and the
/// transformed value, plus solver statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PMPSample {
    pub x0: Vec<f64>,
    pub v0: f64,
    pub w0: f64,
    #[serde(default)]
    pub newton_iters: usize,
    #[serde(default)]
    pub defect: f64,
    #[serde(default)]
    pub quad_residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_samples: usize,
    #[serde(rename = "T")]
    pub t_final: f64,
    #[serde(rename = "N")]
    pub n_steps: usize,
    pub tol: f64,
    /// Sampling box, one [lo, hi] pair per dimension.
    pub domain: Vec<[f64; 2]>,
    pub seed: u64,
    pub transform: TransformSpec,
    #[serde(default)]
    pub threads: Option<usize>,
}

impl DatasetConfig {
    pub fn domain_box(&self) -> BoxDomain {
        BoxDomain::from_bounds(&self.domain.iter().map(|b| (b[0], b[1])).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PMPDataset {
    pub samples: Vec<PMPSample>,
    pub attempts: usize,
    pub config: DatasetConfig,
}

impl PMPDataset {
    pub fn success_fraction(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.samples.len() as f64 / self.attempts as f64
        }
    }

    /// Write one JSON record per sample: `{"x": [...], "V": v, "W": w}`.
    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<(), PmpError> {
        for s in &self.samples {
            let rec = serde_json::json!({"x": s.x0, "V": s.v0, "W": s.w0});
            writeln!(w, "{rec}")?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead, config: DatasetConfig) -> Result<Self, PmpError> {
        let mut samples = Vec::new();
        for (ln, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v: serde_json::Value = serde_json::from_str(&line)
                .map_err(|e| PmpError::Malformed(format!("line {}: {e}", ln + 1)))?;
            let x0 = v["x"]
                .as_array()
                .ok_or_else(|| PmpError::Malformed(format!("line {}: missing x", ln + 1)))?
                .iter()
                .map(|e| e.as_f64().unwrap_or(f64::NAN))
                .collect();
            let v0 = v["V"].as_f64().unwrap_or(f64::NAN);
            let w0 = v["W"].as_f64().unwrap_or(f64::NAN);
            samples.push(PMPSample {
                x0,
                v0,
                w0,
                newton_iters: 0,
                defect: 0.0,
                quad_residual: 0.0,
            });
        }
        let attempts = samples.len();
        Ok(PMPDataset { samples, attempts, config })
    }
}

/// Algorithm: sample initial states uniformly, solve the TPBVP for each,
/// keep the converged ones with their transformed values. Sampling is keyed
/// by `(seed, index)` so the dataset is identical for any thread count.
pub fn generate_dataset(
    sys: &ControlAffineSystem,
    cost: &CostSpec,
    config: &DatasetConfig,
) -> Result<PMPDataset, PmpError> {
    let domain = config.domain_box();
    if !sys.domain.contains_box(&domain) {
        return Err(PmpError::Domain(
            "data domain must lie inside the system domain".into(),
        ));
    }
    let lqr = riccati::certificate(sys, cost)
        .ok()
        .map(|c| LqrSeed { gain: c.k, p: c.p });
    let problem = TpbvpProblem::new(sys, cost, lqr)?;
    let tp_cfg = TpbvpConfig::new(config.t_final, config.n_steps, config.tol);

    let solve_one = |idx: usize| -> Option<PMPSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1 + idx as u64);
        let x0 = domain.sample(&mut rng);
        let sol = tpbvp::solve(&problem, &x0, &tp_cfg).ok()?;
        let v0 = sol.v[0];
        if !v0.is_finite() || v0 < 0.0 {
            return None;
        }
        let w0 = config.transform.beta(v0);
        let origin = x0.iter().all(|&c| c == 0.0);
        // Stored values must be strictly inside (0, 1) away from the origin.
        if !origin && (w0 <= 0.0 || w0 >= 1.0) {
            return None;
        }
        Some(PMPSample {
            x0,
            v0,
            w0,
            newton_iters: sol.newton_iters,
            defect: sol.defect,
            quad_residual: sol.quad_residual,
        })
    };

    let results: Vec<Option<PMPSample>> = match config.threads {
        Some(1) => (0..config.n_samples).map(solve_one).collect(),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| PmpError::Domain(e.to_string()))?;
            pool.install(|| (0..config.n_samples).into_par_iter().map(solve_one).collect())
        }
        None => (0..config.n_samples).into_par_iter().map(solve_one).collect(),
    };
    let samples: Vec<PMPSample> = results.into_iter().flatten().collect();
    Ok(PMPDataset { samples, attempts: config.n_samples, config: config.clone() })
}
