//! End-to-end reproduction harness: quadratic certificate, PMP data,
//! training, verification, and simulation, with every artifact written to a
//! run directory as plain files.
//!
//! Layout: `report.json`, `dataset.jsonl` (+ `dataset_config.json`),
//! `model.json`, `loss_history.csv`, `verify/*.json`, `grids/*.csv`,
//! `traj/*.csv`, `cost_comparison.json`, and `*.smt2` queries. Schemas are
//! documented in `docs/formats.md`.

use crate::controlsim::{self, Controller, NeuralHjbController, SimOptions};
use crate::expr::BoxDomain;
use crate::pinn::{self, NeuralValueFunction, TrainConfig};
use crate::pmp::{self, DatasetConfig, PMPDataset, TransformSpec};
use crate::riccati;
use crate::system::{self, ControlAffineSystem, CostSpec, SystemConfig};
use crate::verify::{
    self, emit_smtlib, BnbBudget, ValueModel,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("stage '{stage}' failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn stage_err(stage: &'static str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage { stage, message: e.to_string() }
}

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io { path: path.display().to_string(), source }
}

/// Full run configuration. Parses from a single JSON file; every leaf has a
/// default, so partial configs work.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub benchmark: Option<String>,
    /// Path to a custom system JSON (mutually exclusive with `benchmark`).
    pub system_config: Option<String>,
    pub transform: TransformSpec,
    pub pmp: PmpParams,
    pub train: TrainParams,
    pub verify: VerifyParams,
    pub simulate: SimParams,
    pub seed: u64,
    pub out_dir: String,
    pub backend: Backend,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            benchmark: None,
            system_config: None,
            transform: TransformSpec::tanh(0.1),
            pmp: PmpParams::default(),
            train: TrainParams::default(),
            verify: VerifyParams::default(),
            simulate: SimParams::default(),
            seed: 0,
            out_dir: "runs/out".into(),
            backend: Backend::Native,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Native,
    Smtlib,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PmpParams {
    #[serde(rename = "T")]
    pub t_final: f64,
    #[serde(rename = "N")]
    pub n_steps: usize,
    pub tol: f64,
    pub n_samples: usize,
    /// Data-generation box; defaults to the benchmark's data domain or the
    /// system domain.
    pub domain: Option<Vec<[f64; 2]>>,
}

impl Default for PmpParams {
    fn default() -> Self {
        PmpParams { t_final: 200.0, n_steps: 2000, tol: 1e-5, n_samples: 3000, domain: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainParams {
    pub collocation_count: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub data_weight: f64,
    pub boundary_weight: f64,
    pub residual_weight: f64,
    pub hidden: Vec<usize>,
    /// Collocation domain; defaults to the system domain.
    pub domain: Option<Vec<[f64; 2]>>,
    pub parallel: bool,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            collocation_count: 300_000,
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            data_weight: 1.0,
            boundary_weight: 0.0,
            residual_weight: 1.0,
            hidden: vec![30, 30],
            domain: None,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct VerifyParams {
    /// Defaults by dimension when absent.
    pub delta: Option<f64>,
    pub c_max: Option<f64>,
    pub max_boxes: u64,
    pub max_frontier: usize,
    pub min_width: f64,
}

impl Default for VerifyParams {
    fn default() -> Self {
        let b = BnbBudget::default();
        VerifyParams {
            delta: None,
            c_max: None,
            max_boxes: b.max_boxes,
            max_frontier: b.max_frontier,
            min_width: b.min_width,
        }
    }
}

impl VerifyParams {
    pub fn budget(&self) -> BnbBudget {
        BnbBudget {
            max_boxes: self.max_boxes,
            max_frontier: self.max_frontier,
            min_width: self.min_width,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SimParams {
    pub x0: Vec<Vec<f64>>,
    #[serde(rename = "T")]
    pub t_final: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams { x0: vec![vec![-8.0 / 3.0, -8.0 / 3.0]], t_final: 30.0 }
    }
}

impl RunConfig {
    pub fn resolve_system(&self) -> Result<(ControlAffineSystem, CostSpec), PipelineError> {
        match (&self.benchmark, &self.system_config) {
            (Some(name), None) => {
                system::get_benchmark(name).map_err(|e| PipelineError::Config(e.to_string()))
            }
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| io_err(Path::new(path), e))?;
                let cfg: SystemConfig = serde_json::from_str(&text)
                    .map_err(|e| PipelineError::Config(e.to_string()))?;
                cfg.build().map_err(|e| PipelineError::Config(e.to_string()))
            }
            (Some(_), Some(_)) => Err(PipelineError::Config(
                "give either a benchmark or a system config, not both".into(),
            )),
            (None, None) => Err(PipelineError::Config(
                "no system: set `benchmark` or `system_config`".into(),
            )),
        }
    }

    pub fn effective_threads(&self) -> usize {
        self.threads
            .or_else(|| {
                std::env::var("ZUBOV_CLF_THREADS").ok().and_then(|v| v.parse().ok())
            })
            .unwrap_or_else(|| {
                std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
            })
    }
}

/// Summary of one pipeline run; every verified level in here was produced
/// by a `proved` verdict.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PipelineReport {
    pub benchmark: String,
    pub seed: u64,
    pub certificate: CertSummary,
    pub global_clf: String,
    pub dataset: DatasetSummary,
    pub training: TrainingSummary,
    pub verification: VerificationSummary,
    pub cost_comparison: Vec<CostComparison>,
    /// Wall-clock milliseconds per stage; excluded from determinism checks.
    pub timings_ms: std::collections::BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CertSummary {
    pub residual: f64,
    pub c_p1: f64,
    pub c_p: f64,
    pub origin_radius: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetSummary {
    pub attempts: usize,
    pub converged: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainingSummary {
    pub steps: usize,
    pub final_residual_mse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VerificationSummary {
    pub c1: f64,
    pub c2: Option<f64>,
    pub roa_c: Option<f64>,
    pub area_ratio_mc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CostComparison {
    pub x0: Vec<f64>,
    #[serde(rename = "J_sontag")]
    pub j_sontag: f64,
    #[serde(rename = "J_hjb")]
    pub j_hjb: f64,
    #[serde(rename = "T")]
    pub t_final: f64,
}

fn write_file(path: &Path, contents: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    text.push('\n');
    write_file(path, &text)
}

/// Try an external SMT solver on an emitted query; best-effort, returns
/// the solver name and its answer when one is installed.
pub fn try_external_solver(smt_path: &Path, timeout_s: u64) -> Option<(String, String)> {
    for solver in ["z3", "cvc5"] {
        let probe = std::process::Command::new(solver)
            .arg("--version")
            .stdout(std::process::Stdio::null())
            .stderr(std::process::Stdio::null())
            .status();
        if probe.map(|s| s.success()).unwrap_or(false) {
            let mut cmd = std::process::Command::new(solver);
            if solver == "z3" {
                cmd.arg(format!("-T:{timeout_s}"));
            } else {
                cmd.arg(format!("--tlimit={}", timeout_s * 1000));
            }
            let out = cmd.arg(smt_path).output().ok()?;
            let answer = String::from_utf8_lossy(&out.stdout).trim().to_string();
            return Some((solver.to_string(), answer));
        }
    }
    None
}

/// Run every stage, writing artifacts under `config.out_dir`.
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineReport, PipelineError> {
    let out = PathBuf::from(&config.out_dir);
    std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    write_json(&out.join("config.json"), config)?;

    let (sys, cost) = config.resolve_system()?;
    let threads = config.effective_threads();
    let delta = config.verify.delta.unwrap_or_else(|| verify::default_delta(sys.n));
    let budget = config.verify.budget();
    let mut timings = std::collections::BTreeMap::new();

    // Stage: quadratic certificate.
    let t0 = Instant::now();
    let cert = riccati::certificate(&sys, &cost).map_err(|e| stage_err("qclf", e))?;
    let quad = verify::verify_quadratic(&sys, &cert, config.verify.c_max, delta, &budget, threads)
        .map_err(|e| stage_err("qclf", e))?;
    write_json(&out.join("certificate.json"), &quad.cert)?;
    timings.insert("qclf".to_string(), t0.elapsed().as_millis() as u64);

    // Global CLF query (SMT), native bounded check as fallback indicator.
    let t0 = Instant::now();
    let global_clf = {
        let cond = verify::global_clf_condition(&sys, &quad.cert, None, None)
            .map_err(|e| stage_err("qclf", e))?;
        match emit_smtlib(&cond, "QF_NRA") {
            Ok(query) => {
                let smt_path = out.join(format!("{}_global_clf.smt2", sys.name_slug()));
                write_file(&smt_path, &query)?;
                if config.backend == Backend::Smtlib {
                    match try_external_solver(&smt_path, 60) {
                        Some((solver, answer)) if answer == "unsat" => {
                            format!("proved (external {solver})")
                        }
                        Some((solver, answer)) => format!("{answer} (external {solver})"),
                        None => "emitted (no external solver found)".to_string(),
                    }
                } else {
                    "emitted".to_string()
                }
            }
            Err(e) => format!("not emitted: {e}"),
        }
    };
    timings.insert("smtlib".to_string(), t0.elapsed().as_millis() as u64);

    // Stage: PMP dataset.
    let t0 = Instant::now();
    let data_domain = config
        .pmp
        .domain
        .clone()
        .or_else(|| {
            system::default_data_domain(&sys.name).map(|b| {
                b.intervals().iter().map(|iv| [iv.lo, iv.hi]).collect()
            })
        })
        .unwrap_or_else(|| {
            sys.domain.intervals().iter().map(|iv| [iv.lo, iv.hi]).collect()
        });
    let ds_config = DatasetConfig {
        n_samples: config.pmp.n_samples,
        t_final: config.pmp.t_final,
        n_steps: config.pmp.n_steps,
        tol: config.pmp.tol,
        domain: data_domain,
        seed: config.seed,
        transform: config.transform,
        threads: Some(threads),
    };
    let dataset =
        pmp::generate_dataset(&sys, &cost, &ds_config).map_err(|e| stage_err("pmp-data", e))?;
    {
        let mut buf = Vec::new();
        dataset.write_jsonl(&mut buf).map_err(|e| stage_err("pmp-data", e))?;
        write_file(&out.join("dataset.jsonl"), &String::from_utf8_lossy(&buf))?;
        write_json(&out.join("dataset_config.json"), &ds_config)?;
    }
    timings.insert("pmp-data".to_string(), t0.elapsed().as_millis() as u64);

    // Stage: training.
    let t0 = Instant::now();
    let train_domain = config.train.domain.clone().unwrap_or_else(|| {
        sys.domain.intervals().iter().map(|iv| [iv.lo, iv.hi]).collect()
    });
    let train_config = TrainConfig {
        collocation_count: config.train.collocation_count,
        data_weight: config.train.data_weight,
        boundary_weight: config.train.boundary_weight,
        residual_weight: config.train.residual_weight,
        epochs: config.train.epochs,
        batch_size: config.train.batch_size,
        learning_rate: config.train.learning_rate,
        seed: config.seed,
        domain: train_domain,
        hidden: config.train.hidden.clone(),
        transform: config.transform,
        parallel: config.train.parallel,
    };
    let (net, train_report) =
        pinn::train(&sys, &cost, &dataset, &train_config).map_err(|e| stage_err("train", e))?;
    write_json(&out.join("model.json"), &net)?;
    {
        let mut buf = Vec::new();
        train_report
            .write_history_csv(&mut buf)
            .map_err(|e| stage_err("train", e))?;
        write_file(&out.join("loss_history.csv"), &String::from_utf8_lossy(&buf))?;
    }
    timings.insert("train".to_string(), t0.elapsed().as_millis() as u64);

    // Stage: verification.
    let t0 = Instant::now();
    let model = Arc::new(ValueModel::from_net(net.clone()));
    let neural =
        verify::verify_neural(&sys, &model, &quad.cert, config.verify.c_max, delta, &budget, threads)
            .map_err(|e| stage_err("verify", e))?;
    write_json(
        &out.join("verify/quadratic.json"),
        &serde_json::json!({
            "condition": format!("quadratic_clf_{}", sys.name),
            "verdict": "proved",
            "c_P1": quad.cert.c_p1,
            "c_P": quad.cert.c_p,
            "origin_radius": quad.origin_radius,
            "delta": delta,
            "boxes": quad.stats.boxes_total,
        }),
    )?;
    write_json(
        &out.join("verify/neural.json"),
        &serde_json::json!({
            "condition": format!("neural_clf_{}", sys.name),
            "verdict": if neural.c2.is_some() { "proved" } else { "containment only" },
            "c1": neural.c1,
            "c2": neural.c2,
            "c_max": neural.c_max,
            "delta": delta,
            "boxes": neural.stats.boxes_total,
        }),
    )?;
    let roa = verify::verify_closed_loop_roa(
        &sys,
        &cost,
        &model,
        config.transform,
        &quad.cert,
        delta,
        &budget,
        threads,
    );
    let roa_c = match &roa {
        Ok(r) => {
            write_json(
                &out.join("verify/roa.json"),
                &serde_json::json!({
                    "condition": format!("closed_loop_roa_{}", sys.name),
                    "verdict": "proved",
                    "c": r.c,
                    "ball_radius": r.ball_radius,
                    "c_quadratic": r.c_quadratic,
                    "c_inner": r.c_inner,
                    "delta": delta,
                    "boxes": r.stats.boxes_total,
                }),
            )?;
            Some(r.c)
        }
        Err(e) => {
            write_json(
                &out.join("verify/roa.json"),
                &serde_json::json!({
                    "condition": format!("closed_loop_roa_{}", sys.name),
                    "verdict": format!("failed: {e}"),
                }),
            )?;
            None
        }
    };
    timings.insert("verify".to_string(), t0.elapsed().as_millis() as u64);

    // Monte-Carlo area ratio of the two verified regions.
    let area_ratio_mc = neural.c2.map(|c2| {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed ^ 0xA5EA);
        let mut in_w = 0u64;
        let mut in_v = 0u64;
        let total = 200_000;
        for _ in 0..total {
            let x = sys.domain.sample(&mut rng);
            if net.forward(&x) <= c2 {
                in_w += 1;
            }
            let mut v = 0.0;
            for i in 0..sys.n {
                for j in 0..sys.n {
                    v += quad.cert.p[(i, j)] * x[i] * x[j];
                }
            }
            if v <= quad.cert.c_p {
                in_v += 1;
            }
        }
        in_w as f64 / in_v.max(1) as f64
    });

    // Stage: simulation and cost comparison.
    let t0 = Instant::now();
    let mut comparisons = Vec::new();
    let r_diag_ok = cost.constant_diagonal_r().is_some();
    for (idx, x0) in config.simulate.x0.iter().enumerate() {
        if x0.len() != sys.n || !r_diag_ok {
            continue;
        }
        let hjb = NeuralHjbController::new(&sys, &cost, &net, config.transform, true)
            .map_err(|e| stage_err("simulate", e))?;
        let opts = SimOptions::new(config.simulate.t_final);
        let hjb_traj =
            controlsim::simulate(&sys, &cost, &Controller::NeuralHjb(hjb), x0, &opts)
                .map_err(|e| stage_err("simulate", e))?;
        let net_ref = &net;
        let sontag = Controller::Sontag {
            grad_v: Box::new(move |x: &[f64]| net_ref.input_gradient(x)),
        };
        let sontag_traj = controlsim::simulate(&sys, &cost, &sontag, x0, &opts)
            .map_err(|e| stage_err("simulate", e))?;
        for (name, traj) in [("hjb", &hjb_traj), ("sontag", &sontag_traj)] {
            let mut buf = Vec::new();
            traj.write_csv(&mut buf).map_err(|e| stage_err("simulate", e))?;
            write_file(
                &out.join(format!("traj/{name}_{idx}.csv")),
                &String::from_utf8_lossy(&buf),
            )?;
        }
        comparisons.push(CostComparison {
            x0: x0.clone(),
            j_sontag: sontag_traj.accumulated_cost(),
            j_hjb: hjb_traj.accumulated_cost(),
            t_final: config.simulate.t_final,
        });
    }
    write_json(&out.join("cost_comparison.json"), &comparisons)?;
    timings.insert("simulate".to_string(), t0.elapsed().as_millis() as u64);

    // Level-set grids behind the figures.
    let t0 = Instant::now();
    if sys.n == 2 {
        let p = quad.cert.p.clone();
        export_levelset_grid(
            &out.join("grids/quadratic.csv"),
            &|x| {
                let mut v = 0.0;
                for i in 0..2 {
                    for j in 0..2 {
                        v += p[(i, j)] * x[i] * x[j];
                    }
                }
                v
            },
            &sys.domain,
            200,
            &[quad.cert.c_p1, quad.cert.c_p],
        )?;
        let mut levels = vec![neural.c1];
        levels.extend(neural.c2);
        levels.extend(roa_c);
        export_levelset_grid(
            &out.join("grids/neural.csv"),
            &|x| net.forward(x),
            &sys.domain,
            200,
            &levels,
        )?;
    }
    timings.insert("grids".to_string(), t0.elapsed().as_millis() as u64);

    let report = PipelineReport {
        benchmark: sys.name.clone(),
        seed: config.seed,
        certificate: CertSummary {
            residual: quad.cert.residual_norm,
            c_p1: quad.cert.c_p1,
            c_p: quad.cert.c_p,
            origin_radius: quad.origin_radius,
        },
        global_clf,
        dataset: DatasetSummary {
            attempts: dataset.attempts,
            converged: dataset.samples.len(),
        },
        training: TrainingSummary {
            steps: train_report.steps,
            final_residual_mse: train_report.final_residual_mse,
        },
        verification: VerificationSummary {
            c1: neural.c1,
            c2: neural.c2,
            roa_c,
            area_ratio_mc,
        },
        cost_comparison: comparisons,
        timings_ms: timings,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

impl ControlAffineSystem {
    /// Benchmark name with characters safe for file names.
    pub fn name_slug(&self) -> String {
        self.name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
            .collect()
    }
}

/// Write a 2-d scalar field on a regular grid as CSV plus a JSON sidecar
/// with the contour levels.
pub fn export_levelset_grid(
    path: &Path,
    f: &dyn Fn(&[f64]) -> f64,
    domain: &BoxDomain,
    resolution: usize,
    levels: &[f64],
) -> Result<(), PipelineError> {
    if domain.dim() != 2 {
        return Err(PipelineError::Config(
            "level-set grids are only emitted for two-dimensional systems".into(),
        ));
    }
    if resolution < 2 {
        return Err(PipelineError::Config("resolution must be at least 2".into()));
    }
    let mut text = String::from("x1,x2,value\n");
    let (dx, dy) = (domain.interval(0), domain.interval(1));
    for i in 0..resolution {
        let x = dx.lo + (dx.hi - dx.lo) * i as f64 / (resolution - 1) as f64;
        for j in 0..resolution {
            let y = dy.lo + (dy.hi - dy.lo) * j as f64 / (resolution - 1) as f64;
            let v = f(&[x, y]);
            text.push_str(&format!("{x},{y},{v}\n"));
        }
    }
    write_file(path, &text)?;
    let meta_path = path.with_extension("json");
    write_json(
        &meta_path,
        &serde_json::json!({
            "domain": domain.intervals().iter().map(|iv| [iv.lo, iv.hi]).collect::<Vec<_>>(),
            "resolution": resolution,
            "levels": levels,
        }),
    )?;
    Ok(())
}

/// Emit the four global-CLF SMT queries of the paper-style studies into a
/// directory; returns (system name, file path) pairs.
pub fn emit_global_queries(dir: &Path) -> Result<Vec<(String, PathBuf)>, PipelineError> {
    let mut out = Vec::new();
    for name in ["vdp_input", "mass_spring_4d", "pendulum", "mass_spring_chain(6)"] {
        let (sys, cost) = system::get_benchmark(name).map_err(|e| stage_err("smtlib", e))?;
        let cert = riccati::certificate(&sys, &cost).map_err(|e| stage_err("smtlib", e))?;
        let cond = verify::global_clf_condition(&sys, &cert, None, None)
            .map_err(|e| stage_err("smtlib", e))?;
        let query = emit_smtlib(&cond, "QF_NRA").map_err(|e| stage_err("smtlib", e))?;
        let path = dir.join(format!("{}_global_clf.smt2", sys.name_slug()));
        write_file(&path, &query)?;
        out.push((sys.name.clone(), path));
    }
    Ok(out)
}

/// Data-only versus physics-informed ablation: train both variants and
/// evaluate the mean |Zubov-HJB residual| on an extrapolation annulus.
pub struct AblationResult {
    pub data_only_mean_residual: f64,
    pub pinn_mean_residual: f64,
    pub data_only_net: NeuralValueFunction,
    pub pinn_net: NeuralValueFunction,
}

#[allow(clippy::too_many_arguments)]
pub fn ablation_extrapolation(
    sys: &ControlAffineSystem,
    cost: &CostSpec,
    dataset: &PMPDataset,
    base: &TrainConfig,
    eval_box: &BoxDomain,
    exclude_box: &BoxDomain,
    n_eval: usize,
    pretrained_pinn: Option<&NeuralValueFunction>,
) -> Result<AblationResult, PipelineError> {
    let mut data_only = base.clone();
    data_only.residual_weight = 0.0;
    data_only.collocation_count = 0;
    let (net_d, _) =
        pinn::train(sys, cost, dataset, &data_only).map_err(|e| stage_err("ablation", e))?;
    let net_p = match pretrained_pinn {
        Some(net) => net.clone(),
        None => pinn::train(sys, cost, dataset, base).map_err(|e| stage_err("ablation", e))?.0,
    };

    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(base.seed ^ 0xAB1A);
    let mut acc_d = 0.0;
    let mut acc_p = 0.0;
    let mut count = 0usize;
    while count < n_eval {
        let x = eval_box.sample(&mut rng);
        if exclude_box.contains_point(&x) {
            continue;
        }
        let rd = pinn::zubov_residual(sys, cost, &net_d, &base.transform, &x)
            .map_err(|e| stage_err("ablation", e))?;
        let rp = pinn::zubov_residual(sys, cost, &net_p, &base.transform, &x)
            .map_err(|e| stage_err("ablation", e))?;
        acc_d += rd.abs();
        acc_p += rp.abs();
        count += 1;
    }
    Ok(AblationResult {
        data_only_mean_residual: acc_d / n_eval as f64,
        pinn_mean_residual: acc_p / n_eval as f64,
        data_only_net: net_d,
        pinn_net: net_p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_to_identical_canonical_json() {
        let text = r#"{
            "benchmark": "reversed_vdp",
            "seed": 7,
            "pmp": {"T": 100.0, "n_samples": 50},
            "train": {"epochs": 2, "collocation_count": 640},
            "out_dir": "runs/test"
        }"#;
        let cfg: RunConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.pmp.t_final, 100.0);
        assert_eq!(cfg.pmp.n_steps, 2000); // default preserved
        let canon = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&canon).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(serde_json::to_string_pretty(&back).unwrap(), canon);
    }

    #[test]
    fn unknown_benchmark_fails_before_artifacts() {
        let dir = std::env::temp_dir().join("clf_pipeline_unknown_bench");
        let _ = std::fs::remove_dir_all(&dir);
        let cfg = RunConfig {
            benchmark: Some("does_not_exist".into()),
            out_dir: dir.to_string_lossy().into_owned(),
            ..RunConfig::default()
        };
        assert!(cfg.resolve_system().is_err());
        assert!(!dir.join("report.json").exists());
    }

    #[test]
    fn grid_export_constant_function() {
        let dir = std::env::temp_dir().join("clf_grid_test");
        let _ = std::fs::remove_dir_all(&dir);
        let path = dir.join("const.csv");
        let domain = BoxDomain::from_bounds(&[(-1.0, 1.0), (-1.0, 1.0)]);
        export_levelset_grid(&path, &|_| 2.5, &domain, 5, &[1.0]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "x1,x2,value");
        assert_eq!(text.lines().count(), 26);
        for line in text.lines().skip(1) {
            assert!(line.ends_with(",2.5"));
        }
        assert!(path.with_extension("json").exists());
    }

    #[test]
    fn grid_export_requires_2d() {
        let domain = BoxDomain::from_bounds(&[(-1.0, 1.0)]);
        let err = export_levelset_grid(
            &std::env::temp_dir().join("never.csv"),
            &|_| 0.0,
            &domain,
            10,
            &[],
        )
        .unwrap_err();
        assert!(matches!(err, PipelineError::Config(_)));
    }

    #[test]
    fn quadratic_grid_minimum_at_origin() {
        let dir = std::env::temp_dir().join("clf_grid_quad");
        let _ = std::fs::remove_dir_all(&dir);
        let path = dir.join("vp.csv");
        let domain = BoxDomain::from_bounds(&[(-4.0, 4.0), (-4.0, 4.0)]);
        export_levelset_grid(&path, &|x| x[0] * x[0] + x[1] * x[1], &domain, 41, &[1.0])
            .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let min = text
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
            .fold(f64::INFINITY, f64::min);
        assert_eq!(min, 0.0);
    }

    #[test]
    fn smt_queries_emitted_for_all_four_systems() {
        let dir = std::env::temp_dir().join("clf_smt_queries");
        let _ = std::fs::remove_dir_all(&dir);
        let queries = emit_global_queries(&dir).unwrap();
        assert_eq!(queries.len(), 4);
        for (_, path) in &queries {
            let text = std::fs::read_to_string(path).unwrap();
            assert!(text.contains("(check-sat)"));
        }
        // pendulum must carry trig bounds
        let pend = std::fs::read_to_string(dir.join("pendulum_global_clf.smt2")).unwrap();
        assert!(pend.contains("(declare-const s1 Real)"));
    }
}
