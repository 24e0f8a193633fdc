//! `zubov-clf`: compute, train, verify, and simulate control Lyapunov
//! functions from the command line.
//!
//! Exit codes: 0 success; 1 verification returned a counterexample or
//! unknown (reports still written); 2 usage error; 3 numeric failure.

mod flags;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use clf_core::controlsim::{self, Controller, NeuralHjbController, SimOptions};
use clf_core::pinn::{self, NeuralValueFunction, TrainConfig};
use clf_core::pipeline::{self, Backend, RunConfig};
use clf_core::pmp::{self, DatasetConfig, PMPDataset};
use clf_core::riccati::{self, QuadraticCertificate};
use clf_core::verify::{self, ValueModel};
use flags::ConfigFlags;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("GIT_HASH"));

#[derive(Parser)]
#[command(name = "zubov-clf", version = VERSION, about = "Control Lyapunov functions: Riccati certificates, physics-informed neural Zubov-HJB solutions, interval verification, SMT-LIB2 emission, and closed-loop simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the Riccati equation and verify (or emit) the quadratic CLF.
    Qclf(ConfigFlags),
    /// Generate the PMP dataset by solving two-point boundary value problems.
    PmpData(ConfigFlags),
    /// Train the neural value function on PDE residual plus PMP data.
    Train(TrainArgs),
    /// Verify a quadratic or neural CLF with the native checker.
    Verify(VerifyArgs),
    /// Simulate a closed loop and record trajectory and accumulated cost.
    Simulate(SimulateArgs),
    /// Run every stage end to end.
    Pipeline(ConfigFlags),
    /// Export a level-set grid of the quadratic or neural function.
    ExportGrid(ExportGridArgs),
}

#[derive(clap::Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigFlags,
    /// Dataset JSONL produced by pmp-data (defaults to <out>/dataset.jsonl).
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(clap::Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: ConfigFlags,
    /// Certificate JSON from qclf (defaults to <out>/certificate.json).
    #[arg(long)]
    cert: Option<PathBuf>,
    /// Model checkpoint; verifies the neural CLF (and closed-loop ROA)
    /// instead of the quadratic one.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Convenience alias for verify.delta.
    #[arg(long)]
    delta: Option<f64>,
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: ConfigFlags,
    /// Model checkpoint for neural controllers.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Certificate JSON for quadratic controllers.
    #[arg(long)]
    cert: Option<PathBuf>,
    /// Controller kind: hjb | sontag-net | sontag-quadratic | lqr.
    #[arg(long, default_value = "hjb")]
    controller: String,
}

#[derive(clap::Args)]
struct ExportGridArgs {
    #[command(flatten)]
    common: ConfigFlags,
    /// Model checkpoint; exports W_N when given, V_P otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Certificate JSON when exporting V_P.
    #[arg(long)]
    cert: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    resolution: usize,
    /// Contour levels recorded in the metadata sidecar.
    #[arg(long, value_delimiter = ',')]
    levels: Vec<f64>,
    /// Grid bounds as JSON, e.g. [[-18,18],[-18,18]]; defaults to the
    /// system domain.
    #[arg(long)]
    grid_box: Option<String>,
}

/// Outcome classes mapped to exit codes.
enum RunOutcome {
    Success,
    VerificationNegative,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Qclf(f) => cmd_qclf(f),
        Command::PmpData(f) => cmd_pmp_data(f),
        Command::Train(a) => cmd_train(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Pipeline(f) => cmd_pipeline(f),
        Command::ExportGrid(a) => cmd_export_grid(a),
    };
    match result {
        Ok(RunOutcome::Success) => ExitCode::SUCCESS,
        Ok(RunOutcome::VerificationNegative) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = if e.downcast_ref::<UsageError>().is_some() { 2 } else { 3 };
            ExitCode::from(code)
        }
    }
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, anyhow::Error> {
    let dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(cfg)?;
    text.push('\n');
    std::fs::write(dir.join("config.json"), text)?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn load_cert(path: &Path) -> anyhow::Result<QuadraticCertificate> {
    if !path.exists() {
        return Err(usage(format!(
            "certificate {} not found; run `zubov-clf qclf` first",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn load_model(path: &Path) -> anyhow::Result<NeuralValueFunction> {
    if !path.exists() {
        return Err(usage(format!(
            "model {} not found; run `zubov-clf train` first",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn cmd_qclf(flags: ConfigFlags) -> anyhow::Result<RunOutcome> {
    let cfg = flags.into_config()?;
    let dir = out_dir(&cfg)?;
    echo_config(&cfg, &dir)?;
    let (sys, cost) = cfg.resolve_system().map_err(map_config_err)?;
    let cert = riccati::certificate(&sys, &cost)
        .map_err(|e| anyhow!("Riccati solve failed: {e}"))?;

    let delta = cfg.verify.delta.unwrap_or_else(|| verify::default_delta(sys.n));
    match cfg.backend {
        Backend::Smtlib => {
            write_json(&dir.join("certificate.json"), &cert)?;
            let cond = verify::global_clf_condition(&sys, &cert, None, None)
                .map_err(|e| anyhow!(e.to_string()))?;
            let query = verify::emit_smtlib(&cond, "QF_NRA")
                .map_err(|e| anyhow!("SMT emission failed: {e}"))?;
            let smt_path = dir.join(format!("{}_global_clf.smt2", sys.name_slug()));
            std::fs::write(&smt_path, query)?;
            eprintln!("wrote {} and {}", dir.join("certificate.json").display(), smt_path.display());
            if let Some((solver, answer)) = pipeline::try_external_solver(&smt_path, 60) {
                eprintln!("{solver}: {answer}");
                if answer != "unsat" {
                    return Ok(RunOutcome::VerificationNegative);
                }
            } else {
                eprintln!("no external solver found; query emitted only");
            }
            Ok(RunOutcome::Success)
        }
        Backend::Native => {
            let budget = cfg.verify.budget();
            let threads = cfg.effective_threads();
            match verify::verify_quadratic(&sys, &cert, cfg.verify.c_max, delta, &budget, threads)
            {
                Ok(res) => {
                    write_json(&dir.join("certificate.json"), &res.cert)?;
                    write_json(
                        &dir.join("verify/quadratic.json"),
                        &serde_json::json!({
                            "condition": format!("quadratic_clf_{}", sys.name),
                            "verdict": "proved",
                            "c_P1": res.cert.c_p1,
                            "c_P": res.cert.c_p,
                            "origin_radius": res.origin_radius,
                            "delta": delta,
                            "boxes": res.stats.boxes_total,
                        }),
                    )?;
                    eprintln!(
                        "quadratic CLF verified: c_P1 = {:.6}, c_P = {:.6}",
                        res.cert.c_p1, res.cert.c_p
                    );
                    Ok(RunOutcome::Success)
                }
                Err(verify::VerifyError::CertificateRejected) => {
                    write_json(&dir.join("certificate.json"), &cert)?;
                    write_json(
                        &dir.join("verify/quadratic.json"),
                        &serde_json::json!({
                            "condition": format!("quadratic_clf_{}", sys.name),
                            "verdict": "rejected",
                        }),
                    )?;
                    eprintln!("quadratic certificate rejected at every level");
                    Ok(RunOutcome::VerificationNegative)
                }
                Err(e) => Err(anyhow!("verification failed: {e}")),
            }
        }
    }
}

fn cmd_pmp_data(flags: ConfigFlags) -> anyhow::Result<RunOutcome> {
    let cfg = flags.into_config()?;
    let dir = out_dir(&cfg)?;
    echo_config(&cfg, &dir)?;
    let (sys, cost) = cfg.resolve_system().map_err(map_config_err)?;
    let domain = cfg
        .pmp
        .domain
        .clone()
        .or_else(|| {
            clf_core::system::default_data_domain(&sys.name)
                .map(|b| b.intervals().iter().map(|iv| [iv.lo, iv.hi]).collect())
        })
        .unwrap_or_else(|| sys.domain.intervals().iter().map(|iv| [iv.lo, iv.hi]).collect());
    let ds_config = DatasetConfig {
        n_samples: cfg.pmp.n_samples,
        t_final: cfg.pmp.t_final,
        n_steps: cfg.pmp.n_steps,
        tol: cfg.pmp.tol,
        domain,
        seed: cfg.seed,
        transform: cfg.transform,
        threads: Some(cfg.effective_threads()),
    };
    let dataset = pmp::generate_dataset(&sys, &cost, &ds_config)
        .map_err(|e| anyhow!("data generation failed: {e}"))?;
    let mut buf = Vec::new();
    dataset.write_jsonl(&mut buf)?;
    std::fs::write(dir.join("dataset.jsonl"), buf)?;
    write_json(&dir.join("dataset_config.json"), &ds_config)?;
    eprintln!(
        "converged {}/{} samples ({:.1}%)",
        dataset.samples.len(),
        dataset.attempts,
        100.0 * dataset.success_fraction()
    );
    if dataset.samples.is_empty() {
        eprintln!("warning: empty dataset");
    }
    Ok(RunOutcome::Success)
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<RunOutcome> {
    let cfg = args.common.into_config()?;
    let dir = out_dir(&cfg)?;
    echo_config(&cfg, &dir)?;
    let (sys, cost) = cfg.resolve_system().map_err(map_config_err)?;
    let ds_path = args.dataset.unwrap_or_else(|| dir.join("dataset.jsonl"));
    if !ds_path.exists() {
        return Err(usage(format!(
            "dataset {} not found; run `zubov-clf pmp-data` first",
            ds_path.display()
        )));
    }
    let sidecar = ds_path.with_file_name("dataset_config.json");
    let ds_config: DatasetConfig = if sidecar.exists() {
        serde_json::from_str(&std::fs::read_to_string(&sidecar)?)?
    } else {
        DatasetConfig {
            n_samples: 0,
            t_final: cfg.pmp.t_final,
            n_steps: cfg.pmp.n_steps,
            tol: cfg.pmp.tol,
            domain: sys.domain.intervals().iter().map(|iv| [iv.lo, iv.hi]).collect(),
            seed: cfg.seed,
            transform: cfg.transform,
            threads: None,
        }
    };
    let file = std::fs::File::open(&ds_path)?;
    let dataset = PMPDataset::read_jsonl(std::io::BufReader::new(file), ds_config)?;

    let train_config = TrainConfig {
        collocation_count: cfg.train.collocation_count,
        data_weight: cfg.train.data_weight,
        boundary_weight: cfg.train.boundary_weight,
        residual_weight: cfg.train.residual_weight,
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        learning_rate: cfg.train.learning_rate,
        seed: cfg.seed,
        domain: cfg.train.domain.clone().unwrap_or_else(|| {
            sys.domain.intervals().iter().map(|iv| [iv.lo, iv.hi]).collect()
        }),
        hidden: cfg.train.hidden.clone(),
        transform: cfg.transform,
        parallel: cfg.train.parallel,
    };
    let (net, report) = pinn::train(&sys, &cost, &dataset, &train_config)
        .map_err(|e| anyhow!("training failed: {e}"))?;
    write_json(&dir.join("model.json"), &net)?;
    let mut buf = Vec::new();
    report.write_history_csv(&mut buf)?;
    std::fs::write(dir.join("loss_history.csv"), buf)?;
    eprintln!(
        "trained {} steps; final residual MSE {:.3e}",
        report.steps, report.final_residual_mse
    );
    Ok(RunOutcome::Success)
}

fn cmd_verify(args: VerifyArgs) -> anyhow::Result<RunOutcome> {
    let mut cfg = args.common.into_config()?;
    if let Some(d) = args.delta {
        cfg.verify.delta = Some(d);
    }
    let dir = out_dir(&cfg)?;
    echo_config(&cfg, &dir)?;
    let (sys, cost) = cfg.resolve_system().map_err(map_config_err)?;
    let delta = cfg.verify.delta.unwrap_or_else(|| verify::default_delta(sys.n));
    let budget = cfg.verify.budget();
    let threads = cfg.effective_threads();
    let cert_path = args.cert.unwrap_or_else(|| dir.join("certificate.json"));

    match args.model {
        None => {
            let cert = load_cert(&cert_path)?;
            match verify::verify_quadratic(&sys, &cert, cfg.verify.c_max, delta, &budget, threads)
            {
                Ok(res) => {
                    write_json(&cert_path, &res.cert)?;
                    write_json(
                        &dir.join("verify/quadratic.json"),
                        &serde_json::json!({
                            "condition": format!("quadratic_clf_{}", sys.name),
                            "verdict": "proved",
                            "c_P1": res.cert.c_p1,
                            "c_P": res.cert.c_p,
                            "delta": delta,
                            "boxes": res.stats.boxes_total,
                        }),
                    )?;
                    eprintln!("c_P1 = {:.6}, c_P = {:.6}", res.cert.c_p1, res.cert.c_p);
                    Ok(RunOutcome::Success)
                }
                Err(verify::VerifyError::CertificateRejected) => {
                    eprintln!("certificate rejected");
                    Ok(RunOutcome::VerificationNegative)
                }
                Err(e) => Err(anyhow!("verification failed: {e}")),
            }
        }
        Some(model_path) => {
            let cert = load_cert(&cert_path)?;
            if cert.c_p <= 0.0 {
                return Err(usage(
                    "certificate has no verified level c_P; run `zubov-clf qclf` (native) first",
                ));
            }
            let net = load_model(&model_path)?;
            let transform = net.transform;
            let model = Arc::new(ValueModel::from_net(net));
            let neural = match verify::verify_neural(
                &sys,
                &model,
                &cert,
                cfg.verify.c_max,
                delta,
                &budget,
                threads,
            ) {
                Ok(r) => r,
                Err(verify::VerifyError::NoContainmentLevel) => {
                    write_json(
                        &dir.join("verify/neural.json"),
                        &serde_json::json!({
                            "condition": format!("neural_clf_{}", sys.name),
                            "verdict": "no containment level",
                        }),
                    )?;
                    eprintln!("no containment level c1; training insufficient");
                    return Ok(RunOutcome::VerificationNegative);
                }
                Err(e) => return Err(anyhow!("verification failed: {e}")),
            };
            write_json(
                &dir.join("verify/neural.json"),
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
            eprintln!("c1 = {:.6}, c2 = {:?}", neural.c1, neural.c2);
            let roa = verify::verify_closed_loop_roa(
                &sys, &cost, &model, transform, &cert, delta, &budget, threads,
            );
            match &roa {
                Ok(r) => {
                    write_json(
                        &dir.join("verify/roa.json"),
                        &serde_json::json!({
                            "condition": format!("closed_loop_roa_{}", sys.name),
                            "verdict": "proved",
                            "c": r.c,
                            "ball_radius": r.ball_radius,
                            "c_quadratic": r.c_quadratic,
                            "c_inner": r.c_inner,
                            "delta": delta,
                        }),
                    )?;
                    eprintln!("closed-loop ROA level c = {:.6}", r.c);
                }
                Err(e) => eprintln!("closed-loop ROA verification failed: {e}"),
            }
            if neural.c2.is_some() {
                Ok(RunOutcome::Success)
            } else {
                Ok(RunOutcome::VerificationNegative)
            }
        }
    }
}

fn cmd_simulate(args: SimulateArgs) -> anyhow::Result<RunOutcome> {
    let cfg = args.common.into_config()?;
    let dir = out_dir(&cfg)?;
    echo_config(&cfg, &dir)?;
    let (sys, cost) = cfg.resolve_system().map_err(map_config_err)?;
    let opts = SimOptions::new(cfg.simulate.t_final);

    let net = match &args.model {
        Some(p) => Some(load_model(p)?),
        None => None,
    };
    let cert = match &args.cert {
        Some(p) => Some(load_cert(p)?),
        None => None,
    };

    let mut comparisons = Vec::new();
    for (idx, x0) in cfg.simulate.x0.iter().enumerate() {
        if x0.len() != sys.n {
            return Err(usage(format!(
                "x0 {:?} has wrong dimension for {}",
                x0, sys.name
            )));
        }
        let (name, traj) = match args.controller.as_str() {
            "hjb" => {
                let net = net.as_ref().ok_or_else(|| usage("hjb controller needs --model"))?;
                let ctrl = NeuralHjbController::new(&sys, &cost, net, net.transform, true)
                    .map_err(|e| anyhow!(e.to_string()))?;
                ("hjb", controlsim::simulate(&sys, &cost, &Controller::NeuralHjb(ctrl), x0, &opts))
            }
            "sontag-net" => {
                let net = net.as_ref().ok_or_else(|| usage("sontag-net needs --model"))?;
                let ctrl = Controller::Sontag {
                    grad_v: Box::new(move |x: &[f64]| net.input_gradient(x)),
                };
                ("sontag_net", controlsim::simulate(&sys, &cost, &ctrl, x0, &opts))
            }
            "sontag-quadratic" => {
                let cert =
                    cert.as_ref().ok_or_else(|| usage("sontag-quadratic needs --cert"))?;
                let p = cert.p.clone();
                let ctrl = Controller::Sontag {
                    grad_v: Box::new(move |x: &[f64]| {
                        let xv = nalgebra::DVector::from_column_slice(x);
                        ((&p * xv) * 2.0).as_slice().to_vec()
                    }),
                };
                ("sontag_quadratic", controlsim::simulate(&sys, &cost, &ctrl, x0, &opts))
            }
            "lqr" => {
                let cert = cert.as_ref().ok_or_else(|| usage("lqr needs --cert"))?;
                let ctrl = Controller::Lqr { gain: cert.k.clone() };
                ("lqr", controlsim::simulate(&sys, &cost, &ctrl, x0, &opts))
            }
            other => return Err(usage(format!("unknown controller '{other}'"))),
        };
        let traj = traj.map_err(|e| anyhow!("simulation failed: {e}"))?;
        let mut buf = Vec::new();
        traj.write_csv(&mut buf)?;
        let path = dir.join(format!("traj/{name}_{idx}.csv"));
        std::fs::create_dir_all(path.parent().unwrap())?;
        std::fs::write(&path, buf)?;
        eprintln!(
            "x0 {:?}: J({}) = {:.6}, ||x(T)|| = {:.3e}",
            x0,
            cfg.simulate.t_final,
            traj.accumulated_cost(),
            traj.final_state().x.iter().map(|v| v * v).sum::<f64>().sqrt()
        );
        comparisons.push(serde_json::json!({
            "x0": x0,
            "controller": name,
            "J": traj.accumulated_cost(),
            "T": cfg.simulate.t_final,
        }));
    }
    write_json(&dir.join("cost_comparison.json"), &comparisons)?;
    Ok(RunOutcome::Success)
}

fn cmd_pipeline(flags: ConfigFlags) -> anyhow::Result<RunOutcome> {
    let cfg = flags.into_config()?;
    match pipeline::run_pipeline(&cfg) {
        Ok(report) => {
            eprintln!(
                "pipeline done: c_P = {:.6}, c1 = {:.6}, c2 = {:?}, roa = {:?}",
                report.certificate.c_p,
                report.verification.c1,
                report.verification.c2,
                report.verification.roa_c
            );
            if report.verification.c2.is_some() {
                Ok(RunOutcome::Success)
            } else {
                Ok(RunOutcome::VerificationNegative)
            }
        }
        Err(clf_core::pipeline::PipelineError::Config(msg)) => Err(usage(msg)),
        Err(e) => Err(anyhow!("{e}")),
    }
}

fn cmd_export_grid(args: ExportGridArgs) -> anyhow::Result<RunOutcome> {
    let cfg = args.common.into_config()?;
    let dir = out_dir(&cfg)?;
    let (sys, _) = cfg.resolve_system().map_err(map_config_err)?;
    let domain = match &args.grid_box {
        Some(text) => {
            let bounds: Vec<[f64; 2]> =
                serde_json::from_str(text).map_err(|e| usage(format!("bad grid box: {e}")))?;
            clf_core::BoxDomain::from_bounds(
                &bounds.iter().map(|b| (b[0], b[1])).collect::<Vec<_>>(),
            )
        }
        None => sys.domain.clone(),
    };
    let (path, result): (PathBuf, _) = match (&args.model, &args.cert) {
        (Some(model_path), _) => {
            let net = load_model(model_path)?;
            let path = dir.join("grids/neural.csv");
            let r = pipeline::export_levelset_grid(
                &path,
                &|x| net.forward(x),
                &domain,
                args.resolution,
                &args.levels,
            );
            (path, r)
        }
        (None, Some(cert_path)) => {
            let cert = load_cert(cert_path)?;
            let p = cert.p.clone();
            let path = dir.join("grids/quadratic.csv");
            let r = pipeline::export_levelset_grid(
                &path,
                &|x| {
                    let xv = nalgebra::DVector::from_column_slice(x);
                    (xv.transpose() * &p * &xv)[(0, 0)]
                },
                &domain,
                args.resolution,
                &args.levels,
            );
            (path, r)
        }
        (None, None) => return Err(usage("export-grid needs --model or --cert")),
    };
    result.map_err(|e| match e {
        clf_core::pipeline::PipelineError::Config(msg) => usage(msg),
        other => anyhow!("{other}"),
    })?;
    eprintln!("wrote {}", path.display());
    Ok(RunOutcome::Success)
}

fn map_config_err(e: clf_core::pipeline::PipelineError) -> anyhow::Error {
    match e {
        clf_core::pipeline::PipelineError::Config(msg) => usage(msg),
        other => anyhow!("{other}"),
    }
}
