//! Config-file loading plus per-leaf flag overrides.
//!
//! Every leaf of the run configuration is reachable as `--section.key`;
//! command-line values win over the config file, which wins over defaults.

use anyhow::Context;
use clap::Args;
use clf_core::pipeline::{Backend, RunConfig};
use clf_core::pmp::{TransformKind, TransformSpec};
use std::path::PathBuf;

#[derive(Args)]
pub struct ConfigFlags {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Built-in benchmark name (vdp_input, mass_spring_4d,
    /// mass_spring_chain(N), pendulum, reversed_vdp).
    #[arg(long)]
    pub benchmark: Option<String>,

    /// Custom system JSON path (alternative to --benchmark).
    #[arg(long)]
    pub system_config: Option<PathBuf>,

    #[arg(long)]
    pub seed: Option<u64>,

    /// Output directory for all artifacts.
    #[arg(long)]
    pub out: Option<String>,

    /// native | smtlib
    #[arg(long)]
    pub backend: Option<String>,

    /// Worker-thread cap (env ZUBOV_CLF_THREADS as fallback).
    #[arg(long)]
    pub threads: Option<usize>,

    #[arg(long = "transform.kind")]
    pub transform_kind: Option<String>,
    #[arg(long = "transform.alpha")]
    pub transform_alpha: Option<f64>,

    #[arg(long = "pmp.T")]
    pub pmp_t: Option<f64>,
    #[arg(long = "pmp.N")]
    pub pmp_n: Option<usize>,
    #[arg(long = "pmp.tol")]
    pub pmp_tol: Option<f64>,
    #[arg(long = "pmp.n_samples")]
    pub pmp_n_samples: Option<usize>,
    /// JSON bounds, e.g. [[-4,4],[-4,4]].
    #[arg(long = "pmp.domain")]
    pub pmp_domain: Option<String>,

    #[arg(long = "train.collocation_count")]
    pub train_collocation_count: Option<usize>,
    #[arg(long = "train.epochs")]
    pub train_epochs: Option<usize>,
    #[arg(long = "train.batch_size")]
    pub train_batch_size: Option<usize>,
    #[arg(long = "train.learning_rate")]
    pub train_learning_rate: Option<f64>,
    #[arg(long = "train.data_weight")]
    pub train_data_weight: Option<f64>,
    #[arg(long = "train.boundary_weight")]
    pub train_boundary_weight: Option<f64>,
    #[arg(long = "train.residual_weight")]
    pub train_residual_weight: Option<f64>,
    /// JSON list of hidden widths, e.g. [30,30].
    #[arg(long = "train.hidden")]
    pub train_hidden: Option<String>,
    #[arg(long = "train.domain")]
    pub train_domain: Option<String>,
    #[arg(long = "train.parallel")]
    pub train_parallel: Option<bool>,

    #[arg(long = "verify.delta")]
    pub verify_delta: Option<f64>,
    #[arg(long = "verify.c_max")]
    pub verify_c_max: Option<f64>,
    #[arg(long = "verify.max_boxes")]
    pub verify_max_boxes: Option<u64>,
    #[arg(long = "verify.max_frontier")]
    pub verify_max_frontier: Option<usize>,
    #[arg(long = "verify.min_width")]
    pub verify_min_width: Option<f64>,

    #[arg(long = "simulate.T")]
    pub simulate_t: Option<f64>,
    /// JSON list of initial states, e.g. [[-2.6,-2.6],[1,0]].
    #[arg(long = "simulate.x0")]
    pub simulate_x0: Option<String>,
}

impl ConfigFlags {
    pub fn into_config(self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing {}", path.display()))?
            }
            None => RunConfig::default(),
        };

        if let Some(b) = self.benchmark {
            cfg.benchmark = Some(b);
            cfg.system_config = None;
        }
        if let Some(p) = self.system_config {
            cfg.system_config = Some(p.to_string_lossy().into_owned());
            cfg.benchmark = None;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = self.out {
            cfg.out_dir = o;
        }
        if let Some(b) = self.backend {
            cfg.backend = match b.as_str() {
                "native" => Backend::Native,
                "smtlib" => Backend::Smtlib,
                other => anyhow::bail!("unknown backend '{other}' (native | smtlib)"),
            };
        }
        if let Some(t) = self.threads {
            cfg.threads = Some(t);
        }
        if let Some(kind) = self.transform_kind {
            cfg.transform = TransformSpec {
                kind: match kind.as_str() {
                    "kruzkov" => TransformKind::Kruzkov,
                    "tanh" => TransformKind::Tanh,
                    other => anyhow::bail!("unknown transform '{other}' (kruzkov | tanh)"),
                },
                alpha: cfg.transform.alpha,
            };
        }
        if let Some(a) = self.transform_alpha {
            anyhow::ensure!(a > 0.0, "transform.alpha must be positive");
            cfg.transform.alpha = a;
        }

        if let Some(v) = self.pmp_t {
            cfg.pmp.t_final = v;
        }
        if let Some(v) = self.pmp_n {
            cfg.pmp.n_steps = v;
        }
        if let Some(v) = self.pmp_tol {
            cfg.pmp.tol = v;
        }
        if let Some(v) = self.pmp_n_samples {
            cfg.pmp.n_samples = v;
        }
        if let Some(text) = self.pmp_domain {
            cfg.pmp.domain = Some(parse_bounds(&text)?);
        }

        if let Some(v) = self.train_collocation_count {
            cfg.train.collocation_count = v;
        }
        if let Some(v) = self.train_epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.train_batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.train_learning_rate {
            cfg.train.learning_rate = v;
        }
        if let Some(v) = self.train_data_weight {
            cfg.train.data_weight = v;
        }
        if let Some(v) = self.train_boundary_weight {
            cfg.train.boundary_weight = v;
        }
        if let Some(v) = self.train_residual_weight {
            cfg.train.residual_weight = v;
        }
        if let Some(text) = self.train_hidden {
            cfg.train.hidden =
                serde_json::from_str(&text).context("parsing train.hidden")?;
        }
        if let Some(text) = self.train_domain {
            cfg.train.domain = Some(parse_bounds(&text)?);
        }
        if let Some(v) = self.train_parallel {
            cfg.train.parallel = v;
        }

        if let Some(v) = self.verify_delta {
            cfg.verify.delta = Some(v);
        }
        if let Some(v) = self.verify_c_max {
            cfg.verify.c_max = Some(v);
        }
        if let Some(v) = self.verify_max_boxes {
            cfg.verify.max_boxes = v;
        }
        if let Some(v) = self.verify_max_frontier {
            cfg.verify.max_frontier = v;
        }
        if let Some(v) = self.verify_min_width {
            cfg.verify.min_width = v;
        }

        if let Some(v) = self.simulate_t {
            cfg.simulate.t_final = v;
        }
        if let Some(text) = self.simulate_x0 {
            cfg.simulate.x0 =
                serde_json::from_str(&text).context("parsing simulate.x0")?;
        }

        Ok(cfg)
    }
}

fn parse_bounds(text: &str) -> anyhow::Result<Vec<[f64; 2]>> {
    let bounds: Vec<[f64; 2]> = serde_json::from_str(text).context("parsing domain bounds")?;
    for b in &bounds {
        anyhow::ensure!(b[0] <= b[1], "bad interval [{}, {}]", b[0], b[1]);
    }
    Ok(bounds)
}
