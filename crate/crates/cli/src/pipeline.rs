//! End-to-end run: every stage's inputs are hashed and checked against the
//! hash recorded when an earlier stage produced them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use d2m_core::config::{Config, HardwareProfile, ModelShape, RouterConfig, Workload};
use d2m_core::par::Execution;
use serde::Serialize;

use crate::commands::{self as cmd, MATRICES_FILE, ROUTING_FILE};
use crate::error::{Error, Result};
use crate::files;

#[derive(Args, Debug, Clone)]
pub struct PipelineArgs {
    /// Run directory; receives every artifact and `manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cost config; defaults to the 24-layer Qwen2.5-0.5B shape on Thor-U.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 64)]
    pub tokens: usize,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 50.0)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub alpha: f64,
}

#[derive(Serialize)]
struct StageRecord {
    name: &'static str,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct Manifest {
    seed: u64,
    config: Config,
    stages: Vec<StageRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

struct Run {
    dir: PathBuf,
    produced: BTreeMap<String, String>,
    stages: Vec<StageRecord>,
}

impl Run {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn hash(&self, rel: &str) -> Result<String> {
        Ok(files::sha256_hex(&files::read(&self.path(rel))?))
    }

    /// Checks inputs, runs `body`, then hashes its outputs.
    fn stage(
        &mut self,
        name: &'static str,
        inputs: &[&str],
        outputs: &[&str],
        body: impl FnOnce(&Run) -> Result<String>,
    ) -> Result<String> {
        let mut input_hashes = BTreeMap::new();
        for &rel in inputs {
            let h = self.hash(rel)?;
            if let Some(expected) = self.produced.get(rel) {
                if *expected != h {
                    return Err(Error::Internal(format!("{rel} changed since it was produced")));
                }
            }
            input_hashes.insert(rel.to_string(), h);
        }
        let summary = body(self)?;
        let mut output_hashes = BTreeMap::new();
        for &rel in outputs {
            let h = self.hash(rel)?;
            self.produced.insert(rel.to_string(), h.clone());
            output_hashes.insert(rel.to_string(), h);
        }
        self.stages.push(StageRecord {
            name,
            inputs: input_hashes,
            outputs: output_hashes,
        });
        Ok(format!("{name}: {summary}"))
    }
}

fn default_config() -> Config {
    Config {
        model: ModelShape::qwen25_05b(),
        hardware: HardwareProfile::thor_u(),
        workload: Workload::default(),
        thresholds: None,
        router: RouterConfig::default(),
    }
}

pub fn pipeline_cmd(a: &PipelineArgs, exec: Execution) -> Result<Vec<String>> {
    let config = match &a.config {
        Some(p) => files::load_config(p)?,
        None => default_config(),
    };
    let mut run = Run {
        dir: a.out.clone(),
        produced: BTreeMap::new(),
        stages: Vec::new(),
    };
    let p = |rel: &str| a.out.join(rel);
    let mut log = Vec::new();

    files::write(&p("config.json"), files::to_json(&config))?;
    run.produced.insert("config.json".into(), run.hash("config.json")?);

    log.push(run.stage("init-model", &[], &["model.bin"], |_| {
        cmd::init_model_cmd(&cmd::InitModelArgs {
            shape: None,
            std: 0.02,
            seed: a.seed,
            out: p("model.bin"),
        })
    })?);
    log.push(run.stage("trace", &["model.bin"], &["trace.bin"], |_| {
        cmd::trace_cmd(&cmd::TraceArgs {
            model: p("model.bin"),
            tokens: a.tokens,
            seed: a.seed,
            out: p("trace.bin"),
        })
    })?);
    let matrices = format!("analysis/{MATRICES_FILE}");
    log.push(run.stage(
        "analyze",
        &["trace.bin"],
        &["analysis/s_out.csv", "analysis/s_mlp.csv", "analysis/delta_norm.csv", &matrices],
        |_| {
            cmd::analyze_cmd(
                &cmd::AnalyzeArgs {
                    trace: p("trace.bin"),
                    out: p("analysis"),
                },
                exec,
            )
        },
    )?);
    log.push(run.stage("search", &[&matrices], &["plan.json"], |_| {
        cmd::search_cmd(
            &cmd::SearchArgs {
                matrices: p(&matrices),
                delta: a.delta,
                epsilon: a.epsilon,
                lambda: 1.0,
                block_sizes: vec![1, 2, 3],
                sweep: false,
                deltas: Vec::new(),
                epsilons: Vec::new(),
                target_depth: None,
                plan_out: None,
                out: p("plan.json"),
            },
            exec,
        )
    })?);
    if files::load_plan(&p("plan.json"))?.blocks.is_empty() {
        return Err(Error::Usage(format!(
            "no redundant block at delta={}, epsilon={}; relax the thresholds",
            a.delta, a.epsilon
        )));
    }
    log.push(run.stage(
        "fuse",
        &["model.bin", "plan.json"],
        &["fused.bin", "fused.provenance.json"],
        |_| {
            cmd::fuse_cmd(&cmd::FuseArgs {
                model: p("model.bin"),
                plan: p("plan.json"),
                base_copies: 2,
                supp_copies: 2,
                top_k: 1,
                out: p("fused.bin"),
                provenance: Some(p("fused.provenance.json")),
            })
        },
    )?);
    log.push(run.stage("estimate", &["config.json"], &["cost.json"], |_| {
        cmd::estimate_cmd(&cmd::EstimateArgs {
            config: p("config.json"),
            layers: Vec::new(),
            experts: Vec::new(),
            top_k: 1,
            out: p("cost.json"),
        })
    })?);
    let routing = format!("train/{ROUTING_FILE}");
    log.push(run.stage(
        "train-toy",
        &["fused.bin"],
        &["train/train_log.csv", &routing, "train/model.bin"],
        |_| {
            cmd::train_toy_cmd(
                &cmd::TrainToyArgs {
                    model: p("fused.bin"),
                    steps: a.steps,
                    lr: a.lr,
                    alpha: a.alpha,
                    seed: a.seed,
                    seq_len: 16,
                    batch: 8,
                    out: p("train"),
                },
                exec,
            )
        },
    )?);
    log.push(run.stage("diagnose", &[&routing], &["wta.csv"], |_| {
        cmd::diagnose_cmd(
            &cmd::DiagnoseArgs {
                log: p(&routing),
                compare: None,
                compare_out: None,
                out: p("wta.csv"),
            },
            exec,
        )
    })?);

    let manifest = Manifest {
        seed: a.seed,
        config,
        stages: run.stages,
    };
    files::write(&p(MANIFEST_FILE), files::to_json(&manifest))?;
    log.push(format!("wrote {}", Path::new(&a.out).join(MANIFEST_FILE).display()));
    Ok(log)
}
