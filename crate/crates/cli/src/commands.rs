//! One function per subcommand. Each returns a one-line summary for stdout.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::Args;
use d2m_core::config::{MoEShape, ModelShape, RouterConfig, SearchThresholds};
use d2m_core::cost::{estimate, CostRecord};
use d2m_core::diagnostics::{compare_runs, profiles_csv, wta_metrics_with, LayerLoadProfile};
use d2m_core::model::init::{random_dense, InitOptions};
use d2m_core::model::{dense_forward, train_toy, CopyTask, Model, TrainOptions};
use d2m_core::par::Execution;
use d2m_core::search::{plan_from_depth, search, threshold_sweep_with};
use d2m_core::similarity::{build_matrices_with, export_heatmap};
use d2m_core::surgery::{fuse, provenance_to_json, verify_fusion, FuseOptions};
use d2m_core::trace::{synth_trace, Redundancy};
use d2m_core::tradeoff::{calibrate_w, candidates_csv, evaluate_candidates, pareto_frontier, CandidateEvaluation};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::files;

/// Matrices cache written next to the heatmaps by `analyze`.
pub const MATRICES_FILE: &str = "matrices.bin";

/// Shape used when `init-model` gets no `--shape`.
pub fn toy_shape() -> ModelShape {
    ModelShape {
        num_layers: 6,
        hidden_dim: 16,
        mlp_dim: 32,
        num_heads: 2,
        num_kv_heads: 1,
        head_dim: 8,
        vocab_size: 16,
        tied_embedding: true,
        moe: None,
    }
}

fn parse_redundancy(s: &str) -> std::result::Result<Redundancy, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [base, offset, noise] = parts.as_slice() else {
        return Err(format!("expected base:offset:noise, got `{s}`"));
    };
    Ok(Redundancy::new(
        base.parse().map_err(|e| format!("base: {e}"))?,
        offset.parse().map_err(|e| format!("offset: {e}"))?,
        noise.parse().map_err(|e| format!("noise: {e}"))?,
    ))
}

#[derive(Args, Debug, Clone)]
pub struct SynthTraceArgs {
    #[arg(long)]
    pub layers: usize,
    #[arg(long)]
    pub tokens: usize,
    #[arg(long)]
    pub dim: usize,
    /// Noisy copy `base:offset:noise`; repeatable.
    #[arg(long = "redundancy", value_parser = parse_redundancy)]
    pub redundancy: Vec<Redundancy>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn synth_trace_cmd(a: &SynthTraceArgs) -> Result<String> {
    let trace = synth_trace(a.layers, a.tokens, a.dim, &a.redundancy, a.seed)?;
    files::save_trace(&a.out, &trace)?;
    Ok(format!("wrote {} (L={}, T={}, d={})", a.out.display(), a.layers, a.tokens, a.dim))
}

#[derive(Args, Debug, Clone)]
pub struct InitModelArgs {
    /// ModelShape JSON; defaults to a 6-layer toy shape.
    #[arg(long)]
    pub shape: Option<PathBuf>,
    #[arg(long, default_value_t = 0.02)]
    pub std: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn init_model_cmd(a: &InitModelArgs) -> Result<String> {
    let shape = match &a.shape {
        Some(p) => serde_json::from_str::<ModelShape>(&files::read_string(p)?)
            .map_err(|e| Error::input(p)(e.into()))?,
        None => toy_shape(),
    };
    let opts = InitOptions {
        std: a.std,
        ..InitOptions::seeded(a.seed)
    };
    let c = random_dense(&shape, &opts)?;
    files::save_weights(&a.out, &c)?;
    Ok(format!("wrote {} ({} parameters)", a.out.display(), c.param_count()))
}

#[derive(Args, Debug, Clone)]
pub struct TraceArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Length of the random token sequence.
    #[arg(long, default_value_t = 64)]
    pub tokens: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn trace_cmd(a: &TraceArgs) -> Result<String> {
    use rand::{Rng, SeedableRng};
    let container = files::load_weights(&a.model)?;
    let model = Model::from_container(&container, RouterConfig::default()).map_err(Error::input(&a.model))?;
    if a.tokens == 0 {
        return Err(Error::Usage("--tokens must be at least 1".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
    let tokens: Vec<usize> = (0..a.tokens).map(|_| rng.random_range(0..model.shape.vocab_size)).collect();
    let (_, trace) = dense_forward(&model, &model.embed_tokens(&tokens)?)?;
    files::save_trace(&a.out, &trace)?;
    Ok(format!("wrote {} (L={}, T={})", a.out.display(), trace.num_layers(), a.tokens))
}

#[derive(Args, Debug, Clone)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn analyze_cmd(a: &AnalyzeArgs, exec: Execution) -> Result<String> {
    let trace = files::load_trace(&a.trace)?;
    let m = build_matrices_with(&trace, exec).map_err(Error::input(&a.trace))?;
    export_heatmap(&m, &a.out).map_err(|e| match e {
        d2m_core::Error::Io(io) => Error::io(&a.out, io),
        other => other.into(),
    })?;
    files::save_matrices(&a.out.join(MATRICES_FILE), &m)?;
    Ok(format!("wrote {} similarity matrices ({} layers)", a.out.display(), m.num_layers()))
}

#[derive(Args, Debug, Clone)]
pub struct SearchArgs {
    /// Matrices cache written by `analyze`.
    #[arg(long)]
    pub matrices: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub block_sizes: Vec<usize>,
    /// Sweep the `--deltas` x `--epsilons` grid instead of a single search.
    #[arg(long)]
    pub sweep: bool,
    #[arg(long, value_delimiter = ',', requires = "sweep")]
    pub deltas: Vec<f64>,
    #[arg(long, value_delimiter = ',', requires = "sweep")]
    pub epsilons: Vec<f64>,
    /// With `--sweep`, also write the plan of the loosest cell keeping this many layers.
    #[arg(long, requires = "sweep")]
    pub target_depth: Option<usize>,
    #[arg(long)]
    pub plan_out: Option<PathBuf>,
    /// Plan JSON, or sweep CSV with `--sweep`.
    #[arg(long)]
    pub out: PathBuf,
}

fn thresholds(delta: f64, epsilon: f64, lambda: f64, sizes: &BTreeSet<usize>) -> Result<SearchThresholds> {
    Ok(SearchThresholds {
        cos_threshold: delta,
        norm_tolerance: epsilon,
        score_penalty: lambda,
        block_sizes: sizes.clone(),
    }
    .validate()?)
}

pub fn search_cmd(a: &SearchArgs, exec: Execution) -> Result<String> {
    let sizes: BTreeSet<usize> = a.block_sizes.iter().copied().collect();
    if !a.sweep {
        let t = thresholds(a.delta, a.epsilon, a.lambda, &sizes)?;
        let m = files::load_matrices(&a.matrices)?;
        let plan = search(&m, &t);
        files::write(&a.out, plan.to_json())?;
        return Ok(format!(
            "wrote {}: keep {} of {} layers",
            a.out.display(),
            plan.retained_depth(),
            plan.num_layers()
        ));
    }
    if a.deltas.is_empty() || a.epsilons.is_empty() {
        return Err(Error::Usage("--sweep needs --deltas and --epsilons".into()));
    }
    for &d in &a.deltas {
        for &e in &a.epsilons {
            thresholds(d, e, a.lambda, &sizes)?;
        }
    }
    let m = files::load_matrices(&a.matrices)?;
    let grid = threshold_sweep_with(&m, &a.deltas, &a.epsilons, a.lambda, &sizes, exec)?;
    files::write(&a.out, grid.to_csv())?;
    let mut summary = format!("wrote {} ({} cells)", a.out.display(), grid.cells.len());
    if let Some(target) = a.target_depth {
        let (d, e, plan) = plan_from_depth(&grid, target)?;
        let out = a
            .plan_out
            .as_ref()
            .ok_or_else(|| Error::Usage("--target-depth needs --plan-out".into()))?;
        files::write(out, plan.to_json())?;
        summary.push_str(&format!("; depth {target} at delta={d}, epsilon={e}"));
    }
    Ok(summary)
}

#[derive(Args, Debug, Clone)]
pub struct FuseArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long = "base-copies", default_value_t = 4)]
    pub base_copies: usize,
    #[arg(long = "supp-copies", default_value_t = 2)]
    pub supp_copies: usize,
    #[arg(long = "top-k", default_value_t = 1)]
    pub top_k: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Provenance JSON; defaults to `<out>.provenance.json`.
    #[arg(long)]
    pub provenance: Option<PathBuf>,
}

impl FuseArgs {
    pub fn provenance_path(&self) -> PathBuf {
        self.provenance
            .clone()
            .unwrap_or_else(|| self.out.with_extension("provenance.json"))
    }
}

pub fn fuse_cmd(a: &FuseArgs) -> Result<String> {
    let dense = files::load_weights(&a.model)?;
    let plan = files::load_plan(&a.plan)?;
    let opts = FuseOptions {
        base_copies: a.base_copies,
        supplementary_copies: a.supp_copies,
        top_k: a.top_k,
    };
    let fused = fuse(&dense, &plan, &opts)?;
    verify_fusion(&dense, &fused.container, &plan, &fused.provenance)?;
    files::save_weights(&a.out, &fused.container)?;
    let prov = a.provenance_path();
    files::write(&prov, format!("{}\n", provenance_to_json(&fused.provenance)))?;
    Ok(format!(
        "wrote {} ({} layers, {} fused) and {}",
        a.out.display(),
        fused.container.shape.num_layers,
        fused.provenance.len(),
        prov.display()
    ))
}

#[derive(Args, Debug, Clone)]
pub struct EstimateArgs {
    /// Config JSON with `model`, `hardware` and optional `workload`.
    #[arg(long)]
    pub config: PathBuf,
    /// Override the layer count; comma-separated values sweep.
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    /// Override the expert count; comma-separated values sweep.
    #[arg(long, value_delimiter = ',')]
    pub experts: Vec<usize>,
    #[arg(long = "top-k", default_value_t = 1)]
    pub top_k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Cost records for every `(L, N)` combination; the config shape when no override is given.
pub fn cost_records(a: &EstimateArgs) -> Result<Vec<CostRecord>> {
    let cfg = files::load_config(&a.config)?;
    let layers = if a.layers.is_empty() { vec![cfg.model.num_layers] } else { a.layers.clone() };
    let mut records = Vec::new();
    for &l in &layers {
        let shape = cfg.model.with_layers(l);
        if a.experts.is_empty() {
            let id = match shape.moe {
                Some(m) => format!("L{l}-N{}-k{}", m.num_experts, m.top_k),
                None => format!("dense-L{l}"),
            };
            records.push(estimate(&id, &shape, &cfg.hardware, &cfg.workload)?);
            continue;
        }
        for &n in &a.experts {
            let moe = MoEShape {
                num_experts: n,
                top_k: a.top_k,
                ..shape.moe.unwrap_or(MoEShape {
                    num_experts: n,
                    top_k: a.top_k,
                    base_copies: 1,
                    supplementary_copies: 1,
                })
            };
            let id = format!("L{l}-N{n}-k{}", a.top_k);
            records.push(estimate(&id, &shape.with_moe(Some(moe)), &cfg.hardware, &cfg.workload)?);
        }
    }
    Ok(records)
}

pub fn estimate_cmd(a: &EstimateArgs) -> Result<String> {
    let records = cost_records(a)?;
    files::write(&a.out, files::to_json(&records))?;
    Ok(format!("wrote {} ({} configurations)", a.out.display(), records.len()))
}

#[derive(Args, Debug, Clone)]
pub struct ParetoArgs {
    /// CSV `config_id,depth,latency_ms,score[,reward]`.
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long = "base-latency")]
    pub base_latency: f64,
    #[arg(long, allow_negative_numbers = true, conflicts_with = "calibrate", required_unless_present = "calibrate")]
    pub w: Option<f64>,
    /// `FACTOR GAIN`: pick `w` so scaling latency by FACTOR for a relative score gain GAIN is reward-neutral.
    #[arg(long, num_args = 2, value_names = ["FACTOR", "GAIN"])]
    pub calibrate: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub frontier: PathBuf,
}

#[derive(Deserialize)]
struct CandidateRow {
    config_id: String,
    depth: usize,
    latency_ms: f64,
    score: f64,
}

pub fn read_candidates(path: &Path) -> Result<Vec<CandidateEvaluation>> {
    let text = files::read_string(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in reader.deserialize::<CandidateRow>() {
        let r = row.map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        out.push(CandidateEvaluation::new(r.config_id, r.depth, r.latency_ms, r.score));
    }
    if out.is_empty() {
        return Err(Error::Usage(format!("{}: no candidate rows", path.display())));
    }
    Ok(out)
}

pub fn pareto_cmd(a: &ParetoArgs) -> Result<String> {
    let w = match (&a.w, &a.calibrate) {
        (Some(w), _) => *w,
        (None, Some(fg)) => calibrate_w(fg[0], fg[1])?,
        (None, None) => return Err(Error::Usage("one of --w or --calibrate is required".into())),
    };
    let candidates = read_candidates(&a.candidates)?;
    let evaluated = evaluate_candidates(&candidates, a.base_latency, w)?;
    let header = format!("# w={w:.4}\n");
    files::write(&a.out, format!("{header}{}", candidates_csv(&evaluated.candidates)))?;
    let points: Vec<(f64, f64)> = evaluated.candidates.iter().map(|c| (c.latency_ms, c.score)).collect();
    let front: Vec<CandidateEvaluation> = pareto_frontier(&points)
        .into_iter()
        .map(|i| evaluated.candidates[i].clone())
        .collect();
    files::write(&a.frontier, format!("{header}{}", candidates_csv(&front)))?;
    let best = evaluated.best();
    Ok(format!(
        "w={w:.4}; best {} (depth {}, reward {:.2}); {} on the frontier",
        best.config_id,
        best.depth,
        best.reward.unwrap_or(f64::NAN),
        front.len()
    ))
}

#[derive(Args, Debug, Clone)]
pub struct DiagnoseArgs {
    /// Per-layer routing log written by `train-toy`.
    #[arg(long)]
    pub log: PathBuf,
    /// Second routing log; writes `a - b` deltas to `--compare-out`.
    #[arg(long, requires = "compare_out")]
    pub compare: Option<PathBuf>,
    #[arg(long)]
    pub compare_out: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `layer,winner,top_load,load_e1,...` rows into load profiles.
pub fn read_profiles(path: &Path) -> Result<Vec<LayerLoadProfile>> {
    let text = files::read_string(path)?;
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(csv_err)?.clone();
    if headers.get(0) != Some("layer") || !headers.iter().skip(3).all(|h| h.starts_with("load_e")) {
        return Err(Error::Usage(format!(
            "{}: expected header layer,winner,top_load,load_e1,...",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let bad = |what: &str| Error::Usage(format!("{}: bad {what} in row {}", path.display(), out.len() + 1));
        let layer: usize = record.get(0).and_then(|v| v.parse().ok()).ok_or_else(|| bad("layer"))?;
        let loads = record
            .iter()
            .skip(3)
            .filter(|v| !v.is_empty())
            .map(|v| v.parse::<f64>().map_err(|_| bad("load")))
            .collect::<Result<Vec<_>>>()?;
        out.push(LayerLoadProfile::from_loads(layer, loads).map_err(Error::input(path))?);
    }
    if out.is_empty() {
        return Err(Error::Usage(format!("{}: no layer rows", path.display())));
    }
    Ok(out)
}

pub fn diagnose_cmd(a: &DiagnoseArgs, exec: Execution) -> Result<String> {
    let profiles = read_profiles(&a.log)?;
    let summary = wta_metrics_with(&profiles, exec)?;
    files::write(&a.out, summary.to_csv())?;
    if let (Some(other), Some(out)) = (&a.compare, &a.compare_out) {
        let b = wta_metrics_with(&read_profiles(other)?, exec)?;
        files::write(out, compare_runs(&summary, &b)?.to_csv())?;
    }
    Ok(format!(
        "wrote {}: mean top load {:.3} over {} layers",
        a.out.display(),
        summary.mean_top_load,
        profiles.len()
    ))
}

#[derive(Args, Debug, Clone)]
pub struct TrainToyArgs {
    /// Fused model with at least one sparse layer.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 50.0)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub alpha: f64,
    /// Seeds the copy-task data.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "seq-len", default_value_t = 16)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Receives `train_log.csv`, `routing.csv` and `model.bin`.
    #[arg(long)]
    pub out: PathBuf,
}

pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const ROUTING_FILE: &str = "routing.csv";
pub const TRAINED_MODEL_FILE: &str = "model.bin";

pub fn train_toy_cmd(a: &TrainToyArgs, exec: Execution) -> Result<String> {
    let container = files::load_weights(&a.model)?;
    let mut model = Model::from_container(&container, RouterConfig::default()).map_err(Error::input(&a.model))?;
    if model.moe_layers().next().is_none() {
        return Err(Error::Usage(format!("{}: model has no sparse layer to train", a.model.display())));
    }
    let task = CopyTask::generate(model.shape.vocab_size, a.seq_len, a.batch, a.seed)?;
    let opts = TrainOptions {
        steps: a.steps,
        lr: a.lr,
        alpha: a.alpha,
        execution: exec,
    };
    let log = train_toy(&mut model, &task, &opts)?;
    let profiles = log
        .final_loads
        .iter()
        .map(|(layer, loads)| LayerLoadProfile::from_loads(*layer, loads.clone()))
        .collect::<d2m_core::Result<Vec<_>>>()
        .map_err(|e| Error::Internal(e.to_string()))?;
    files::write(&a.out.join(TRAIN_LOG_FILE), log.to_csv())?;
    files::write(&a.out.join(ROUTING_FILE), profiles_csv(&profiles))?;
    files::save_weights(&a.out.join(TRAINED_MODEL_FILE), &model.to_container())?;
    let last = log.rows.last().map_or(f64::NAN, |r| r.task_loss);
    Ok(format!(
        "wrote {}: {} steps, final task loss {last:.4}, min load {:.3}",
        a.out.display(),
        a.steps,
        log.final_min_load()
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn redundancy_syntax() {
        let r = parse_redundancy("2:1:0.05").unwrap();
        assert_eq!((r.base, r.offset, r.noise_scale), (2, 1, 0.05));
        assert!(parse_redundancy("2:1").is_err());
        assert!(parse_redundancy("a:1:0").is_err());
    }

    #[test]
    fn toy_shape_is_valid() {
        toy_shape().validate().unwrap();
    }
}
