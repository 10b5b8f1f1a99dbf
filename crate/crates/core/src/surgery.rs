//! Layer-fusion upcycling: turn each fused block of a dense model into one
//! MoE layer whose experts are copies of the block's MLPs.
//!
//! The base layer keeps its attention and both norms. Its expert pool holds
//! `K` copies of its own MLP followed by `M` copies of each redundant layer's
//! MLP, in layer order. Redundant layers lose their attention and norms, and
//! every router starts at zero (uniform routing).

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::config::{FusionPlan, MoEShape, RouterConfig};
use crate::error::{Error, Result};
use crate::model::{ExpertSource, ForwardOptions, Model, RouteOverride};
use crate::weights::{expert_prefix, layer_prefix, LayerKind, WeightContainer, ATTENTION_TENSORS, MLP_TENSORS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FuseOptions {
    /// `K`, copies of the base layer's MLP.
    pub base_copies: usize,
    /// `M`, copies of each redundant layer's MLP.
    pub supplementary_copies: usize,
    pub top_k: usize,
}

impl Default for FuseOptions {
    /// `K = 4`, `M = 2`, top-1.
    fn default() -> Self {
        FuseOptions {
            base_copies: 4,
            supplementary_copies: 2,
            top_k: 1,
        }
    }
}

/// Expert origins of one fused layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerProvenance {
    /// 1-based index in the fused model.
    pub layer: usize,
    /// 1-based index of the base layer in the dense model.
    pub base: usize,
    pub experts: Vec<ExpertSource>,
}

pub fn provenance_to_json(p: &[LayerProvenance]) -> String {
    serde_json::to_string_pretty(p).expect("provenance serializes")
}

pub fn provenance_from_json(s: &str) -> Result<Vec<LayerProvenance>> {
    Ok(serde_json::from_str(s)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedModel {
    pub container: WeightContainer,
    pub provenance: Vec<LayerProvenance>,
}

/// Expert layout of a block absorbing `redundant`.
pub fn expert_layout(redundant: &[usize], opts: &FuseOptions) -> Vec<ExpertSource> {
    let mut out: Vec<ExpertSource> = (1..=opts.base_copies)
        .map(|copy| ExpertSource::BaseCopy { copy })
        .collect();
    for &layer in redundant {
        out.extend((1..=opts.supplementary_copies).map(|copy| ExpertSource::Redundant { layer, copy }));
    }
    out
}

fn source_layer(base: usize, src: ExpertSource) -> usize {
    match src {
        ExpertSource::BaseCopy { .. } => base,
        ExpertSource::Redundant { layer, .. } => layer,
    }
}

fn check_dense_input(dense: &WeightContainer, plan: &FusionPlan) -> Result<()> {
    dense.validate()?;
    let layers = dense.shape.num_layers;
    if let Some(l) = dense.layer_kinds().iter().position(|k| *k != LayerKind::Dense) {
        return Err(Error::PlanModelMismatch(format!("layer {} of the input is already sparse", l + 1)));
    }
    if plan.num_layers() != layers {
        return Err(Error::PlanModelMismatch(format!(
            "plan covers {} layers, model has {layers}",
            plan.num_layers()
        )));
    }
    plan.validate(layers)
}

fn copy_tensor(src: &WeightContainer, from: &str, dst: &mut WeightContainer, to: String) -> Result<()> {
    dst.insert(to, src.get(from)?.clone());
    Ok(())
}

/// Builds the fused model and the per-layer expert provenance.
pub fn fuse(dense: &WeightContainer, plan: &FusionPlan, opts: &FuseOptions) -> Result<FusedModel> {
    check_dense_input(dense, plan)?;
    if opts.base_copies == 0 || opts.supplementary_copies == 0 {
        return Err(Error::InvalidShape {
            field: "moe.base_copies",
            reason: "base and supplementary copies must be at least 1".into(),
        });
    }
    let pools: Vec<usize> = plan
        .blocks
        .iter()
        .map(|b| opts.base_copies + b.redundant.len() * opts.supplementary_copies)
        .collect();
    let mut shape = dense.shape.with_layers(plan.retained_depth());
    if let (Some(&min), Some(&max)) = (pools.iter().min(), pools.iter().max()) {
        if opts.top_k == 0 || opts.top_k > min {
            return Err(Error::InvalidShape {
                field: "moe.top_k",
                reason: format!("top_k {} with a smallest expert pool of {min}", opts.top_k),
            });
        }
        shape.moe = Some(MoEShape {
            num_experts: max,
            top_k: opts.top_k,
            base_copies: opts.base_copies,
            supplementary_copies: opts.supplementary_copies,
        });
    }

    let mut out = WeightContainer::new(shape);
    for name in ["embed", "lm_head", "final_norm"] {
        if let Some(t) = dense.tensors.get(name) {
            out.insert(name, t.clone());
        }
    }
    let d = dense.shape.hidden_dim;
    let mut provenance = Vec::new();
    for (i, &orig) in plan.keep.iter().enumerate() {
        let (src, dst) = (layer_prefix(orig), layer_prefix(i + 1));
        for norm in ["attn_norm", "mlp_norm"] {
            copy_tensor(dense, &format!("{src}.{norm}"), &mut out, format!("{dst}.{norm}"))?;
        }
        for t in ATTENTION_TENSORS {
            copy_tensor(dense, &format!("{src}.attn.{t}"), &mut out, format!("{dst}.attn.{t}"))?;
        }
        match plan.block_at(orig) {
            None => {
                for t in MLP_TENSORS {
                    copy_tensor(dense, &format!("{src}.mlp.{t}"), &mut out, format!("{dst}.mlp.{t}"))?;
                }
            }
            Some(block) => {
                let experts = expert_layout(&block.redundant, opts);
                out.insert(format!("{dst}.router"), ArrayD::zeros(IxDyn(&[d, experts.len()])));
                for (j, &e) in experts.iter().enumerate() {
                    let from = layer_prefix(source_layer(orig, e));
                    let to = expert_prefix(i + 1, j + 1);
                    for t in MLP_TENSORS {
                        copy_tensor(dense, &format!("{from}.mlp.{t}"), &mut out, format!("{to}.{t}"))?;
                    }
                }
                provenance.push(LayerProvenance {
                    layer: i + 1,
                    base: orig,
                    experts,
                });
            }
        }
    }
    out.validate()?;
    Ok(FusedModel {
        container: out,
        provenance,
    })
}

/// Parameter count the fused model must have: the dense count minus the
/// redundant layers' attention and norms, plus `(N - 1 - n*)` extra MLPs and
/// an `N x d` router per block.
pub fn expected_fused_params(dense: &DenseParamGroups, plan: &FusionPlan, opts: &FuseOptions) -> usize {
    let mut total = dense.total;
    for b in &plan.blocks {
        let n_red = b.redundant.len();
        let pool = opts.base_copies + n_red * opts.supplementary_copies;
        total -= n_red * (dense.attention + dense.norms);
        total += (pool - 1 - n_red) * dense.mlp + pool * dense.hidden_dim;
    }
    total
}

/// Per-layer parameter groups of a dense container, read from tensor sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseParamGroups {
    pub total: usize,
    pub attention: usize,
    pub norms: usize,
    pub mlp: usize,
    pub hidden_dim: usize,
}

impl DenseParamGroups {
    pub fn of(dense: &WeightContainer) -> Result<Self> {
        let size = |name: String| dense.get(&name).map(|t| t.len());
        let attention = ATTENTION_TENSORS
            .iter()
            .map(|t| size(format!("layer.1.attn.{t}")))
            .sum::<Result<usize>>()?;
        let norms = size("layer.1.attn_norm".into())? + size("layer.1.mlp_norm".into())?;
        let mlp = MLP_TENSORS
            .iter()
            .map(|t| size(format!("layer.1.mlp.{t}")))
            .sum::<Result<usize>>()?;
        Ok(DenseParamGroups {
            total: dense.param_count(),
            attention,
            norms,
            mlp,
            hidden_dim: dense.shape.hidden_dim,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FusionReport {
    pub checks: Vec<Check>,
}

impl FusionReport {
    fn record(&mut self, name: &str, failure: Option<String>) {
        self.checks.push(Check {
            name: name.to_string(),
            passed: failure.is_none(),
            detail: failure.unwrap_or_default(),
        });
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn first_failure(&self) -> Option<&Check> {
        self.checks.iter().find(|c| !c.passed)
    }
}

fn same(a: &WeightContainer, an: &str, b: &WeightContainer, bn: &str) -> Option<String> {
    match (a.tensors.get(an), b.tensors.get(bn)) {
        (Some(x), Some(y)) if x.shape() == y.shape() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()) => None,
        (Some(_), Some(_)) => Some(format!("{bn} differs from {an}")),
        (None, _) => Some(format!("{an} missing from the dense model")),
        (_, None) => Some(format!("{bn} missing from the fused model")),
    }
}

/// Runs every structural check, recording pass/fail without stopping.
pub fn verify_fusion_report(
    dense: &WeightContainer,
    fused: &WeightContainer,
    plan: &FusionPlan,
    provenance: &[LayerProvenance],
) -> FusionReport {
    let mut report = FusionReport::default();

    let depth = (fused.shape.num_layers == plan.retained_depth())
        .then_some(())
        .map_or_else(
            || {
                Some(format!(
                    "fused model has {} layers, plan keeps {}",
                    fused.shape.num_layers,
                    plan.retained_depth()
                ))
            },
            |_| None,
        );
    report.record("depth", depth);

    let globals = ["embed", "lm_head", "final_norm"]
        .iter()
        .filter(|n| dense.tensors.contains_key(**n) || fused.tensors.contains_key(**n))
        .find_map(|n| same(dense, n, fused, n));
    report.record("globals", globals);

    // provenance must match the plan's blocks and the canonical layout
    let layout = plan.blocks.iter().find_map(|b| {
        let Some(i) = plan.keep.iter().position(|&k| k == b.base) else {
            return Some(format!("base {} not kept", b.base));
        };
        match provenance.iter().find(|p| p.base == b.base) {
            None => Some(format!("no provenance for base layer {}", b.base)),
            Some(p) if p.layer != i + 1 => Some(format!("base layer {} recorded at fused layer {}", b.base, p.layer)),
            Some(p) => {
                let k = p.experts.iter().filter(|e| matches!(e, ExpertSource::BaseCopy { .. })).count();
                let m = fused.shape.moe.map_or(0, |s| s.supplementary_copies);
                let ok = k >= 1
                    && p.experts.len() == k + b.redundant.len() * m
                    && b.redundant.iter().all(|&r| {
                        p.experts
                            .iter()
                            .filter(|e| matches!(e, ExpertSource::Redundant { layer, .. } if *layer == r))
                            .count()
                            == m
                    });
                (!ok).then(|| format!("expert pool of base layer {} does not match K + n*M", b.base))
            }
        }
    });
    let layout = layout.or_else(|| {
        (provenance.len() != plan.blocks.len())
            .then(|| format!("{} provenance entries for {} blocks", provenance.len(), plan.blocks.len()))
    });
    report.record("provenance_layout", layout);

    let mut attention = None;
    let mut passthrough = None;
    let mut experts = None;
    let mut routers = None;
    for (i, &orig) in plan.keep.iter().enumerate() {
        let (src, dst) = (layer_prefix(orig), layer_prefix(i + 1));
        let attn_fail = ["attn_norm", "mlp_norm"]
            .iter()
            .map(|n| n.to_string())
            .chain(ATTENTION_TENSORS.iter().map(|t| format!("attn.{t}")))
            .find_map(|t| same(dense, &format!("{src}.{t}"), fused, &format!("{dst}.{t}")));
        attention = attention.or(attn_fail);
        match provenance.iter().find(|p| p.base == orig) {
            None => {
                let fail = MLP_TENSORS
                    .iter()
                    .find_map(|t| same(dense, &format!("{src}.mlp.{t}"), fused, &format!("{dst}.mlp.{t}")));
                passthrough = passthrough.or(fail);
            }
            Some(p) => {
                for (j, &e) in p.experts.iter().enumerate() {
                    let from = layer_prefix(source_layer(orig, e));
                    let to = expert_prefix(i + 1, j + 1);
                    let fail = MLP_TENSORS
                        .iter()
                        .find_map(|t| same(dense, &format!("{from}.mlp.{t}"), fused, &format!("{to}.{t}")));
                    experts = experts.or(fail);
                }
                let name = format!("{dst}.router");
                let fail = match fused.tensors.get(&name) {
                    None => Some(format!("{name} missing")),
                    Some(r) if r.shape() != [dense.shape.hidden_dim, p.experts.len()] => {
                        Some(format!("{name} has dims {:?}", r.shape()))
                    }
                    Some(r) if r.iter().any(|&v| v.to_bits() != 0) => Some(format!("{name} is not all zeros")),
                    Some(_) => None,
                };
                routers = routers.or(fail);
            }
        }
    }
    report.record("attention_and_norms", attention);
    report.record("passthrough_mlps", passthrough);
    report.record("expert_copies", experts);
    report.record("zero_routers", routers);

    // anything beyond the expected layout is a leftover of pruning or a
    // per-expert norm that breaks the shared-norm structure
    let expected = WeightContainer::expected_tensors(&fused.shape, &fused.layer_kinds());
    let extras: Vec<&String> = fused.tensors.keys().filter(|k| !expected.contains_key(*k)).collect();
    let shared_ln = extras
        .iter()
        .find(|k| k.contains(".moe.") && k.ends_with("norm"))
        .map(|k| format!("{k} duplicates the shared MLP norm"));
    report.record("shared_norm", shared_ln);
    let pruned = extras
        .iter()
        .find(|k| !(k.contains(".moe.") && k.ends_with("norm")))
        .map(|k| format!("unexpected tensor {k}"))
        .or_else(|| {
            expected
                .keys()
                .find(|k| !fused.tensors.contains_key(*k))
                .map(|k| format!("missing tensor {k}"))
        });
    report.record("pruned_layers_absent", pruned);
    report
}

/// Like [`verify_fusion_report`], failing on the first failed check.
pub fn verify_fusion(
    dense: &WeightContainer,
    fused: &WeightContainer,
    plan: &FusionPlan,
    provenance: &[LayerProvenance],
) -> Result<FusionReport> {
    let report = verify_fusion_report(dense, fused, plan, provenance);
    match report.first_failure() {
        Some(c) => Err(Error::VerificationFailure {
            check: c.name.clone(),
            detail: c.detail.clone(),
        }),
        None => Ok(report),
    }
}

/// Dense model with every block's redundant layers deleted.
pub fn pruned_reference(dense: &WeightContainer, plan: &FusionPlan) -> Result<WeightContainer> {
    check_dense_input(dense, plan)?;
    let mut out = WeightContainer::new(dense.shape.with_layers(plan.retained_depth()));
    for name in ["embed", "lm_head", "final_norm"] {
        if let Some(t) = dense.tensors.get(name) {
            out.insert(name, t.clone());
        }
    }
    for (i, &orig) in plan.keep.iter().enumerate() {
        let src = format!("{}.", layer_prefix(orig));
        let dst = format!("{}.", layer_prefix(i + 1));
        for (name, t) in dense.tensors.range(src.clone()..) {
            let Some(rest) = name.strip_prefix(&src) else { break };
            out.insert(format!("{dst}{rest}"), t.clone());
        }
    }
    out.validate()?;
    Ok(out)
}

/// Max absolute deviation between the fused model, with every token forced
/// onto expert 1 (the first base copy) at gate 1, and the dense model with
/// the redundant layers deleted.
pub fn functional_equivalence_check(
    dense: &WeightContainer,
    fused: &WeightContainer,
    plan: &FusionPlan,
    probe: &Array2<f64>,
) -> Result<f64> {
    let reference = Model::from_container(&pruned_reference(dense, plan)?, RouterConfig::default())?;
    let sparse = Model::from_container(fused, RouterConfig::default())?;
    let forced = ForwardOptions {
        routing: RouteOverride::Force { expert: 0, gate: 1.0 },
    };
    let a = reference.forward(probe, &ForwardOptions::default())?.final_state;
    let b = sparse.forward(probe, &forced)?.final_state;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}
