//! Shared domain types: model dimensions, hardware and workload profiles,
//! search thresholds, router settings and fusion plans.
//!
//! Layer indices are 1-based everywhere, including on disk.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architectural dimensions of a decoder-only transformer, optionally sparse.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub mlp_dim: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    #[serde(default = "default_true")]
    pub tied_embedding: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe: Option<MoEShape>,
}

fn default_true() -> bool {
    true
}

/// Expert pool layout of a fused layer: `num_experts = base_copies + n* x supplementary_copies`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoEShape {
    pub num_experts: usize,
    pub top_k: usize,
    pub base_copies: usize,
    pub supplementary_copies: usize,
}

impl MoEShape {
    /// Pool size of a fused layer that absorbs `redundant` layers.
    pub fn pool_size(&self, redundant: usize) -> usize {
        self.base_copies + redundant * self.supplementary_copies
    }
}

fn positive(field: &'static str, value: usize) -> Result<()> {
    if value == 0 {
        return Err(Error::InvalidShape {
            field,
            reason: "must be strictly positive".into(),
        });
    }
    Ok(())
}

impl ModelShape {
    /// Qwen2.5-0.5B dense seed model.
    pub fn qwen25_05b() -> Self {
        ModelShape {
            num_layers: 24,
            hidden_dim: 896,
            mlp_dim: 4864,
            num_heads: 14,
            num_kv_heads: 2,
            head_dim: 64,
            vocab_size: 151_936,
            tied_embedding: true,
            moe: None,
        }
    }

    pub fn validate(self) -> Result<Self> {
        positive("num_layers", self.num_layers)?;
        positive("hidden_dim", self.hidden_dim)?;
        positive("mlp_dim", self.mlp_dim)?;
        positive("num_heads", self.num_heads)?;
        positive("num_kv_heads", self.num_kv_heads)?;
        positive("head_dim", self.head_dim)?;
        positive("vocab_size", self.vocab_size)?;
        if !self.num_heads.is_multiple_of(self.num_kv_heads) {
            return Err(Error::InvalidShape {
                field: "num_kv_heads",
                reason: format!(
                    "num_heads {} is not divisible by num_kv_heads {}",
                    self.num_heads, self.num_kv_heads
                ),
            });
        }
        if let Some(moe) = &self.moe {
            moe.validate()?;
        }
        Ok(self)
    }

    /// Query heads per key/value head.
    pub fn gqa_ratio(&self) -> usize {
        self.num_heads / self.num_kv_heads
    }

    /// Experts evaluated per token (1 for dense layers).
    pub fn active_experts(&self) -> usize {
        self.moe.map_or(1, |m| m.top_k)
    }

    /// Total experts per layer (1 for dense layers).
    pub fn total_experts(&self) -> usize {
        self.moe.map_or(1, |m| m.num_experts)
    }

    pub fn with_layers(&self, num_layers: usize) -> Self {
        ModelShape {
            num_layers,
            ..self.clone()
        }
    }

    pub fn with_moe(&self, moe: Option<MoEShape>) -> Self {
        ModelShape { moe, ..self.clone() }
    }
}

impl MoEShape {
    pub fn validate(&self) -> Result<()> {
        positive("moe.num_experts", self.num_experts)?;
        positive("moe.top_k", self.top_k)?;
        positive("moe.base_copies", self.base_copies)?;
        positive("moe.supplementary_copies", self.supplementary_copies)?;
        if self.top_k > self.num_experts {
            return Err(Error::InvalidShape {
                field: "moe.top_k",
                reason: format!(
                    "top_k {} exceeds num_experts {}",
                    self.top_k, self.num_experts
                ),
            });
        }
        Ok(())
    }
}

/// Peak compute and memory bandwidth of a deployment target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    /// FLOP/s.
    pub peak_flops: f64,
    /// bytes/s.
    pub mem_bandwidth: f64,
    #[serde(default = "two")]
    pub weight_bytes: f64,
    #[serde(default = "two")]
    pub kv_bytes: f64,
}

fn two() -> f64 {
    2.0
}

impl HardwareProfile {
    /// Jetson Thor-U: 350 TFLOPS FP16, 273 GB/s.
    pub fn thor_u() -> Self {
        HardwareProfile {
            peak_flops: 350e12,
            mem_bandwidth: 273e9,
            weight_bytes: 2.0,
            kv_bytes: 2.0,
        }
    }

    pub fn validate(self) -> Result<Self> {
        for (field, v) in [
            ("hardware.peak_flops", self.peak_flops),
            ("hardware.mem_bandwidth", self.mem_bandwidth),
            ("hardware.weight_bytes", self.weight_bytes),
            ("hardware.kv_bytes", self.kv_bytes),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{field} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    pub batch: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
}

impl Default for Workload {
    fn default() -> Self {
        Workload {
            batch: 1,
            prompt_len: 1000,
            gen_len: 50,
        }
    }
}

impl Workload {
    pub fn validate(self) -> Result<Self> {
        if self.prompt_len == 0 || self.gen_len == 0 {
            return Err(Error::InvalidConfig(
                "workload.prompt_len and workload.gen_len must be at least 1".into(),
            ));
        }
        if self.batch == 0 {
            return Err(Error::InvalidConfig("workload.batch must be at least 1".into()));
        }
        Ok(self)
    }
}

/// Thresholds of the redundant-block search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchThresholds {
    /// Cosine slack: a block needs similarity `> 1 - cos_threshold`.
    pub cos_threshold: f64,
    /// Relative norm tolerance: a block needs mismatch `< norm_tolerance`.
    pub norm_tolerance: f64,
    #[serde(default = "one")]
    pub score_penalty: f64,
    #[serde(default = "default_block_sizes")]
    pub block_sizes: BTreeSet<usize>,
}

fn one() -> f64 {
    1.0
}

fn default_block_sizes() -> BTreeSet<usize> {
    [1, 2, 3].into_iter().collect()
}

impl SearchThresholds {
    pub fn new(cos_threshold: f64, norm_tolerance: f64) -> Self {
        SearchThresholds {
            cos_threshold,
            norm_tolerance,
            score_penalty: 1.0,
            block_sizes: default_block_sizes(),
        }
    }

    pub fn validate(self) -> Result<Self> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.cos_threshold) {
            return Err(Error::InvalidConfig(format!(
                "cos_threshold must lie in (0, 1), got {}",
                self.cos_threshold
            )));
        }
        if !open_unit(self.norm_tolerance) {
            return Err(Error::InvalidConfig(format!(
                "norm_tolerance must lie in (0, 1), got {}",
                self.norm_tolerance
            )));
        }
        if !(self.score_penalty >= 0.0 && self.score_penalty.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "score_penalty must be non-negative, got {}",
                self.score_penalty
            )));
        }
        if self.block_sizes.is_empty() || self.block_sizes.contains(&0) {
            return Err(Error::InvalidConfig(
                "block_sizes must be a non-empty set of positive sizes".into(),
            ));
        }
        Ok(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterConfig {
    pub temperature: f64,
    pub aux_loss_weight: f64,
    pub renormalize_top_k: bool,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            temperature: 1.0,
            aux_loss_weight: 1e-3,
            renormalize_top_k: false,
        }
    }
}

impl RouterConfig {
    pub fn validate(self) -> Result<Self> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "router.temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.aux_loss_weight >= 0.0 && self.aux_loss_weight.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "router.aux_loss_weight must be non-negative, got {}",
                self.aux_loss_weight
            )));
        }
        Ok(self)
    }
}

/// One fused block: a retained base layer and the contiguous run that follows it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusedBlock {
    pub base: usize,
    pub redundant: Vec<usize>,
}

/// Output of the redundant-block search.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionPlan {
    pub keep: Vec<usize>,
    pub prune: Vec<usize>,
    pub blocks: Vec<FusedBlock>,
}

impl FusionPlan {
    /// Plan that keeps every layer of an `num_layers`-deep model.
    pub fn identity(num_layers: usize) -> Self {
        FusionPlan {
            keep: (1..=num_layers).collect(),
            prune: Vec::new(),
            blocks: Vec::new(),
        }
    }

    /// Builds a plan from blocks, deriving keep/prune sets and checking invariants.
    pub fn from_blocks(num_layers: usize, mut blocks: Vec<FusedBlock>) -> Result<Self> {
        blocks.sort_by_key(|b| b.base);
        let mut prune: Vec<usize> = blocks.iter().flat_map(|b| b.redundant.iter().copied()).collect();
        prune.sort_unstable();
        let keep = (1..=num_layers).filter(|l| prune.binary_search(l).is_err()).collect();
        let plan = FusionPlan { keep, prune, blocks };
        plan.validate(num_layers)?;
        Ok(plan)
    }

    pub fn num_layers(&self) -> usize {
        self.keep.len() + self.prune.len()
    }

    pub fn retained_depth(&self) -> usize {
        self.keep.len()
    }

    /// Checks coverage, disjointness and contiguity in O(L).
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPlan(m));
        // 0 = unseen, 1 = kept, 2 = pruned
        let mut state = vec![0u8; num_layers + 1];
        for &l in &self.keep {
            if l == 0 || l > num_layers {
                return bad(format!("kept layer {l} outside 1..={num_layers}"));
            }
            if state[l] != 0 {
                return bad(format!("layer {l} listed twice"));
            }
            state[l] = 1;
        }
        if self.keep.windows(2).any(|w| w[0] >= w[1]) {
            return bad("kept layers are not in ascending order".into());
        }
        for &l in &self.prune {
            if l == 0 || l > num_layers {
                return bad(format!("pruned layer {l} outside 1..={num_layers}"));
            }
            if state[l] != 0 {
                return bad(format!("layer {l} is both kept and pruned, or listed twice"));
            }
            state[l] = 2;
        }
        if let Some(l) = (1..=num_layers).find(|&l| state[l] == 0) {
            return bad(format!("layer {l} is neither kept nor pruned"));
        }
        // every layer claimed by at most one block; every pruned layer by exactly one
        let mut claimed = vec![false; num_layers + 1];
        for block in &self.blocks {
            if block.base == 0 || block.base > num_layers || state[block.base] != 1 {
                return bad(format!("block base {} is not a kept layer", block.base));
            }
            if block.redundant.is_empty() {
                return bad(format!("block at base {} has no redundant layers", block.base));
            }
            for (i, &r) in block.redundant.iter().enumerate() {
                if r != block.base + i + 1 {
                    return bad(format!(
                        "block at base {} is not a contiguous run following the base",
                        block.base
                    ));
                }
                if r > num_layers || state[r] != 2 {
                    return bad(format!("redundant layer {r} is not marked pruned"));
                }
            }
            let span = block.base..=block.base + block.redundant.len();
            if let Some(l) = span.clone().find(|&l| claimed[l]) {
                return bad(format!("layer {l} belongs to more than one block"));
            }
            claimed[span].fill(true);
        }
        if let Some(&l) = self.prune.iter().find(|&&l| !claimed[l]) {
            return bad(format!("pruned layer {l} belongs to no block"));
        }
        Ok(())
    }

    /// Block whose base is `layer`, if any.
    pub fn block_at(&self, layer: usize) -> Option<&FusedBlock> {
        self.blocks.iter().find(|b| b.base == layer)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: FusionPlan = serde_json::from_str(s)?;
        plan.validate(plan.num_layers())?;
        Ok(plan)
    }
}

/// Top-level configuration document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelShape,
    pub hardware: HardwareProfile,
    #[serde(default)]
    pub workload: Workload,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<SearchThresholds>,
    #[serde(default)]
    pub router: RouterConfig,
}

impl Config {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(s)?;
        cfg.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(self) -> Result<Self> {
        Ok(Config {
            model: self.model.validate()?,
            hardware: self.hardware.validate()?,
            workload: self.workload.validate()?,
            thresholds: self.thresholds.map(SearchThresholds::validate).transpose()?,
            router: self.router.validate()?,
        })
    }
}
