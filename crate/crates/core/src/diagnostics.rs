//! Winner-takes-all routing metrics over per-layer top-1 dispatch loads.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::RoutingRecord;
use crate::par::Execution;

/// Top-load thresholds counted by [`wta_metrics`], strict `>`.
pub const TOP_LOAD_THRESHOLDS: [f64; 2] = [0.5, 0.4];

/// Metric names in report order.
pub const METRIC_NAMES: [&str; 6] = [
    "mean_top_load",
    "layers_top_gt_50",
    "layers_top_gt_40",
    "mean_top_uniform_ratio",
    "mean_top_bottom_gap",
    "mean_entropy",
];

#[derive(Clone, Debug, PartialEq)]
pub struct LayerLoadProfile {
    pub layer: usize,
    /// Fraction of tokens whose top-1 expert is `i` (0-based).
    pub loads: Vec<f64>,
    /// Expert with the largest load (0-based); ties go to the smaller index.
    pub winner: usize,
}

impl LayerLoadProfile {
    pub fn from_loads(layer: usize, loads: Vec<f64>) -> Result<Self> {
        if loads.is_empty() {
            return Err(Error::EmptyAssignments);
        }
        let total: f64 = loads.iter().sum();
        if loads.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::OutOfRange(format!("layer {layer} loads must be non-negative and sum to 1")));
        }
        let winner = loads
            .iter()
            .enumerate()
            .fold(0, |best, (i, &p)| if p > loads[best] { i } else { best });
        Ok(LayerLoadProfile { layer, loads, winner })
    }

    pub fn num_experts(&self) -> usize {
        self.loads.len()
    }

    pub fn top(&self) -> f64 {
        self.loads[self.winner]
    }

    pub fn bottom(&self) -> f64 {
        self.loads.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `sum -p ln p` with `0 ln 0 = 0`.
    pub fn entropy(&self) -> f64 {
        self.loads.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
    }
}

/// Profile from a list of top-1 expert assignments (0-based).
pub fn load_profile(layer: usize, assignments: &[usize], num_experts: usize) -> Result<LayerLoadProfile> {
    if assignments.is_empty() {
        return Err(Error::EmptyAssignments);
    }
    let mut counts = vec![0usize; num_experts];
    for &e in assignments {
        *counts.get_mut(e).ok_or_else(|| {
            Error::IndexOutOfRange(format!("expert {e} at layer {layer} with {num_experts} experts"))
        })? += 1;
    }
    let t = assignments.len() as f64;
    let loads: Vec<f64> = counts.into_iter().map(|c| c as f64 / t).collect();
    let winner = loads
        .iter()
        .enumerate()
        .fold(0, |best, (i, &p)| if p > loads[best] { i } else { best });
    Ok(LayerLoadProfile { layer, loads, winner })
}

pub fn record_profile(layer: usize, record: &RoutingRecord) -> Result<LayerLoadProfile> {
    load_profile(layer, &record.top1(), record.num_experts())
}

#[derive(Clone, Debug, PartialEq)]
pub struct WtaSummary {
    pub mean_top_load: f64,
    pub layers_top_gt_50: usize,
    pub layers_top_gt_40: usize,
    /// Mean of `top * N`.
    pub mean_top_uniform_ratio: f64,
    pub mean_top_bottom_gap: f64,
    pub mean_entropy: f64,
    /// `(layer, top load)` for every profile, in input order.
    pub per_layer_top: Vec<(usize, f64)>,
}

impl WtaSummary {
    pub fn values(&self) -> [f64; 6] {
        [
            self.mean_top_load,
            self.layers_top_gt_50 as f64,
            self.layers_top_gt_40 as f64,
            self.mean_top_uniform_ratio,
            self.mean_top_bottom_gap,
            self.mean_entropy,
        ]
    }

    /// CSV `metric,value` with one row per metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (name, v) in METRIC_NAMES.iter().zip(self.values()) {
            let _ = writeln!(out, "{name},{v}");
        }
        out
    }
}

pub fn wta_metrics(profiles: &[LayerLoadProfile]) -> Result<WtaSummary> {
    wta_metrics_with(profiles, Execution::default())
}

pub fn wta_metrics_with(profiles: &[LayerLoadProfile], exec: Execution) -> Result<WtaSummary> {
    if profiles.is_empty() {
        return Err(Error::EmptyAssignments);
    }
    // (top, ratio, gap, entropy) per layer
    let stats = exec.map(profiles, |p| {
        (p.top(), p.top() * p.num_experts() as f64, p.top() - p.bottom(), p.entropy())
    });
    let n = profiles.len() as f64;
    let mean = |f: fn(&(f64, f64, f64, f64)) -> f64| stats.iter().map(f).sum::<f64>() / n;
    let above = |t: f64| stats.iter().filter(|s| s.0 > t).count();
    Ok(WtaSummary {
        mean_top_load: mean(|s| s.0),
        layers_top_gt_50: above(TOP_LOAD_THRESHOLDS[0]),
        layers_top_gt_40: above(TOP_LOAD_THRESHOLDS[1]),
        mean_top_uniform_ratio: mean(|s| s.1),
        mean_top_bottom_gap: mean(|s| s.2),
        mean_entropy: mean(|s| s.3),
        per_layer_top: profiles.iter().zip(&stats).map(|(p, s)| (p.layer, s.0)).collect(),
    })
}

/// Differences `a - b`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunComparison {
    pub metric_deltas: [f64; 6],
    pub per_layer_top_deltas: Vec<f64>,
}

impl RunComparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,delta\n");
        for (name, v) in METRIC_NAMES.iter().zip(self.metric_deltas) {
            let _ = writeln!(out, "{name},{v}");
        }
        for (i, v) in self.per_layer_top_deltas.iter().enumerate() {
            let _ = writeln!(out, "layer_{}_top_load,{v}", i + 1);
        }
        out
    }
}

pub fn compare_runs(a: &WtaSummary, b: &WtaSummary) -> Result<RunComparison> {
    let (la, lb) = (a.per_layer_top.len(), b.per_layer_top.len());
    if la != lb {
        return Err(Error::LayerCountMismatch { left: la, right: lb });
    }
    let (va, vb) = (a.values(), b.values());
    Ok(RunComparison {
        metric_deltas: std::array::from_fn(|i| va[i] - vb[i]),
        per_layer_top_deltas: a
            .per_layer_top
            .iter()
            .zip(&b.per_layer_top)
            .map(|(x, y)| x.1 - y.1)
            .collect(),
    })
}

/// Per-layer CSV `layer,winner,top_load,load_e1..load_eN` (experts 1-based).
pub fn profiles_csv(profiles: &[LayerLoadProfile]) -> String {
    let width = profiles.iter().map(LayerLoadProfile::num_experts).max().unwrap_or(0);
    let mut out = String::from("layer,winner,top_load");
    for j in 1..=width {
        let _ = write!(out, ",load_e{j}");
    }
    out.push('\n');
    for p in profiles {
        let _ = write!(out, "{},{},{}", p.layer, p.winner + 1, p.top());
        for j in 0..width {
            match p.loads.get(j) {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}
