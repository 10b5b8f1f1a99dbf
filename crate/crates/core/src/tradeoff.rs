//! Latency-penalized reward, exponent calibration and Pareto filtering.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `score * (latency / base_latency)^w`.
pub fn reward(score: f64, latency_ms: f64, base_latency_ms: f64, w: f64) -> Result<f64> {
    for lat in [latency_ms, base_latency_ms] {
        if !(lat.is_finite() && lat > 0.0) {
            return Err(Error::NonPositiveLatency(lat));
        }
    }
    Ok(score * (latency_ms / base_latency_ms).powf(w))
}

/// Exponent that keeps the reward constant when scaling latency by `factor`
/// buys a relative score gain `gain`: `w = -ln(gain) / ln(factor)`.
pub fn calibrate_w(factor: f64, gain: f64) -> Result<f64> {
    if factor == 1.0 {
        return Err(Error::DegenerateCalibration);
    }
    if !(factor.is_finite() && factor > 1.0 && gain.is_finite() && gain > 0.0) {
        return Err(Error::OutOfRange(format!(
            "calibration needs factor > 1 and gain > 0 (got {factor}, {gain})"
        )));
    }
    Ok(-gain.ln() / factor.ln())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateEvaluation {
    pub config_id: String,
    pub depth: usize,
    pub latency_ms: f64,
    pub score: f64,
    pub reward: Option<f64>,
}

impl CandidateEvaluation {
    pub fn new(config_id: impl Into<String>, depth: usize, latency_ms: f64, score: f64) -> Self {
        CandidateEvaluation {
            config_id: config_id.into(),
            depth,
            latency_ms,
            score,
            reward: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluated {
    pub candidates: Vec<CandidateEvaluation>,
    /// Index of the highest reward; ties go to the lower latency, then the earlier row.
    pub best: usize,
}

impl Evaluated {
    pub fn best(&self) -> &CandidateEvaluation {
        &self.candidates[self.best]
    }
}

pub fn evaluate_candidates(candidates: &[CandidateEvaluation], base_latency_ms: f64, w: f64) -> Result<Evaluated> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("no candidates to evaluate".into()));
    }
    let mut out = candidates.to_vec();
    for c in &mut out {
        if !(c.score.is_finite() && c.score >= 0.0) {
            return Err(Error::OutOfRange(format!("score {} of {}", c.score, c.config_id)));
        }
        c.reward = Some(reward(c.score, c.latency_ms, base_latency_ms, w)?);
    }
    let mut best = 0;
    for (i, c) in out.iter().enumerate().skip(1) {
        let (r, b) = (c.reward.unwrap_or(f64::NAN), out[best].reward.unwrap_or(f64::NAN));
        if r > b || (r == b && c.latency_ms < out[best].latency_ms) {
            best = i;
        }
    }
    Ok(Evaluated { candidates: out, best })
}

/// CSV `config_id,depth,latency_ms,score,reward`, rewards to two decimals.
pub fn candidates_csv(candidates: &[CandidateEvaluation]) -> String {
    let mut out = String::from("config_id,depth,latency_ms,score,reward\n");
    for c in candidates {
        let reward = c.reward.map(|r| format!("{r:.2}")).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{}", c.config_id, c.depth, c.latency_ms, c.score, reward);
    }
    out
}

/// Indices of the points not dominated under lower latency / higher score,
/// sorted by latency ascending (then score descending, then index).
///
/// `q` dominates `p` when it is no slower and no worse, and strictly better
/// in at least one of the two. Identical points never dominate each other.
pub fn pareto_frontier(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .0
            .total_cmp(&points[b].0)
            .then(points[b].1.total_cmp(&points[a].1))
            .then(a.cmp(&b))
    });
    let mut out = Vec::new();
    // best score among strictly faster points
    let mut faster_best = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let lat = points[order[i]].0;
        let group_end = order[i..].iter().position(|&j| points[j].0 != lat).map_or(order.len(), |p| i + p);
        let top = points[order[i]].1;
        for &j in &order[i..group_end] {
            if points[j].1 == top && top > faster_best {
                out.push(j);
            }
        }
        faster_best = faster_best.max(top);
        i = group_end;
    }
    out
}
