//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use d2m_core::config::{FusedBlock, FusionPlan, ModelShape, RouterConfig};
use d2m_core::model::init::{random_dense, InitOptions};
use d2m_core::model::{train_toy, CopyTask, Model, TrainOptions, TrainingLog};
use d2m_core::par::Execution;
use d2m_core::similarity::SimilarityMatrices;
use d2m_core::surgery::{fuse, FuseOptions, FusedModel};
use d2m_core::trace::{synth_trace, ActivationTrace, Redundancy};
use d2m_core::weights::WeightContainer;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn toy_shape(layers: usize) -> ModelShape {
    ModelShape {
        num_layers: layers,
        hidden_dim: 8,
        mlp_dim: 12,
        num_heads: 2,
        num_kv_heads: 1,
        head_dim: 4,
        vocab_size: 13,
        tied_embedding: true,
        moe: None,
    }
}

pub fn toy_dense(layers: usize, seed: u64) -> WeightContainer {
    let opts = InitOptions {
        std: 0.3,
        ..InitOptions::seeded(seed)
    };
    random_dense(&toy_shape(layers), &opts).unwrap()
}

/// Random plan over `layers` layers with blocks of size 1..=3.
pub fn random_plan(layers: usize, rng: &mut ChaCha8Rng) -> FusionPlan {
    let mut blocks = Vec::new();
    let mut l = 1;
    while l < layers {
        let n = rng.random_range(1..=3usize).min(layers - l);
        if rng.random_bool(0.5) {
            blocks.push(FusedBlock {
                base: l,
                redundant: (l + 1..=l + n).collect(),
            });
            l += n + 1;
        } else {
            l += 1;
        }
    }
    FusionPlan::from_blocks(layers, blocks).unwrap()
}

/// Random symmetric similarity triple with entries clustered near the
/// thresholds of interest.
pub fn random_matrices(layers: usize, rng: &mut ChaCha8Rng) -> SimilarityMatrices {
    SimilarityMatrices::from_upper(layers, |_, _| {
        let so = rng.random_range(0.85..1.0);
        let sm = rng.random_range(0.85..1.0);
        let dn = rng.random_range(0.0..0.2);
        (so, sm, dn)
    })
}

/// Straight transcription of the greedy block search on raw 0-based arrays.
pub fn reference_search(
    s_out: &Array2<f64>,
    s_mlp: &Array2<f64>,
    dn: &Array2<f64>,
    delta: f64,
    eps: f64,
    lambda: f64,
    sizes: &BTreeSet<usize>,
) -> Vec<(usize, usize)> {
    let layers = s_out.nrows();
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for l in 0..layers {
        for &n in sizes {
            if l + n >= layers {
                continue;
            }
            let mut ok = true;
            let mut total = 0.0;
            for k in 1..=n {
                let (a, b, c) = (s_out[[l, l + k]], s_mlp[[l, l + k]], dn[[l, l + k]]);
                if !(a > 1.0 - delta && b > 1.0 - delta && c < eps) {
                    ok = false;
                }
                total += (a + b) / 2.0 - lambda * c;
            }
            if ok {
                cands.push((total / n as f64, l + 1, n));
            }
        }
    }
    // repeated selection of the best remaining candidate
    let mut occupied = vec![false; layers + 1];
    let mut accepted = Vec::new();
    while !cands.is_empty() {
        let mut best = 0;
        for i in 1..cands.len() {
            let (s, l, n) = cands[i];
            let (bs, bl, bn) = cands[best];
            if s > bs || (s == bs && (l < bl || (l == bl && n < bn))) {
                best = i;
            }
        }
        let (_, l, n) = cands.remove(best);
        if (l..=l + n).all(|i| !occupied[i]) {
            for o in occupied.iter_mut().take(l + n + 1).skip(l) {
                *o = true;
            }
            accepted.push((l, n));
        }
    }
    accepted.sort();
    accepted
}

/// Similarity matrices by explicit per-token loops.
pub fn naive_matrices(trace: &ActivationTrace) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let layers = trace.num_layers();
    let cos = |a: &Array2<f64>, b: &Array2<f64>| {
        let mut sum = 0.0;
        for t in 0..a.nrows() {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for j in 0..a.ncols() {
                dot += a[[t, j]] * b[[t, j]];
                na += a[[t, j]] * a[[t, j]];
                nb += b[[t, j]] * b[[t, j]];
            }
            sum += dot / (na.sqrt() * nb.sqrt());
        }
        sum / a.nrows() as f64
    };
    let mismatch = |a: &Array2<f64>, b: &Array2<f64>| {
        let mut sum = 0.0;
        for t in 0..a.nrows() {
            let (mut na, mut nb) = (0.0, 0.0);
            for j in 0..a.ncols() {
                na += a[[t, j]] * a[[t, j]];
                nb += b[[t, j]] * b[[t, j]];
            }
            sum += (na.sqrt() - nb.sqrt()).abs() / nb.sqrt();
        }
        sum / a.nrows() as f64
    };
    let mut so = Array2::zeros((layers, layers));
    let mut sm = Array2::zeros((layers, layers));
    let mut dn = Array2::zeros((layers, layers));
    for l in 1..=layers {
        for m in 1..=layers {
            let (lo, hi) = (l.min(m), l.max(m));
            so[[l - 1, m - 1]] = cos(trace.y(lo), trace.y(hi));
            sm[[l - 1, m - 1]] = cos(trace.h(lo), trace.h(hi));
            dn[[l - 1, m - 1]] = if l == m { 0.0 } else { mismatch(trace.h(lo), trace.h(hi)) };
        }
    }
    (so, sm, dn)
}

/// 24-layer trace whose redundant layers carry graded noise, so relaxing
/// the thresholds prunes progressively more layers.
pub fn graded_trace() -> ActivationTrace {
    let redundancy = [
        Redundancy::new(2, 1, 0.05),
        Redundancy::new(2, 2, 0.10),
        Redundancy::new(6, 1, 0.15),
        Redundancy::new(10, 1, 0.20),
        Redundancy::new(10, 2, 0.25),
        Redundancy::new(10, 3, 0.30),
        Redundancy::new(16, 1, 0.35),
        Redundancy::new(20, 1, 0.40),
        Redundancy::new(20, 2, 0.45),
    ];
    synth_trace(24, 64, 32, &redundancy, 24).unwrap()
}

pub fn graded_deltas() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.01).collect()
}

pub fn graded_epsilons() -> Vec<f64> {
    vec![0.01, 0.02, 0.05, 0.1, 0.2]
}

pub const TRAIN_STEPS: usize = 500;
pub const TRAIN_LR: f64 = 50.0;
pub const TRAIN_SEED: u64 = 1;
pub const TRAIN_ALPHA: f64 = 1e-3;

/// `d = 16`, four dense layers with layer 3 fused into layer 2, `N = 4`.
pub fn training_fixture() -> (Model, CopyTask, FusedModel) {
    let shape = ModelShape {
        num_layers: 4,
        hidden_dim: 16,
        mlp_dim: 32,
        num_heads: 2,
        num_kv_heads: 1,
        head_dim: 8,
        vocab_size: 16,
        tied_embedding: true,
        moe: None,
    };
    let dense = random_dense(&shape, &InitOptions::seeded(TRAIN_SEED)).unwrap();
    let plan = FusionPlan::from_blocks(4, vec![FusedBlock { base: 2, redundant: vec![3] }]).unwrap();
    let opts = FuseOptions {
        base_copies: 2,
        supplementary_copies: 2,
        top_k: 1,
    };
    let fused = fuse(&dense, &plan, &opts).unwrap();
    let model = Model::from_container(&fused.container, RouterConfig::default()).unwrap();
    let task = CopyTask::generate(16, 16, 8, TRAIN_SEED + 1).unwrap();
    (model, task, fused)
}

pub fn train_fixture(alpha: f64, steps: usize, execution: Execution) -> TrainingLog {
    let (mut model, task, _) = training_fixture();
    let opts = TrainOptions {
        steps,
        lr: TRAIN_LR,
        alpha,
        execution,
    };
    train_toy(&mut model, &task, &opts).unwrap()
}

pub fn mean_top_load(log: &TrainingLog) -> f64 {
    let tops: Vec<f64> = log
        .final_loads
        .iter()
        .map(|(_, l)| l.iter().copied().fold(0.0, f64::max))
        .collect();
    tops.iter().sum::<f64>() / tops.len() as f64
}
