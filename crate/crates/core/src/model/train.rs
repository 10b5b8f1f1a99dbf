//! Toy full-batch training of routers and experts on a synthetic copy task.
//!
//! Attention, norms and embeddings stay frozen. The task gradient reaches
//! each MoE layer along the residual stream: the upstream gradient of every
//! MoE output is the gradient at the final residual state, since backprop
//! through attention is out of scope for the toy harness.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::forward::{cross_entropy, ForwardOptions};
use super::grad::{moe_backward, MoeGradients};
use super::loss::layer_balance;
use super::ops::layer_norm_row_backward;
use super::Model;
use crate::error::{Error, Result};
use crate::par::Execution;

/// Fixed batch of sequences whose second half repeats the first half.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CopyTask {
    pub sequences: Vec<Vec<usize>>,
}

impl CopyTask {
    pub fn generate(vocab: usize, seq_len: usize, batch: usize, seed: u64) -> Result<Self> {
        if vocab == 0 || seq_len < 2 || batch == 0 {
            return Err(Error::OutOfRange(format!(
                "copy task needs vocab > 0, seq_len >= 2, batch > 0 (got {vocab}, {seq_len}, {batch})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = seq_len.div_ceil(2);
        let sequences = (0..batch)
            .map(|_| {
                let prefix: Vec<usize> = (0..half).map(|_| rng.random_range(0..vocab)).collect();
                prefix.iter().chain(prefix.iter()).copied().take(seq_len).collect()
            })
            .collect();
        Ok(CopyTask { sequences })
    }

    pub fn num_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    /// Weight of the load-balancing term.
    pub alpha: f64,
    pub execution: Execution,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub task_loss: f64,
    /// Unweighted balance term `N * sum_i f_i P_i`, summed over MoE layers.
    pub lb_loss: f64,
    /// Top-1 dispatch fractions pooled over every MoE layer.
    pub loads: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingLog {
    pub num_experts: usize,
    pub rows: Vec<LogRow>,
    /// Per-MoE-layer `(layer index, top-1 fractions)` after the last update.
    pub final_loads: Vec<(usize, Vec<f64>)>,
}

impl TrainingLog {
    /// CSV with header `step,task_loss,lb_loss,load_e1,...,load_eN`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,task_loss,lb_loss");
        for j in 1..=self.num_experts {
            let _ = write!(out, ",load_e{j}");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{},{:e},{:e}", row.step, row.task_loss, row.lb_loss);
            for l in &row.loads {
                let _ = write!(out, ",{l:e}");
            }
            out.push('\n');
        }
        out
    }

    /// Smallest final dispatch fraction over all MoE layers and experts.
    pub fn final_min_load(&self) -> f64 {
        self.final_loads
            .iter()
            .flat_map(|(_, l)| l.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }
}

struct SeqResult {
    task_loss: f64,
    balance: f64,
    counts: Vec<Vec<usize>>,
    grads: Vec<MoeGradients>,
}

fn run_sequence(model: &Model, tokens: &[usize], alpha: f64, with_grads: bool) -> Result<SeqResult> {
    let x = model.embed_tokens(tokens)?;
    let out = model.forward(&x, &ForwardOptions::default())?;
    let logits = model.logits(&out.final_state);
    let (task_loss, dlogits) = cross_entropy(&logits, tokens);

    let upstream = if with_grads {
        let dnormed = match &model.lm_head {
            Some(head) => dlogits.dot(&head.t()),
            None => dlogits.dot(&model.embed),
        };
        let mut g = Array2::zeros(out.final_state.raw_dim());
        for t in 0..g.nrows() {
            g.row_mut(t).assign(&layer_norm_row_backward(
                out.final_state.row(t),
                model.final_norm.view(),
                dnormed.row(t),
            ));
        }
        Some(g)
    } else {
        None
    };

    let mut balance = 0.0;
    let mut counts = Vec::new();
    let mut grads = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        let (Some(moe), Some(record)) = (layer.as_moe(), out.routing[i].as_ref()) else {
            continue;
        };
        balance += layer_balance(record, 1.0);
        let mut c = vec![0usize; moe.num_experts()];
        for e in record.top1() {
            c[e] += 1;
        }
        counts.push(c);
        if let Some(up) = &upstream {
            grads.push(moe_backward(moe, &out.trace.mlp_inputs[i], record, up, alpha));
        }
    }
    Ok(SeqResult {
        task_loss,
        balance,
        counts,
        grads,
    })
}

fn pooled_fractions(counts: &[Vec<usize>], width: usize) -> Vec<f64> {
    let mut pooled = vec![0usize; width];
    for layer in counts {
        for (p, c) in pooled.iter_mut().zip(layer) {
            *p += c;
        }
    }
    let total: usize = pooled.iter().sum();
    pooled.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
}

/// Full-batch gradient descent on every router and expert of `model`.
pub fn train_toy(model: &mut Model, task: &CopyTask, opts: &TrainOptions) -> Result<TrainingLog> {
    let moe_indices: Vec<usize> = model.moe_layers().map(|(l, _)| l).collect();
    if moe_indices.is_empty() {
        return Err(Error::InvalidShape {
            field: "moe",
            reason: "training needs at least one MoE layer".into(),
        });
    }
    if !(opts.lr.is_finite() && opts.lr >= 0.0 && opts.alpha.is_finite() && opts.alpha >= 0.0) {
        return Err(Error::OutOfRange("lr and alpha must be non-negative".into()));
    }
    let num_experts = model.moe_layers().map(|(_, m)| m.num_experts()).max().unwrap_or(0);
    let batch = task.sequences.len() as f64;
    let mut rows = Vec::with_capacity(opts.steps);

    for step in 0..opts.steps {
        let results = opts
            .execution
            .map(&task.sequences, |seq| run_sequence(model, seq, opts.alpha, true));
        let mut task_loss = 0.0;
        let mut balance = 0.0;
        let mut counts: Vec<Vec<usize>> = Vec::new();
        let mut total: Option<Vec<MoeGradients>> = None;
        for r in results {
            let r = r.map_err(|e| match e {
                Error::NonFiniteActivation { .. } => Error::DivergenceDetected { step },
                other => other,
            })?;
            task_loss += r.task_loss;
            balance += r.balance;
            if counts.is_empty() {
                counts = r.counts;
            } else {
                for (acc, c) in counts.iter_mut().zip(&r.counts) {
                    acc.iter_mut().zip(c).for_each(|(a, b)| *a += b);
                }
            }
            match total.as_mut() {
                None => total = Some(r.grads),
                Some(acc) => acc.iter_mut().zip(&r.grads).for_each(|(a, g)| a.add_assign(g)),
            }
        }
        task_loss /= batch;
        balance /= batch;
        let grads = total.unwrap_or_default();
        if !task_loss.is_finite() || !balance.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::DivergenceDetected { step });
        }
        rows.push(LogRow {
            step,
            task_loss,
            lb_loss: balance,
            loads: pooled_fractions(&counts, num_experts),
        });
        if opts.lr > 0.0 {
            let scale = opts.lr / batch;
            for (&l, g) in moe_indices.iter().zip(&grads) {
                let layer = model.layers[l - 1].as_moe_mut().expect("moe layer");
                layer.router.scaled_add(-scale, &g.router);
                for (e, ge) in layer.experts.iter_mut().zip(&g.experts) {
                    e.up.scaled_add(-scale, &ge.up);
                    e.gate.scaled_add(-scale, &ge.gate);
                    e.down.scaled_add(-scale, &ge.down);
                }
            }
        }
    }

    let final_results = opts
        .execution
        .map(&task.sequences, |seq| run_sequence(model, seq, opts.alpha, false));
    let mut per_layer: Vec<Vec<usize>> = Vec::new();
    for r in final_results {
        let r = r?;
        if per_layer.is_empty() {
            per_layer = r.counts;
        } else {
            for (acc, c) in per_layer.iter_mut().zip(&r.counts) {
                acc.iter_mut().zip(c).for_each(|(a, b)| *a += b);
            }
        }
    }
    let final_loads = moe_indices
        .iter()
        .zip(per_layer)
        .map(|(&l, c)| {
            let total: usize = c.iter().sum();
            (l, c.iter().map(|&v| v as f64 / total as f64).collect())
        })
        .collect();
    Ok(TrainingLog {
        num_experts,
        rows,
        final_loads,
    })
}
