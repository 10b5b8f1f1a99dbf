//! Global scoring-based redundant block search and threshold sweeps.
//!
//! Every `(base l, size n)` with `n` in the allowed block sizes is scored if
//! all offsets `k = 1..=n` pass the similarity and norm thresholds against
//! the base. Candidates are then accepted greedily in descending score order
//! (ties: smaller `l`, then smaller `n`) as long as none of the layers
//! `l..=l+n` is already occupied.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::config::{FusedBlock, FusionPlan, SearchThresholds};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::similarity::SimilarityMatrices;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CandidateBlock {
    pub score: f64,
    pub base: usize,
    pub size: usize,
}

fn check_range(m: &SimilarityMatrices, l: usize, n: usize) -> Result<()> {
    if l == 0 || n == 0 || l + n > m.num_layers() {
        return Err(Error::IndexOutOfRange(format!(
            "block (base {l}, size {n}) with {} layers",
            m.num_layers()
        )));
    }
    Ok(())
}

pub fn is_valid_block(m: &SimilarityMatrices, l: usize, n: usize, delta: f64, epsilon: f64) -> Result<bool> {
    check_range(m, l, n)?;
    let floor = 1.0 - delta;
    Ok((1..=n).all(|k| {
        m.s_out(l, l + k) > floor && m.s_mlp(l, l + k) > floor && m.delta_norm(l, l + k) < epsilon
    }))
}

/// `(1/n) sum_k [ (s_out + s_mlp)/2 - lambda * delta_norm ]` over offsets `k = 1..=n`.
pub fn block_score(m: &SimilarityMatrices, l: usize, n: usize, lambda: f64) -> Result<f64> {
    check_range(m, l, n)?;
    let total: f64 = (1..=n)
        .map(|k| (m.s_out(l, l + k) + m.s_mlp(l, l + k)) / 2.0 - lambda * m.delta_norm(l, l + k))
        .sum();
    Ok(total / n as f64)
}

/// Descending score, then smaller base, then smaller size.
pub fn candidate_order(a: &CandidateBlock, b: &CandidateBlock) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.base.cmp(&b.base))
        .then(a.size.cmp(&b.size))
}

/// All valid candidate blocks in acceptance order.
pub fn candidates(m: &SimilarityMatrices, t: &SearchThresholds) -> Vec<CandidateBlock> {
    let layers = m.num_layers();
    let mut out = Vec::new();
    for l in 1..=layers {
        for &n in &t.block_sizes {
            if n == 0 || l + n > layers {
                continue;
            }
            if is_valid_block(m, l, n, t.cos_threshold, t.norm_tolerance).expect("range checked") {
                let score = block_score(m, l, n, t.score_penalty).expect("range checked");
                out.push(CandidateBlock { score, base: l, size: n });
            }
        }
    }
    out.sort_by(candidate_order);
    out
}

pub fn search(m: &SimilarityMatrices, t: &SearchThresholds) -> FusionPlan {
    let layers = m.num_layers();
    let mut occupied = vec![false; layers + 1];
    let mut blocks = Vec::new();
    for c in candidates(m, t) {
        let span = c.base..=c.base + c.size;
        if span.clone().all(|i| !occupied[i]) {
            span.for_each(|i| occupied[i] = true);
            blocks.push(FusedBlock {
                base: c.base,
                redundant: (c.base + 1..=c.base + c.size).collect(),
            });
        }
    }
    FusionPlan::from_blocks(layers, blocks).expect("greedy acceptance yields a valid plan")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub delta: f64,
    pub epsilon: f64,
    pub pruned_count: usize,
    pub plan: FusionPlan,
}

/// Pruning depth over a `(delta, epsilon)` grid, delta-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub deltas: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub cells: Vec<SweepCell>,
}

impl SweepGrid {
    pub fn cell(&self, delta_idx: usize, epsilon_idx: usize) -> &SweepCell {
        &self.cells[delta_idx * self.epsilons.len() + epsilon_idx]
    }

    /// CSV with header `delta,epsilon,pruned_count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("delta,epsilon,pruned_count\n");
        for c in &self.cells {
            let _ = writeln!(out, "{},{},{}", c.delta, c.epsilon, c.pruned_count);
        }
        out
    }

    /// Whether the pruned count never drops when either threshold grows,
    /// assuming both grids are ascending.
    pub fn is_monotone(&self) -> bool {
        let (nd, ne) = (self.deltas.len(), self.epsilons.len());
        (0..nd).all(|i| {
            (0..ne).all(|j| {
                let here = self.cell(i, j).pruned_count;
                (i + 1 == nd || self.cell(i + 1, j).pruned_count >= here)
                    && (j + 1 == ne || self.cell(i, j + 1).pruned_count >= here)
            })
        })
    }
}

pub fn threshold_sweep(
    m: &SimilarityMatrices,
    deltas: &[f64],
    epsilons: &[f64],
    lambda: f64,
    block_sizes: &BTreeSet<usize>,
) -> Result<SweepGrid> {
    threshold_sweep_with(m, deltas, epsilons, lambda, block_sizes, Execution::default())
}

pub fn threshold_sweep_with(
    m: &SimilarityMatrices,
    deltas: &[f64],
    epsilons: &[f64],
    lambda: f64,
    block_sizes: &BTreeSet<usize>,
    exec: Execution,
) -> Result<SweepGrid> {
    if deltas.is_empty() || epsilons.is_empty() {
        return Err(Error::InvalidConfig("sweep grids must be non-empty".into()));
    }
    let grid: Vec<(f64, f64)> = deltas
        .iter()
        .flat_map(|&d| epsilons.iter().map(move |&e| (d, e)))
        .collect();
    let cells = exec.map(&grid, |&(delta, epsilon)| {
        let t = SearchThresholds {
            cos_threshold: delta,
            norm_tolerance: epsilon,
            score_penalty: lambda,
            block_sizes: block_sizes.clone(),
        };
        let plan = search(m, &t);
        SweepCell {
            delta,
            epsilon,
            pruned_count: plan.prune.len(),
            plan,
        }
    });
    Ok(SweepGrid {
        deltas: deltas.to_vec(),
        epsilons: epsilons.to_vec(),
        cells,
    })
}

/// Cell with the smallest delta (then smallest epsilon) that keeps `target_kept` layers.
pub fn plan_from_depth(grid: &SweepGrid, target_kept: usize) -> Result<(f64, f64, FusionPlan)> {
    grid.cells
        .iter()
        .filter(|c| c.plan.retained_depth() == target_kept)
        .min_by(|a, b| a.delta.total_cmp(&b.delta).then(a.epsilon.total_cmp(&b.epsilon)))
        .map(|c| (c.delta, c.epsilon, c.plan.clone()))
        .ok_or(Error::DepthUnreachable { target: target_kept })
}

#[cfg(test)]
mod tests {
    use super::*;

    type Entry = ((usize, usize), (f64, f64, f64));

    fn matrices(n: usize, entries: &[Entry]) -> SimilarityMatrices {
        SimilarityMatrices::from_upper(n, |l, m| {
            entries
                .iter()
                .find(|(k, _)| *k == (l, m))
                .map(|(_, v)| *v)
                .unwrap_or((0.0, 0.0, 1.0))
        })
    }

    fn sizes(s: &[usize]) -> BTreeSet<usize> {
        s.iter().copied().collect()
    }

    #[test]
    fn validity_thresholds() {
        let m = matrices(3, &[((1, 2), (0.97, 0.97, 0.01))]);
        assert!(!is_valid_block(&m, 1, 1, 0.02, 0.1).unwrap());
        assert!(is_valid_block(&m, 1, 1, 0.05, 0.1).unwrap());
        assert!(!is_valid_block(&m, 1, 1, 0.05, 0.01).unwrap());
        assert!(matches!(
            is_valid_block(&m, 2, 2, 0.05, 0.1),
            Err(Error::IndexOutOfRange(_))
        ));
    }

    #[test]
    fn exact_duplicates_always_valid_but_not_at_zero_delta() {
        let m = matrices(2, &[((1, 2), (1.0, 1.0, 0.0))]);
        assert!(is_valid_block(&m, 1, 1, 1e-9, 1e-9).unwrap());
        assert!(!is_valid_block(&m, 1, 1, 0.0, 0.5).unwrap());
        assert_eq!(block_score(&m, 1, 1, 3.0).unwrap(), 1.0);
    }

    #[test]
    fn score_arithmetic() {
        let m = matrices(2, &[((1, 2), (0.9, 0.9, 0.1))]);
        assert!((block_score(&m, 1, 1, 1.0).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn greedy_rejects_occupied_base() {
        // (1,1) scores 0.95, (2,1) scores 0.99
        let m = matrices(
            4,
            &[((1, 2), (0.95, 0.95, 0.0)), ((2, 3), (0.99, 0.99, 0.0))],
        );
        let t = SearchThresholds {
            block_sizes: sizes(&[1]),
            ..SearchThresholds::new(0.1, 0.1)
        };
        let plan = search(&m, &t);
        assert_eq!(plan.prune, vec![3]);
        assert_eq!(plan.keep, vec![1, 2, 4]);
        assert_eq!(plan.blocks, vec![FusedBlock { base: 2, redundant: vec![3] }]);
    }

    #[test]
    fn nothing_similar_prunes_nothing() {
        let m = matrices(5, &[]);
        let plan = search(&m, &SearchThresholds::new(0.05, 0.1));
        assert_eq!(plan, FusionPlan::identity(5));
    }

    #[test]
    fn equal_scores_break_toward_smaller_base() {
        let m = matrices(
            3,
            &[((1, 2), (0.99, 0.99, 0.0)), ((2, 3), (0.99, 0.99, 0.0))],
        );
        let t = SearchThresholds {
            block_sizes: sizes(&[1]),
            ..SearchThresholds::new(0.1, 0.1)
        };
        assert_eq!(search(&m, &t).prune, vec![2]);
    }

    #[test]
    fn sweep_and_depth_selection() {
        let m = matrices(
            4,
            &[((1, 2), (0.9, 0.9, 0.05)), ((3, 4), (0.99, 0.99, 0.01))],
        );
        let deltas = [0.0, 0.05, 0.2];
        let eps = [0.02, 0.1];
        let grid = threshold_sweep(&m, &deltas, &eps, 1.0, &sizes(&[1, 2])).unwrap();
        assert_eq!(grid.cells.len(), 6);
        assert!(grid.cells.iter().filter(|c| c.delta == 0.0).all(|c| c.pruned_count == 0));
        assert!(grid.is_monotone());
        assert_eq!(grid.cell(2, 1).pruned_count, 2);
        let csv = grid.to_csv();
        assert_eq!(csv.lines().count(), 7);

        let (d, e, plan) = plan_from_depth(&grid, 4).unwrap();
        assert_eq!((d, e), (0.0, 0.02));
        assert_eq!(plan.prune.len(), 0);
        let (d, e, plan) = plan_from_depth(&grid, 3).unwrap();
        assert_eq!((d, e), (0.05, 0.02));
        assert_eq!(plan.prune, vec![4]);
        assert!(matches!(
            plan_from_depth(&grid, 1),
            Err(Error::DepthUnreachable { target: 1 })
        ));
    }
}
