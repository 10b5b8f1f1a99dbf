mod common;

use std::collections::BTreeSet;

use d2m_core::config::{FusionPlan, SearchThresholds};
use d2m_core::search::{candidates, is_valid_block, plan_from_depth, search, threshold_sweep, threshold_sweep_with};
use d2m_core::par::Execution;
use d2m_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{random_matrices, reference_search};

fn thresholds(delta: f64, eps: f64, lambda: f64) -> SearchThresholds {
    SearchThresholds {
        score_penalty: lambda,
        ..SearchThresholds::new(delta, eps)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn greedy_matches_reference(seed in any::<u64>(), layers in 2usize..20, delta in 0.01f64..0.2, eps in 0.01f64..0.25, lambda in 0.0f64..2.0) {
        let m = random_matrices(layers, &mut ChaCha8Rng::seed_from_u64(seed));
        let t = thresholds(delta, eps, lambda);
        let plan = search(&m, &t);
        let got: Vec<(usize, usize)> = plan.blocks.iter().map(|b| (b.base, b.redundant.len())).collect();
        let want = reference_search(&m.s_out, &m.s_mlp, &m.delta_norm, delta, eps, lambda, &t.block_sizes);
        prop_assert_eq!(got, want);
    }

    #[test]
    fn accepted_blocks_are_valid_and_disjoint(seed in any::<u64>(), layers in 2usize..24, delta in 0.01f64..0.2, eps in 0.01f64..0.25) {
        let m = random_matrices(layers, &mut ChaCha8Rng::seed_from_u64(seed));
        let plan = search(&m, &SearchThresholds::new(delta, eps));
        plan.validate(layers).unwrap();
        let mut seen = BTreeSet::new();
        for b in &plan.blocks {
            prop_assert!(is_valid_block(&m, b.base, b.redundant.len(), delta, eps).unwrap());
            for l in std::iter::once(b.base).chain(b.redundant.iter().copied()) {
                prop_assert!(seen.insert(l));
            }
        }
        prop_assert_eq!(plan.keep.len() + plan.prune.len(), layers);
    }

    #[test]
    fn candidate_set_grows_with_slack(seed in any::<u64>(), layers in 2usize..16, d0 in 0.01f64..0.1, dd in 0.0f64..0.1, e0 in 0.01f64..0.1, de in 0.0f64..0.1) {
        let m = random_matrices(layers, &mut ChaCha8Rng::seed_from_u64(seed));
        let tight: BTreeSet<(usize, usize)> = candidates(&m, &SearchThresholds::new(d0, e0)).iter().map(|c| (c.base, c.size)).collect();
        let loose: BTreeSet<(usize, usize)> = candidates(&m, &SearchThresholds::new(d0 + dd, e0 + de)).iter().map(|c| (c.base, c.size)).collect();
        prop_assert!(tight.is_subset(&loose));
    }

    #[test]
    fn plan_json_replays(seed in any::<u64>(), layers in 2usize..20) {
        let m = random_matrices(layers, &mut ChaCha8Rng::seed_from_u64(seed));
        let plan = search(&m, &SearchThresholds::new(0.1, 0.1));
        prop_assert_eq!(FusionPlan::from_json(&plan.to_json()).unwrap(), plan);
    }
}

#[test]
fn sweep_is_deterministic_across_execution() {
    let m = random_matrices(16, &mut ChaCha8Rng::seed_from_u64(3));
    let sizes: BTreeSet<usize> = [1, 2, 3].into();
    let deltas = [0.02, 0.05, 0.1];
    let eps = [0.05, 0.1];
    let a = threshold_sweep_with(&m, &deltas, &eps, 1.0, &sizes, Execution::Sequential).unwrap();
    let b = threshold_sweep_with(&m, &deltas, &eps, 1.0, &sizes, Execution::Parallel).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_csv().lines().count(), 1 + deltas.len() * eps.len());
}

#[test]
fn sweep_cells_replay_single_search() {
    let m = random_matrices(12, &mut ChaCha8Rng::seed_from_u64(9));
    let sizes: BTreeSet<usize> = [1, 2, 3].into();
    let grid = threshold_sweep(&m, &[0.05, 0.1], &[0.1], 1.0, &sizes).unwrap();
    for (i, &d) in grid.deltas.iter().enumerate() {
        let cell = grid.cell(i, 0);
        assert_eq!(cell.plan, search(&m, &SearchThresholds::new(d, 0.1)));
        assert_eq!(cell.pruned_count, cell.plan.prune.len());
    }
}

#[test]
fn unreachable_depth_is_reported() {
    let m = random_matrices(6, &mut ChaCha8Rng::seed_from_u64(1));
    let sizes: BTreeSet<usize> = [1].into();
    let grid = threshold_sweep(&m, &[0.01], &[0.01], 1.0, &sizes).unwrap();
    assert!(matches!(plan_from_depth(&grid, 1), Err(Error::DepthUnreachable { .. })));
    assert!(threshold_sweep(&m, &[], &[0.1], 1.0, &sizes).is_err());
}
