use d2m_core::diagnostics::{compare_runs, load_profile, profiles_csv, wta_metrics, wta_metrics_with, LayerLoadProfile};
use d2m_core::par::Execution;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn assignments(n: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..n, 1..200)
}

proptest! {
    #[test]
    fn expert_relabeling_preserves_metrics(a in assignments(5), shift in 1usize..5) {
        let p = load_profile(1, &a, 5).unwrap();
        let relabeled: Vec<usize> = a.iter().map(|&e| (e + shift) % 5).collect();
        let q = load_profile(1, &relabeled, 5).unwrap();
        let (x, y) = (wta_metrics(&[p]).unwrap(), wta_metrics(&[q]).unwrap());
        for (u, v) in x.values().iter().zip(y.values()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_order_only_moves_per_layer_rows(layers in prop::collection::vec(assignments(4), 1..6)) {
        let profiles: Vec<_> = layers.iter().enumerate().map(|(i, a)| load_profile(i + 1, a, 4).unwrap()).collect();
        let mut reversed = profiles.clone();
        reversed.reverse();
        let (a, b) = (wta_metrics(&profiles).unwrap(), wta_metrics(&reversed).unwrap());
        for (u, v) in a.values().iter().zip(b.values()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
        prop_assert_eq!(wta_metrics_with(&profiles, Execution::Sequential).unwrap(), a.clone());
        prop_assert!(compare_runs(&a, &a).unwrap().metric_deltas.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn bounds(a in assignments(6)) {
        let p = load_profile(2, &a, 6).unwrap();
        let s = wta_metrics(std::slice::from_ref(&p)).unwrap();
        prop_assert!(s.mean_top_load >= 1.0 / 6.0 - 1e-12 && s.mean_top_load <= 1.0);
        prop_assert!(s.mean_entropy >= 0.0 && s.mean_entropy <= 6f64.ln() + 1e-12);
        prop_assert!((s.mean_top_uniform_ratio - 6.0 * s.mean_top_load).abs() < 1e-12);
        prop_assert!(LayerLoadProfile::from_loads(2, p.loads.clone()).is_ok());
    }
}

#[test]
fn counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let layers: Vec<Vec<usize>> = (0..4)
        .map(|l| (0..1000).map(|_| if rng.random_bool(0.2 * l as f64) { 0 } else { rng.random_range(0..6) }).collect())
        .collect();
    let profiles: Vec<_> = layers.iter().enumerate().map(|(i, a)| load_profile(i + 1, a, 6).unwrap()).collect();
    let s = wta_metrics(&profiles).unwrap();

    let (mut tops, mut gaps, mut ents) = (Vec::new(), Vec::new(), Vec::new());
    for a in &layers {
        let mut counts = [0usize; 6];
        for &e in a {
            counts[e] += 1;
        }
        let max = *counts.iter().max().unwrap() as f64 / 1000.0;
        let min = *counts.iter().min().unwrap() as f64 / 1000.0;
        let h: f64 = counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / 1000.0;
                -p * p.ln()
            })
            .sum();
        tops.push(max);
        gaps.push(max - min);
        ents.push(h);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!((s.mean_top_load - mean(&tops)).abs() < 1e-12);
    assert!((s.mean_top_bottom_gap - mean(&gaps)).abs() < 1e-12);
    assert!((s.mean_entropy - mean(&ents)).abs() < 1e-12);
    assert_eq!(s.layers_top_gt_50, tops.iter().filter(|&&t| t > 0.5).count());
    assert_eq!(s.layers_top_gt_40, tops.iter().filter(|&&t| t > 0.4).count());
    assert_eq!(profiles_csv(&profiles).lines().count(), 5);
}
