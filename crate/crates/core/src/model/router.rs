use ndarray::{Array2, Axis};

use super::ops::softmax_row;
use crate::config::RouterConfig;

/// Per-token routing decisions of one MoE layer.
///
/// Expert indices are 0-based.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingRecord {
    /// `T x N` router probabilities.
    pub probs: Array2<f64>,
    /// Selected experts per token, highest probability first.
    pub selected: Vec<Vec<usize>>,
    /// Gate values aligned with `selected`.
    pub gates: Vec<Vec<f64>>,
    /// Token evaluations performed per expert during the forward pass.
    pub expert_evals: Vec<usize>,
    /// Selection and gates were imposed by a [`RouteOverride`], not derived from `probs`.
    pub forced: bool,
}

impl RoutingRecord {
    pub fn num_tokens(&self) -> usize {
        self.probs.nrows()
    }

    pub fn num_experts(&self) -> usize {
        self.probs.ncols()
    }

    /// Highest-ranked expert of each token.
    pub fn top1(&self) -> Vec<usize> {
        self.selected.iter().map(|s| s[0]).collect()
    }

    /// Fraction of tokens whose top-1 expert is `i`.
    pub fn top1_fractions(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.num_experts()];
        for e in self.top1() {
            counts[e] += 1;
        }
        let t = self.num_tokens() as f64;
        counts.into_iter().map(|c| c as f64 / t).collect()
    }

    /// Mean router probability of each expert.
    pub fn mean_probs(&self) -> Vec<f64> {
        self.probs
            .mean_axis(Axis(0))
            .map(|m| m.to_vec())
            .unwrap_or_default()
    }
}

/// Test hook replacing the router's selection.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum RouteOverride {
    #[default]
    Natural,
    /// Send every token to expert `expert` (0-based) with gate `gate`.
    Force { expert: usize, gate: f64 },
}

/// Indices of the `k` largest values, descending; ties go to the smaller index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Softmax routing of every row of `h` (`T x d`) through `router` (`d x N`).
pub fn route(router: &Array2<f64>, h: &Array2<f64>, config: &RouterConfig, top_k: usize) -> RoutingRecord {
    let logits = h.dot(router) / config.temperature;
    let mut probs = Array2::zeros(logits.raw_dim());
    for (t, row) in logits.axis_iter(Axis(0)).enumerate() {
        probs.row_mut(t).assign(&softmax_row(row));
    }
    let mut selected = Vec::with_capacity(h.nrows());
    let mut gates = Vec::with_capacity(h.nrows());
    for row in probs.axis_iter(Axis(0)) {
        let row = row.to_vec();
        let sel = top_k_indices(&row, top_k);
        let mut g: Vec<f64> = sel.iter().map(|&i| row[i]).collect();
        if config.renormalize_top_k {
            let total: f64 = g.iter().sum();
            g.iter_mut().for_each(|v| *v /= total);
        }
        selected.push(sel);
        gates.push(g);
    }
    RoutingRecord {
        probs,
        selected,
        gates,
        expert_evals: vec![0; router.ncols()],
        forced: false,
    }
}

impl RouteOverride {
    pub(crate) fn apply(self, record: &mut RoutingRecord) {
        if let RouteOverride::Force { expert, gate } = self {
            for (sel, g) in record.selected.iter_mut().zip(record.gates.iter_mut()) {
                *sel = vec![expert];
                *g = vec![gate];
            }
            record.forced = true;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_router_is_uniform() {
        let h = array![[0.3, -1.0, 2.0], [1.0, 1.0, 1.0]];
        let rec = route(&Array2::zeros((3, 4)), &h, &RouterConfig::default(), 1);
        assert!(rec.probs.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        // ties break toward the smaller index
        assert_eq!(rec.top1(), vec![0, 0]);
    }

    #[test]
    fn full_selection_gates_sum_to_one() {
        let h = array![[0.3, -1.0], [1.5, 0.2]];
        let r = array![[0.4, -0.2, 1.0], [0.1, 0.5, -0.3]];
        let rec = route(&r, &h, &RouterConfig::default(), 3);
        for (sel, g) in rec.selected.iter().zip(&rec.gates) {
            assert_eq!(sel.len(), 3);
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lower_temperature_sharpens_argmax() {
        let h = array![[1.0, 0.5]];
        let r = array![[0.9, 0.1, -0.4], [0.2, 0.3, 0.1]];
        let mut last = 0.0;
        for tau in [4.0, 2.0, 1.0, 0.5, 0.25, 0.1] {
            let cfg = RouterConfig {
                temperature: tau,
                ..RouterConfig::default()
            };
            let rec = route(&r, &h, &cfg, 1);
            assert_eq!(rec.selected[0], vec![0]);
            assert!(rec.gates[0][0] > last);
            last = rec.gates[0][0];
        }
        assert!(last > 0.999);
    }

    #[test]
    fn renormalized_gates() {
        let h = array![[1.0, -0.5]];
        let r = array![[0.9, 0.1, -0.4], [0.2, 0.3, 0.1]];
        let cfg = RouterConfig {
            renormalize_top_k: true,
            ..RouterConfig::default()
        };
        let rec = route(&r, &h, &cfg, 2);
        assert!((rec.gates[0].iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let raw = route(&r, &h, &RouterConfig::default(), 2);
        assert!(raw.gates[0].iter().sum::<f64>() < 1.0);
    }
}
