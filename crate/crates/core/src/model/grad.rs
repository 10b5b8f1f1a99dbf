//! Analytic gradients of the MoE branch and a central-difference checker.
//!
//! Gradients flow into the router and the experts only; the post-attention
//! state `h` is treated as an input. Top-k selection and the top-1 dispatch
//! fractions of the balance term are held fixed (stop-gradient).

use ndarray::{Array2, Axis};

use super::forward::moe_branch;
use super::layers::{Mlp, MoeLayer};
use super::loss::{balance_prob_grad, balance_with_fractions};
use super::ops::{layer_norm, silu, silu_grad};
use super::router::{RouteOverride, RoutingRecord};
use crate::error::{Error, Result};
use crate::par::Execution;

/// Denominator floor of the relative gradient error, absorbing the
/// `eps_machine / step` noise of central differences on near-zero entries.
pub const GRAD_REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct MoeGradients {
    /// `d x N`.
    pub router: Array2<f64>,
    pub experts: Vec<Mlp>,
}

impl MoeGradients {
    fn zeros(layer: &MoeLayer) -> Self {
        MoeGradients {
            router: Array2::zeros(layer.router.raw_dim()),
            experts: layer
                .experts
                .iter()
                .map(|e| Mlp {
                    up: Array2::zeros(e.up.raw_dim()),
                    gate: Array2::zeros(e.gate.raw_dim()),
                    down: Array2::zeros(e.down.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MoeGradients) {
        self.router += &other.router;
        for (a, b) in self.experts.iter_mut().zip(&other.experts) {
            a.up += &b.up;
            a.gate += &b.gate;
            a.down += &b.down;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.router.iter().all(|v| v.is_finite())
            && self.experts.iter().all(|e| {
                e.up.iter().chain(e.gate.iter()).chain(e.down.iter()).all(|v| v.is_finite())
            })
    }
}

/// Backward pass of the MoE branch.
///
/// `h` is the post-attention state, `record` the routing of that forward
/// pass, `grad_out` the upstream gradient `dL/dy` (`T x d`) and
/// `balance_weight` the weight of the load-balancing term added to `L`.
pub fn moe_backward(
    layer: &MoeLayer,
    h: &Array2<f64>,
    record: &RoutingRecord,
    grad_out: &Array2<f64>,
    balance_weight: f64,
) -> MoeGradients {
    let mut grads = MoeGradients::zeros(layer);
    let normed = layer_norm(h, &layer.mlp_norm);
    let (tokens, n) = (h.nrows(), layer.num_experts());
    // dL/dg for each (token, selected slot)
    let mut gate_grads: Vec<Vec<f64>> = record.selected.iter().map(|s| vec![0.0; s.len()]).collect();

    for (j, expert) in layer.experts.iter().enumerate() {
        let mut rows = Vec::new();
        let mut slots = Vec::new();
        for (t, sel) in record.selected.iter().enumerate() {
            if let Some(pos) = sel.iter().position(|&e| e == j) {
                rows.push(t);
                slots.push(pos);
            }
        }
        if rows.is_empty() {
            continue;
        }
        let u = normed.select(Axis(0), &rows);
        let pre_up = u.dot(&expert.up);
        let pre_gate = u.dot(&expert.gate);
        let mid = pre_up.mapv(silu) * &pre_gate;
        let out = mid.dot(&expert.down);
        let mut delta = Array2::zeros((rows.len(), h.ncols()));
        for (r, (&t, &pos)) in rows.iter().zip(&slots).enumerate() {
            let up = grad_out.row(t);
            gate_grads[t][pos] = up.dot(&out.row(r));
            delta.row_mut(r).assign(&(&up * record.gates[t][pos]));
        }
        let g = &mut grads.experts[j];
        g.down += &mid.t().dot(&delta);
        let d_mid = delta.dot(&expert.down.t());
        let d_gate = &d_mid * &pre_up.mapv(silu);
        let d_up = &d_mid * &pre_gate * &pre_up.mapv(silu_grad);
        g.up += &u.t().dot(&d_up);
        g.gate += &u.t().dot(&d_gate);
    }

    // dL/dp for every token and expert
    let fractions = record.top1_fractions();
    let mut prob_grads = if balance_weight != 0.0 {
        balance_prob_grad(record, &fractions, balance_weight)
    } else {
        Array2::zeros((tokens, n))
    };
    if !record.forced {
        for t in 0..tokens {
            let sel = &record.selected[t];
            let gg = &gate_grads[t];
            if layer.config.renormalize_top_k {
                let total: f64 = sel.iter().map(|&i| record.probs[[t, i]]).sum();
                let mean: f64 = record.gates[t].iter().zip(gg).map(|(g, d)| g * d).sum();
                for (&i, d) in sel.iter().zip(gg) {
                    prob_grads[[t, i]] += (d - mean) / total;
                }
            } else {
                for (&i, d) in sel.iter().zip(gg) {
                    prob_grads[[t, i]] += d;
                }
            }
        }
    }
    // softmax backward, then logits = h W_r / tau
    let mut logit_grads = Array2::zeros((tokens, n));
    for t in 0..tokens {
        let p = record.probs.row(t);
        let c = prob_grads.row(t);
        let dot = p.dot(&c);
        for i in 0..n {
            logit_grads[[t, i]] = p[i] * (c[i] - dot);
        }
    }
    grads.router = h.t().dot(&logit_grads) / layer.config.temperature;
    grads
}

/// Objective used by the checker: `mean(b^2) + balance` over the MoE branch
/// output `b = y - h`, with fixed fractions. Leaving the residual `h` out
/// keeps the objective small, so central differences lose less to rounding.
fn objective(layer: &MoeLayer, h: &Array2<f64>, fractions: &[f64]) -> Result<f64> {
    let (b, record) = moe_branch(layer, h, RouteOverride::Natural)?;
    let mse = b.iter().map(|v| v * v).sum::<f64>() / b.len() as f64;
    Ok(mse + balance_with_fractions(&record, fractions, layer.config.aux_loss_weight))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per tensor, e.g. `router`, `expert.2.down`.
    pub per_tensor: Vec<(String, f64)>,
    pub analytic: MoeGradients,
    pub numeric: MoeGradients,
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_REL_FLOOR)
}

#[derive(Clone, Copy)]
enum Param {
    Router,
    Up(usize),
    Gate(usize),
    Down(usize),
}

fn param_mut(layer: &mut MoeLayer, p: Param) -> &mut Array2<f64> {
    match p {
        Param::Router => &mut layer.router,
        Param::Up(j) => &mut layer.experts[j].up,
        Param::Gate(j) => &mut layer.experts[j].gate,
        Param::Down(j) => &mut layer.experts[j].down,
    }
}

fn param_ref(g: &MoeGradients, p: Param) -> &Array2<f64> {
    match p {
        Param::Router => &g.router,
        Param::Up(j) => &g.experts[j].up,
        Param::Gate(j) => &g.experts[j].gate,
        Param::Down(j) => &g.experts[j].down,
    }
}

fn param_name(p: Param) -> String {
    match p {
        Param::Router => "router".into(),
        Param::Up(j) => format!("expert.{}.up", j + 1),
        Param::Gate(j) => format!("expert.{}.gate", j + 1),
        Param::Down(j) => format!("expert.{}.down", j + 1),
    }
}

/// Compares analytic gradients of `mean(b^2) + balance` against central
/// differences for the router and every expert weight.
pub fn grad_check(layer: &MoeLayer, x: &Array2<f64>, step: f64) -> Result<GradCheckReport> {
    grad_check_with(layer, x, step, Execution::default())
}

pub fn grad_check_with(layer: &MoeLayer, x: &Array2<f64>, step: f64, exec: Execution) -> Result<GradCheckReport> {
    if !(1e-7..=1e-4).contains(&step) {
        return Err(Error::OutOfRange(format!("finite-difference step {step} outside [1e-7, 1e-4]")));
    }
    layer.validate()?;
    let h = layer.attend(x);
    let (b, record) = moe_branch(layer, &h, RouteOverride::Natural)?;
    let grad_out = b.mapv(|v| 2.0 * v / b.len() as f64);
    let analytic = moe_backward(layer, &h, &record, &grad_out, layer.config.aux_loss_weight);
    if !analytic.is_finite() {
        return Err(Error::NonFiniteGradient("analytic".into()));
    }
    let fractions = record.top1_fractions();

    let mut params = vec![Param::Router];
    for j in 0..layer.num_experts() {
        params.extend([Param::Up(j), Param::Gate(j), Param::Down(j)]);
    }
    let mut numeric = MoeGradients::zeros(layer);
    let mut per_tensor = Vec::new();
    let mut max_rel_error: f64 = 0.0;
    for p in params {
        let len = param_ref(&analytic, p).len();
        let cols = param_ref(&analytic, p).ncols();
        let values = exec.map_range(len, |idx| -> Result<f64> {
            let at = (idx / cols, idx % cols);
            let mut probe = layer.clone();
            let base = param_mut(&mut probe, p)[at];
            param_mut(&mut probe, p)[at] = base + step;
            let plus = objective(&probe, &h, &fractions)?;
            param_mut(&mut probe, p)[at] = base - step;
            let minus = objective(&probe, &h, &fractions)?;
            Ok((plus - minus) / (2.0 * step))
        });
        let target = param_mut_grad(&mut numeric, p);
        let mut worst: f64 = 0.0;
        for (idx, v) in values.into_iter().enumerate() {
            let v = v?;
            if !v.is_finite() {
                return Err(Error::NonFiniteGradient(param_name(p)));
            }
            let at = (idx / cols, idx % cols);
            target[at] = v;
            worst = worst.max(rel_error(param_ref(&analytic, p)[at], v));
        }
        max_rel_error = max_rel_error.max(worst);
        per_tensor.push((param_name(p), worst));
    }
    Ok(GradCheckReport {
        max_rel_error,
        per_tensor,
        analytic,
        numeric,
    })
}

fn param_mut_grad(g: &mut MoeGradients, p: Param) -> &mut Array2<f64> {
    match p {
        Param::Router => &mut g.router,
        Param::Up(j) => &mut g.experts[j].up,
        Param::Gate(j) => &mut g.experts[j].gate,
        Param::Down(j) => &mut g.experts[j].down,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RouterConfig;
    use crate::model::init::{random_input, random_moe_layer, ToyLayerSpec};

    #[test]
    fn analytic_matches_differences() {
        let layer = random_moe_layer(&ToyLayerSpec::small(), RouterConfig::default(), 4);
        let x = random_input(5, 8, 40);
        let report = grad_check(&layer, &x, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn renormalized_top2_matches_differences() {
        let spec = ToyLayerSpec {
            top_k: 2,
            ..ToyLayerSpec::small()
        };
        let cfg = RouterConfig {
            renormalize_top_k: true,
            temperature: 0.7,
            aux_loss_weight: 0.05,
        };
        let layer = random_moe_layer(&spec, cfg, 8);
        let x = random_input(5, 8, 80);
        let report = grad_check(&layer, &x, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-6, "{:?}", report.per_tensor);
    }

    #[test]
    fn step_out_of_range() {
        let layer = random_moe_layer(&ToyLayerSpec::small(), RouterConfig::default(), 4);
        let x = random_input(5, 8, 40);
        assert!(matches!(grad_check(&layer, &x, 1e-3), Err(Error::OutOfRange(_))));
    }
}
