use ndarray::{Array1, Array2};

use super::layers::{mlp_apply, Layer, MoeLayer};
use super::ops::{layer_norm, position_code};
use super::router::{route, RouteOverride, RoutingRecord};
use super::Model;
use crate::error::{Error, Result};
use crate::trace::ActivationTrace;

/// Scale of the fixed sinusoidal position code added at the input.
pub const POSITION_SCALE: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    pub routing: RouteOverride,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Residual stream after the last layer (before the final norm).
    pub final_state: Array2<f64>,
    pub trace: ActivationTrace,
    /// Routing record of each layer; `None` for dense layers.
    pub routing: Vec<Option<RoutingRecord>>,
}

fn check_finite(m: &Array2<f64>, layer: usize) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation { layer })
    }
}

/// Sparse MLP branch for a post-attention state `h`: returns
/// `sum_j g_j(h) * MLP_j(LN_mlp(h))` and the routing record.
///
/// Each expert only evaluates the tokens dispatched to it.
pub fn moe_branch(layer: &MoeLayer, h: &Array2<f64>, routing: RouteOverride) -> Result<(Array2<f64>, RoutingRecord)> {
    let mut record = route(&layer.router, h, &layer.config, layer.top_k);
    routing.apply(&mut record);
    let normed = layer_norm(h, &layer.mlp_norm);
    let mut branch = Array2::zeros(h.raw_dim());
    for (j, expert) in layer.experts.iter().enumerate() {
        let mut tokens = Vec::new();
        let mut weights = Vec::new();
        for (t, (sel, gates)) in record.selected.iter().zip(&record.gates).enumerate() {
            if let Some(pos) = sel.iter().position(|&e| e == j) {
                tokens.push(t);
                weights.push(gates[pos]);
            }
        }
        if tokens.is_empty() {
            continue;
        }
        let input = normed.select(ndarray::Axis(0), &tokens);
        let out = mlp_apply(expert, &input)?;
        record.expert_evals[j] += tokens.len();
        for ((&t, &g), row) in tokens.iter().zip(&weights).zip(out.rows()) {
            branch.row_mut(t).scaled_add(g, &row);
        }
    }
    Ok((branch, record))
}

/// Forward pass of one MoE layer: `h = x + MHA(LN(x))`, `y = h + MoE(h)`.
pub fn moe_forward(layer: &MoeLayer, x: &Array2<f64>, routing: RouteOverride) -> Result<(Array2<f64>, RoutingRecord)> {
    let h = layer.attend(x);
    let (branch, record) = moe_branch(layer, &h, routing)?;
    Ok((h + branch, record))
}

impl Model {
    /// Token embeddings plus the fixed position code.
    pub fn embed_tokens(&self, tokens: &[usize]) -> Result<Array2<f64>> {
        let d = self.shape.hidden_dim;
        let mut x = position_code(tokens.len(), d, POSITION_SCALE);
        for (t, &tok) in tokens.iter().enumerate() {
            if tok >= self.embed.nrows() {
                return Err(Error::OutOfRange(format!(
                    "token {tok} outside vocabulary of {}",
                    self.embed.nrows()
                )));
            }
            let mut row = x.row_mut(t);
            row += &self.embed.row(tok);
        }
        Ok(x)
    }

    /// Output projection of the final residual state.
    pub fn logits(&self, final_state: &Array2<f64>) -> Array2<f64> {
        let normed = layer_norm(final_state, &self.final_norm);
        match &self.lm_head {
            Some(head) => normed.dot(head),
            None => normed.dot(&self.embed.t()),
        }
    }

    /// Runs every layer on an embedded input `T x d`, capturing `h` and `y`.
    pub fn forward(&self, x: &Array2<f64>, options: &ForwardOptions) -> Result<ForwardOutput> {
        if x.ncols() != self.shape.hidden_dim || x.nrows() == 0 {
            return Err(Error::DimensionMismatch {
                tensor: "input".into(),
                expected: vec![x.nrows().max(1), self.shape.hidden_dim],
                found: vec![x.nrows(), x.ncols()],
            });
        }
        check_finite(x, 0)?;
        let mut state = x.clone();
        let mut hs = Vec::with_capacity(self.layers.len());
        let mut ys = Vec::with_capacity(self.layers.len());
        let mut routing = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (h, y, record) = match layer {
                Layer::Dense(dense) => {
                    let (h, y) = dense.forward(&state)?;
                    (h, y, None)
                }
                Layer::Moe(moe) => {
                    let h = moe.attend(&state);
                    let (branch, record) = moe_branch(moe, &h, options.routing)?;
                    let y = &h + &branch;
                    (h, y, Some(record))
                }
            };
            check_finite(&h, i + 1)?;
            check_finite(&y, i + 1)?;
            state = y.clone();
            hs.push(h);
            ys.push(y);
            routing.push(record);
        }
        Ok(ForwardOutput {
            final_state: state,
            trace: ActivationTrace::new(hs, ys)?,
            routing,
        })
    }

    /// Mean next-token cross-entropy of `tokens` under the model.
    pub fn next_token_loss(&self, tokens: &[usize], options: &ForwardOptions) -> Result<f64> {
        let x = self.embed_tokens(tokens)?;
        let out = self.forward(&x, options)?;
        let logits = self.logits(&out.final_state);
        Ok(cross_entropy(&logits, tokens).0)
    }
}

/// Natural-routing forward returning the final state and the captured trace.
pub fn dense_forward(model: &Model, x: &Array2<f64>) -> Result<(Array2<f64>, ActivationTrace)> {
    let out = model.forward(x, &ForwardOptions::default())?;
    Ok((out.final_state, out.trace))
}

/// Next-token cross-entropy over positions `0..T-1`, with its gradient
/// with respect to the logits.
pub(crate) fn cross_entropy(logits: &Array2<f64>, tokens: &[usize]) -> (f64, Array2<f64>) {
    let positions = tokens.len().saturating_sub(1);
    let mut grad = Array2::zeros(logits.raw_dim());
    if positions == 0 {
        return (0.0, grad);
    }
    let mut loss = 0.0;
    for t in 0..positions {
        let p: Array1<f64> = super::ops::softmax_row(logits.row(t));
        let target = tokens[t + 1];
        loss -= p[target].max(f64::MIN_POSITIVE).ln();
        let mut g = grad.row_mut(t);
        g.assign(&p);
        g[target] -= 1.0;
    }
    let n = positions as f64;
    grad /= n;
    (loss / n, grad)
}
