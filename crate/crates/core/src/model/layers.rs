use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use super::ops::{self, col_block, layer_norm, silu};
use crate::config::RouterConfig;
use crate::error::{Error, Result};

/// Gated MLP: `(silu(h W_up) * (h W_gate)) W_down`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub up: Array2<f64>,
    pub gate: Array2<f64>,
    pub down: Array2<f64>,
}

impl Mlp {
    pub fn param_count(&self) -> usize {
        self.up.len() + self.gate.len() + self.down.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.up.nrows()
    }
}

/// Applies the gated MLP to every row of `input` (`T x d`).
pub fn mlp_apply(mlp: &Mlp, input: &Array2<f64>) -> Result<Array2<f64>> {
    let d = input.ncols();
    let mid = mlp.up.ncols();
    if mlp.up.nrows() != d
        || mlp.gate.dim() != (d, mid)
        || mlp.down.dim() != (mid, d)
    {
        return Err(Error::DimensionMismatch {
            tensor: "mlp".into(),
            expected: vec![d, mid],
            found: vec![mlp.up.nrows(), mlp.up.ncols()],
        });
    }
    let activated = input.dot(&mlp.up).mapv(silu);
    let gated = activated * input.dot(&mlp.gate);
    Ok(gated.dot(&mlp.down))
}

/// Causal grouped-query self-attention with per-head query/key normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub o: Array2<f64>,
    pub q_norm: Array1<f64>,
    pub k_norm: Array1<f64>,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
}

impl Attention {
    pub fn param_count(&self) -> usize {
        self.q.len() + self.k.len() + self.v.len() + self.o.len() + self.q_norm.len() + self.k_norm.len()
    }

    /// Attention output for an already normalized input `T x d`.
    pub fn forward(&self, input: &Array2<f64>) -> Array2<f64> {
        let seq = input.nrows();
        let dh = self.head_dim;
        let group = self.num_heads / self.num_kv_heads;
        let queries = input.dot(&self.q);
        let keys = input.dot(&self.k);
        let values = input.dot(&self.v);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut context = Array2::<f64>::zeros((seq, self.num_heads * dh));
        for head in 0..self.num_heads {
            let kv = head / group;
            let qh = layer_norm(&col_block(&queries, head * dh, dh).to_owned(), &self.q_norm);
            let kh = layer_norm(&col_block(&keys, kv * dh, dh).to_owned(), &self.k_norm);
            let vh = col_block(&values, kv * dh, dh);
            for t in 0..seq {
                let scores = Array1::from_iter((0..=t).map(|u| qh.row(t).dot(&kh.row(u)) * scale));
                let weights = ops::softmax_row(scores.view());
                let mut out = context.slice_mut(s![t, head * dh..(head + 1) * dh]);
                for (u, w) in weights.iter().enumerate() {
                    out.scaled_add(*w, &vh.row(u));
                }
            }
        }
        context.dot(&self.o)
    }
}

/// A dense decoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub attn_norm: Array1<f64>,
    pub attention: Attention,
    pub mlp_norm: Array1<f64>,
    pub mlp: Mlp,
}

impl DenseLayer {
    /// Returns `(h, y)`: the post-attention state and the layer output.
    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let h = x + &self.attention.forward(&layer_norm(x, &self.attn_norm));
        let y = &h + &mlp_apply(&self.mlp, &layer_norm(&h, &self.mlp_norm))?;
        Ok((h, y))
    }
}

/// Origin of an expert in a fused layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ExpertSource {
    /// `copy`-th duplicate (1-based) of the base layer's MLP.
    BaseCopy { copy: usize },
    /// `copy`-th duplicate (1-based) of the MLP of original layer `layer`.
    Redundant { layer: usize, copy: usize },
}

/// A sparse layer: base attention, one shared MLP norm, a router and `N` experts.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayer {
    pub attn_norm: Array1<f64>,
    pub attention: Attention,
    pub mlp_norm: Array1<f64>,
    pub experts: Vec<Mlp>,
    /// `d x N` routing weights.
    pub router: Array2<f64>,
    pub top_k: usize,
    pub config: RouterConfig,
    pub provenance: Option<Vec<ExpertSource>>,
}

impl MoeLayer {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.experts.len();
        if n == 0 || self.top_k == 0 || self.top_k > n {
            return Err(Error::InvalidShape {
                field: "moe.top_k",
                reason: format!("top_k {} with {n} experts", self.top_k),
            });
        }
        if self.router.ncols() != n || self.router.nrows() != self.mlp_norm.len() {
            return Err(Error::DimensionMismatch {
                tensor: "router".into(),
                expected: vec![self.mlp_norm.len(), n],
                found: vec![self.router.nrows(), self.router.ncols()],
            });
        }
        if let Some(p) = &self.provenance {
            if p.len() != n {
                return Err(Error::InvalidShape {
                    field: "provenance",
                    reason: format!("{} entries for {n} experts", p.len()),
                });
            }
        }
        self.config.validate()?;
        Ok(())
    }

    /// Post-attention state `h = x + MHA(LN(x))`.
    pub fn attend(&self, x: &Array2<f64>) -> Array2<f64> {
        x + &self.attention.forward(&layer_norm(x, &self.attn_norm))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Moe(MoeLayer),
}

impl Layer {
    pub fn attention(&self) -> &Attention {
        match self {
            Layer::Dense(l) => &l.attention,
            Layer::Moe(l) => &l.attention,
        }
    }

    pub fn as_moe(&self) -> Option<&MoeLayer> {
        match self {
            Layer::Moe(l) => Some(l),
            Layer::Dense(_) => None,
        }
    }

    pub fn as_moe_mut(&mut self) -> Option<&mut MoeLayer> {
        match self {
            Layer::Moe(l) => Some(l),
            Layer::Dense(_) => None,
        }
    }
}
