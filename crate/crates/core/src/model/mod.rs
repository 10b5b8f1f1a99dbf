//! Deterministic desk-scale decoder-only transformer with dense and MoE layers.
//!
//! All arithmetic is 64-bit. Tensors follow the row-vector convention
//! `y = x W`, matching the `d x d_out` layout of the weight container.

pub mod forward;
pub mod grad;
pub mod init;
pub mod layers;
pub mod loss;
pub mod ops;
pub mod router;
pub mod train;

use ndarray::{Array1, Array2, ArrayD, Ix1, Ix2};

pub use forward::{dense_forward, moe_branch, moe_forward, ForwardOptions, ForwardOutput};
pub use grad::{grad_check, moe_backward, GradCheckReport, MoeGradients};
pub use layers::{mlp_apply, Attention, DenseLayer, ExpertSource, Layer, Mlp, MoeLayer};
pub use loss::load_balance_loss;
pub use router::{route, RouteOverride, RoutingRecord};
pub use train::{train_toy, CopyTask, TrainOptions, TrainingLog};

use crate::config::{ModelShape, RouterConfig};
use crate::error::{Error, Result};
use crate::weights::{expert_prefix, layer_prefix, LayerKind, WeightContainer};

/// A loaded model; layers are in execution order.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub shape: ModelShape,
    /// `V x d` token embeddings (also the output head when tied).
    pub embed: Array2<f64>,
    pub lm_head: Option<Array2<f64>>,
    pub final_norm: Array1<f64>,
    pub layers: Vec<Layer>,
}

fn matrix(c: &WeightContainer, name: &str) -> Result<Array2<f64>> {
    to_matrix(c.get(name)?, name)
}

fn to_matrix(t: &ArrayD<f64>, name: &str) -> Result<Array2<f64>> {
    t.clone()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::DimensionMismatch {
            tensor: name.to_string(),
            expected: vec![0, 0],
            found: t.shape().to_vec(),
        })
}

fn vector(c: &WeightContainer, name: &str) -> Result<Array1<f64>> {
    let t = c.get(name)?;
    t.clone()
        .into_dimensionality::<Ix1>()
        .map_err(|_| Error::DimensionMismatch {
            tensor: name.to_string(),
            expected: vec![0],
            found: t.shape().to_vec(),
        })
}

fn read_mlp(c: &WeightContainer, prefix: &str) -> Result<Mlp> {
    Ok(Mlp {
        up: matrix(c, &format!("{prefix}.up"))?,
        gate: matrix(c, &format!("{prefix}.gate"))?,
        down: matrix(c, &format!("{prefix}.down"))?,
    })
}

fn write_mlp(c: &mut WeightContainer, prefix: &str, mlp: &Mlp) {
    c.insert(format!("{prefix}.up"), mlp.up.clone().into_dyn());
    c.insert(format!("{prefix}.gate"), mlp.gate.clone().into_dyn());
    c.insert(format!("{prefix}.down"), mlp.down.clone().into_dyn());
}

impl Model {
    /// Builds a model from a validated container; MoE layers use `router`.
    pub fn from_container(container: &WeightContainer, router: RouterConfig) -> Result<Self> {
        container.validate()?;
        let shape = container.shape.clone();
        let mut layers = Vec::with_capacity(shape.num_layers);
        for (i, kind) in container.layer_kinds().into_iter().enumerate() {
            let p = layer_prefix(i + 1);
            let attention = Attention {
                q: matrix(container, &format!("{p}.attn.q"))?,
                k: matrix(container, &format!("{p}.attn.k"))?,
                v: matrix(container, &format!("{p}.attn.v"))?,
                o: matrix(container, &format!("{p}.attn.o"))?,
                q_norm: vector(container, &format!("{p}.attn.q_norm"))?,
                k_norm: vector(container, &format!("{p}.attn.k_norm"))?,
                num_heads: shape.num_heads,
                num_kv_heads: shape.num_kv_heads,
                head_dim: shape.head_dim,
            };
            let attn_norm = vector(container, &format!("{p}.attn_norm"))?;
            let mlp_norm = vector(container, &format!("{p}.mlp_norm"))?;
            layers.push(match kind {
                LayerKind::Dense => Layer::Dense(DenseLayer {
                    attn_norm,
                    attention,
                    mlp_norm,
                    mlp: read_mlp(container, &format!("{p}.mlp"))?,
                }),
                LayerKind::Moe { experts } => {
                    let moe = shape.moe.expect("validated container");
                    let layer = MoeLayer {
                        attn_norm,
                        attention,
                        mlp_norm,
                        experts: (1..=experts)
                            .map(|j| read_mlp(container, &expert_prefix(i + 1, j)))
                            .collect::<Result<_>>()?,
                        router: matrix(container, &format!("{p}.router"))?,
                        top_k: moe.top_k,
                        config: router,
                        provenance: None,
                    };
                    layer.validate()?;
                    Layer::Moe(layer)
                }
            });
        }
        Ok(Model {
            embed: matrix(container, "embed")?,
            lm_head: if shape.tied_embedding {
                None
            } else {
                Some(matrix(container, "lm_head")?)
            },
            final_norm: vector(container, "final_norm")?,
            shape,
            layers,
        })
    }

    pub fn to_container(&self) -> WeightContainer {
        let mut c = WeightContainer::new(self.shape.clone());
        c.insert("embed", self.embed.clone().into_dyn());
        if let Some(head) = &self.lm_head {
            c.insert("lm_head", head.clone().into_dyn());
        }
        c.insert("final_norm", self.final_norm.clone().into_dyn());
        for (i, layer) in self.layers.iter().enumerate() {
            let p = layer_prefix(i + 1);
            let (attn_norm, mlp_norm) = match layer {
                Layer::Dense(l) => (&l.attn_norm, &l.mlp_norm),
                Layer::Moe(l) => (&l.attn_norm, &l.mlp_norm),
            };
            c.insert(format!("{p}.attn_norm"), attn_norm.clone().into_dyn());
            c.insert(format!("{p}.mlp_norm"), mlp_norm.clone().into_dyn());
            let a = layer.attention();
            c.insert(format!("{p}.attn.q"), a.q.clone().into_dyn());
            c.insert(format!("{p}.attn.k"), a.k.clone().into_dyn());
            c.insert(format!("{p}.attn.v"), a.v.clone().into_dyn());
            c.insert(format!("{p}.attn.o"), a.o.clone().into_dyn());
            c.insert(format!("{p}.attn.q_norm"), a.q_norm.clone().into_dyn());
            c.insert(format!("{p}.attn.k_norm"), a.k_norm.clone().into_dyn());
            match layer {
                Layer::Dense(l) => write_mlp(&mut c, &format!("{p}.mlp"), &l.mlp),
                Layer::Moe(l) => {
                    c.insert(format!("{p}.router"), l.router.clone().into_dyn());
                    for (j, e) in l.experts.iter().enumerate() {
                        write_mlp(&mut c, &expert_prefix(i + 1, j + 1), e);
                    }
                }
            }
        }
        c
    }

    pub fn moe_layers(&self) -> impl Iterator<Item = (usize, &MoeLayer)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.as_moe().map(|m| (i + 1, m)))
    }
}
