//! Named-tensor weight containers and the `D2MW` file format.
//!
//! Layout: magic `D2MW` | version u32 | config length u32 | JSON `ModelShape` |
//! repeated until end of stream: name length u32 | UTF-8 name | ndim u32 |
//! dims u32 x ndim | f32-LE data. Entries are written in name order.
//!
//! Tensor paths (layer indices 1-based):
//!
//! | path                                  | dims               |
//! |---------------------------------------|--------------------|
//! | `embed`                               | V x d              |
//! | `lm_head` (untied only)               | d x V              |
//! | `final_norm`                          | d                  |
//! | `layer.l.attn_norm`, `layer.l.mlp_norm` | d                |
//! | `layer.l.attn.{q,k,v,o}`              | d x n_h d_h, d x n_kv d_h, d x n_kv d_h, n_h d_h x d |
//! | `layer.l.attn.{q_norm,k_norm}`        | d_h                |
//! | `layer.l.mlp.{up,gate,down}`          | d x d_mid, d x d_mid, d_mid x d |
//! | `layer.l.router`                      | d x N_l            |
//! | `layer.l.moe.expert.j.{up,gate,down}` | as the dense MLP   |

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::{ArrayD, IxDyn};

use crate::binio;
use crate::config::ModelShape;
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"D2MW";
pub const WEIGHTS_VERSION: u32 = 1;

/// How a layer's MLP branch is stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Moe { experts: usize },
}

pub const ATTENTION_TENSORS: [&str; 6] = ["q", "k", "v", "o", "q_norm", "k_norm"];
pub const MLP_TENSORS: [&str; 3] = ["up", "gate", "down"];

pub fn layer_prefix(layer: usize) -> String {
    format!("layer.{layer}")
}

pub fn expert_prefix(layer: usize, expert: usize) -> String {
    format!("layer.{layer}.moe.expert.{expert}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightContainer {
    pub shape: ModelShape,
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

impl WeightContainer {
    pub fn new(shape: ModelShape) -> Self {
        WeightContainer {
            shape,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f64>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Layer layout inferred from the stored tensors.
    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        (1..=self.shape.num_layers)
            .map(|l| match self.tensors.get(&format!("layer.{l}.router")) {
                Some(router) if router.ndim() == 2 => LayerKind::Moe {
                    experts: router.shape()[1],
                },
                _ => LayerKind::Dense,
            })
            .collect()
    }

    /// Every tensor path and its dims implied by the shape and `kinds`.
    pub fn expected_tensors(shape: &ModelShape, kinds: &[LayerKind]) -> BTreeMap<String, Vec<usize>> {
        let d = shape.hidden_dim;
        let q_width = shape.num_heads * shape.head_dim;
        let kv_width = shape.num_kv_heads * shape.head_dim;
        let mlp_dims = [
            vec![d, shape.mlp_dim],
            vec![d, shape.mlp_dim],
            vec![shape.mlp_dim, d],
        ];
        let mut out = BTreeMap::new();
        out.insert("embed".to_string(), vec![shape.vocab_size, d]);
        if !shape.tied_embedding {
            out.insert("lm_head".to_string(), vec![d, shape.vocab_size]);
        }
        out.insert("final_norm".to_string(), vec![d]);
        for (i, kind) in kinds.iter().enumerate() {
            let p = layer_prefix(i + 1);
            out.insert(format!("{p}.attn_norm"), vec![d]);
            out.insert(format!("{p}.mlp_norm"), vec![d]);
            out.insert(format!("{p}.attn.q"), vec![d, q_width]);
            out.insert(format!("{p}.attn.k"), vec![d, kv_width]);
            out.insert(format!("{p}.attn.v"), vec![d, kv_width]);
            out.insert(format!("{p}.attn.o"), vec![q_width, d]);
            out.insert(format!("{p}.attn.q_norm"), vec![shape.head_dim]);
            out.insert(format!("{p}.attn.k_norm"), vec![shape.head_dim]);
            match *kind {
                LayerKind::Dense => {
                    for (name, dims) in MLP_TENSORS.iter().zip(&mlp_dims) {
                        out.insert(format!("{p}.mlp.{name}"), dims.clone());
                    }
                }
                LayerKind::Moe { experts } => {
                    out.insert(format!("{p}.router"), vec![d, experts]);
                    for j in 1..=experts {
                        let e = expert_prefix(i + 1, j);
                        for (name, dims) in MLP_TENSORS.iter().zip(&mlp_dims) {
                            out.insert(format!("{e}.{name}"), dims.clone());
                        }
                    }
                }
            }
        }
        out
    }

    /// Checks that exactly the tensors required by the shape are present.
    pub fn validate(&self) -> Result<()> {
        let shape = self.shape.clone().validate()?;
        let kinds = self.layer_kinds();
        for (i, kind) in kinds.iter().enumerate() {
            if let LayerKind::Moe { experts } = *kind {
                let moe = shape.moe.ok_or_else(|| Error::InvalidShape {
                    field: "moe",
                    reason: format!("layer {} stores a router but the shape is dense", i + 1),
                })?;
                if experts < moe.top_k {
                    return Err(Error::InvalidShape {
                        field: "moe.top_k",
                        reason: format!(
                            "layer {} has {experts} experts, fewer than top_k {}",
                            i + 1,
                            moe.top_k
                        ),
                    });
                }
            }
        }
        let expected = Self::expected_tensors(&shape, &kinds);
        for (name, dims) in &expected {
            let t = self.get(name)?;
            if t.shape() != dims.as_slice() {
                return Err(Error::DimensionMismatch {
                    tensor: name.clone(),
                    expected: dims.clone(),
                    found: t.shape().to_vec(),
                });
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue(name.clone()));
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::UnexpectedTensor(extra.clone()));
        }
        Ok(())
    }
}

/// Encodes the container; returns the number of bytes written.
pub fn write_weights(container: &WeightContainer, sink: &mut impl Write) -> Result<usize> {
    let config = serde_json::to_vec(&container.shape)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&WEIGHTS_MAGIC);
    binio::write_u32(&mut buf, WEIGHTS_VERSION)?;
    binio::write_u32(&mut buf, binio::to_u32(config.len(), "config length")?)?;
    buf.extend_from_slice(&config);
    for (name, tensor) in &container.tensors {
        binio::write_u32(&mut buf, binio::to_u32(name.len(), "name length")?)?;
        buf.extend_from_slice(name.as_bytes());
        binio::write_u32(&mut buf, binio::to_u32(tensor.ndim(), "ndim")?)?;
        for &dim in tensor.shape() {
            binio::write_u32(&mut buf, binio::to_u32(dim, "dim")?)?;
        }
        binio::write_f32s(&mut buf, tensor.iter())?;
    }
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(buf.len())
}

/// Decodes and validates a `D2MW` stream.
pub fn read_weights(source: &mut impl Read) -> Result<WeightContainer> {
    let container = read_weights_unchecked(source)?;
    container.validate()?;
    Ok(container)
}

/// Decodes without checking the tensor set against the shape.
pub fn read_weights_unchecked(source: &mut impl Read) -> Result<WeightContainer> {
    binio::read_magic(source, WEIGHTS_MAGIC)?;
    binio::read_version(source, WEIGHTS_VERSION)?;
    let config_len = binio::read_u32(source, "config length")? as usize;
    let config = binio::read_bytes(source, config_len, "config")?;
    let shape: ModelShape = serde_json::from_slice(&config)?;
    let mut container = WeightContainer::new(shape);
    loop {
        let mut len_bytes = [0u8; 4];
        let got = read_up_to(source, &mut len_bytes)?;
        if got == 0 {
            break;
        }
        if got < 4 {
            return Err(Error::TruncatedPayload("partial tensor entry header".into()));
        }
        let name_len = u32::from_le_bytes(len_bytes) as usize;
        let name = String::from_utf8(binio::read_bytes(source, name_len, "tensor name")?)
            .map_err(|e| Error::InvalidConfig(format!("tensor name is not UTF-8: {e}")))?;
        let ndim = binio::read_u32(source, "ndim")? as usize;
        if ndim > 8 {
            return Err(Error::OutOfRange(format!("tensor `{name}` claims {ndim} dims")));
        }
        let dims = (0..ndim)
            .map(|_| binio::read_u32(source, "dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::OutOfRange(format!("tensor `{name}` is too large")))?;
        let data = binio::read_f32s(source, count, &name)?;
        let tensor = ArrayD::from_shape_vec(IxDyn(&dims), data).expect("length checked");
        if container.tensors.insert(name.clone(), tensor).is_some() {
            return Err(Error::InvalidConfig(format!("duplicate tensor `{name}`")));
        }
    }
    Ok(container)
}

fn read_up_to(source: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match source.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init::{random_dense, InitOptions};

    fn toy_shape() -> ModelShape {
        ModelShape {
            num_layers: 2,
            hidden_dim: 8,
            mlp_dim: 12,
            num_heads: 2,
            num_kv_heads: 1,
            head_dim: 4,
            vocab_size: 11,
            tied_embedding: true,
            moe: None,
        }
    }

    #[test]
    fn dense_round_trip() {
        let model = random_dense(&toy_shape(), &InitOptions::seeded(5)).unwrap();
        let mut buf = Vec::new();
        let n = write_weights(&model, &mut buf).unwrap();
        assert_eq!(n, buf.len());
        let back = read_weights(&mut buf.as_slice()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn missing_tensor() {
        let mut model = random_dense(&toy_shape(), &InitOptions::seeded(5)).unwrap();
        model.tensors.remove("layer.1.mlp.down");
        let mut buf = Vec::new();
        write_weights(&model, &mut buf).unwrap();
        assert!(matches!(
            read_weights(&mut buf.as_slice()),
            Err(Error::MissingTensor(name)) if name == "layer.1.mlp.down"
        ));
    }

    #[test]
    fn dimension_mismatch() {
        let mut model = random_dense(&toy_shape(), &InitOptions::seeded(5)).unwrap();
        model.insert("layer.2.mlp.up", ArrayD::zeros(IxDyn(&[8, 13])));
        let mut buf = Vec::new();
        write_weights(&model, &mut buf).unwrap();
        assert!(matches!(
            read_weights(&mut buf.as_slice()),
            Err(Error::DimensionMismatch { tensor, .. }) if tensor == "layer.2.mlp.up"
        ));
    }

    #[test]
    fn extra_tensor() {
        let mut model = random_dense(&toy_shape(), &InitOptions::seeded(5)).unwrap();
        model.insert("layer.1.bias", ArrayD::zeros(IxDyn(&[8])));
        assert!(matches!(model.validate(), Err(Error::UnexpectedTensor(_))));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let model = random_dense(&toy_shape(), &InitOptions::seeded(5)).unwrap();
        let mut buf = Vec::new();
        write_weights(&model, &mut buf).unwrap();
        let mut wrong = buf.clone();
        wrong[0] = b'X';
        assert!(matches!(
            read_weights(&mut wrong.as_slice()),
            Err(Error::BadMagic { .. })
        ));
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            read_weights(&mut buf.as_slice()),
            Err(Error::TruncatedPayload(_))
        ));
    }

    #[test]
    fn untied_head_is_required() {
        let shape = ModelShape {
            tied_embedding: false,
            ..toy_shape()
        };
        let model = random_dense(&shape, &InitOptions::seeded(1)).unwrap();
        model.validate().unwrap();
        assert_eq!(model.get("lm_head").unwrap().shape(), &[8, 11]);
    }
}
