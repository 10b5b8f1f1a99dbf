//! Seeded initialization of toy models.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{Attention, Mlp, MoeLayer};
use crate::binio::storage_round;
use crate::config::{ModelShape, RouterConfig};
use crate::error::{Error, Result};
use crate::weights::{LayerKind, WeightContainer};

pub const DEFAULT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitOptions {
    pub seed: u64,
    /// Standard deviation of every projection matrix.
    pub std: f64,
    /// Standard deviation of router weights; 0 gives uniform routing.
    pub router_std: f64,
}

impl InitOptions {
    pub fn seeded(seed: u64) -> Self {
        InitOptions {
            seed,
            std: DEFAULT_INIT_STD,
            router_std: 0.0,
        }
    }
}

/// Gaussian values rounded to on-disk precision, so containers round-trip exactly.
pub(crate) struct Sampler {
    rng: ChaCha8Rng,
}

impl Sampler {
    pub(crate) fn new(seed: u64) -> Self {
        Sampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub(crate) fn tensor(&mut self, dims: &[usize], std: f64) -> ArrayD<f64> {
        if std == 0.0 {
            return ArrayD::zeros(IxDyn(dims));
        }
        let normal = Normal::new(0.0, std).expect("finite std");
        ArrayD::from_shape_simple_fn(IxDyn(dims), || storage_round(normal.sample(&mut self.rng)))
    }

    pub(crate) fn matrix(&mut self, rows: usize, cols: usize, std: f64) -> Array2<f64> {
        self.tensor(&[rows, cols], std)
            .into_dimensionality()
            .expect("2-d")
    }
}

fn fill(shape: &ModelShape, kinds: &[LayerKind], opts: &InitOptions) -> Result<WeightContainer> {
    let shape = shape.clone().validate()?;
    if !(opts.std >= 0.0 && opts.router_std >= 0.0) {
        return Err(Error::OutOfRange("init std must be non-negative".into()));
    }
    let mut sampler = Sampler::new(opts.seed);
    let mut c = WeightContainer::new(shape.clone());
    for (name, dims) in WeightContainer::expected_tensors(&shape, kinds) {
        let t = if name.ends_with("norm") {
            ArrayD::from_elem(IxDyn(&dims), 1.0)
        } else if name.ends_with(".router") {
            sampler.tensor(&dims, opts.router_std)
        } else {
            sampler.tensor(&dims, opts.std)
        };
        c.insert(name, t);
    }
    Ok(c)
}

/// Random dense model; norm scales start at 1.
pub fn random_dense(shape: &ModelShape, opts: &InitOptions) -> Result<WeightContainer> {
    let dense = shape.with_moe(None);
    fill(&dense, &vec![LayerKind::Dense; dense.num_layers], opts)
}

/// Random model in which every layer is sparse with `shape.moe.num_experts` experts.
pub fn random_moe(shape: &ModelShape, opts: &InitOptions) -> Result<WeightContainer> {
    let moe = shape.moe.ok_or_else(|| Error::InvalidShape {
        field: "moe",
        reason: "random_moe needs an MoE shape".into(),
    })?;
    fill(
        shape,
        &vec![LayerKind::Moe { experts: moe.num_experts }; shape.num_layers],
        opts,
    )
}

/// Dimensions of a standalone toy MoE layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyLayerSpec {
    pub hidden_dim: usize,
    pub mlp_dim: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub std: f64,
    pub router_std: f64,
}

impl ToyLayerSpec {
    /// d=8, d_mid=16, N=3, top-1; weight std 0.3, near `1/sqrt(d)`.
    pub fn small() -> Self {
        ToyLayerSpec {
            hidden_dim: 8,
            mlp_dim: 16,
            num_heads: 2,
            num_kv_heads: 1,
            num_experts: 3,
            top_k: 1,
            std: 0.3,
            router_std: 1.0,
        }
    }
}

/// Random standalone MoE layer with non-trivial norm scales.
pub fn random_moe_layer(spec: &ToyLayerSpec, router: RouterConfig, seed: u64) -> MoeLayer {
    let mut s = Sampler::new(seed);
    let d = spec.hidden_dim;
    let dh = d / spec.num_heads;
    let mut scale = |n: usize| -> Array1<f64> {
        let noise = s.tensor(&[n], 0.1);
        Array1::from_iter(noise.iter().map(|v| 1.0 + v))
    };
    let attn_norm = scale(d);
    let mlp_norm = scale(d);
    let q_norm = scale(dh);
    let k_norm = scale(dh);
    let attention = Attention {
        q: s.matrix(d, spec.num_heads * dh, spec.std),
        k: s.matrix(d, spec.num_kv_heads * dh, spec.std),
        v: s.matrix(d, spec.num_kv_heads * dh, spec.std),
        o: s.matrix(spec.num_heads * dh, d, spec.std),
        q_norm,
        k_norm,
        num_heads: spec.num_heads,
        num_kv_heads: spec.num_kv_heads,
        head_dim: dh,
    };
    let experts = (0..spec.num_experts)
        .map(|_| Mlp {
            up: s.matrix(d, spec.mlp_dim, spec.std),
            gate: s.matrix(d, spec.mlp_dim, spec.std),
            down: s.matrix(spec.mlp_dim, d, spec.std),
        })
        .collect();
    MoeLayer {
        attn_norm,
        attention,
        mlp_norm,
        experts,
        router: s.matrix(d, spec.num_experts, spec.router_std),
        top_k: spec.top_k,
        config: router,
        provenance: None,
    }
}

/// Seeded standard-normal matrix.
pub fn random_input(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    Sampler::new(seed).matrix(rows, cols, 1.0)
}
