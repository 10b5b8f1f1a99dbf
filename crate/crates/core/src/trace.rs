//! Per-layer activation traces and the `D2MT` stream format.
//!
//! Layout: magic `D2MT` | version u32 | L u32 | T u32 | d u32 | every `h`
//! matrix (layers 1..L, row-major T x d, f32-LE) | every `y` matrix.

use std::io::{Read, Write};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::binio::{self, storage_round};
use crate::error::{Error, Result};

pub const TRACE_MAGIC: [u8; 4] = *b"D2MT";
pub const TRACE_VERSION: u32 = 1;
const HEADER_BYTES: usize = 20;

/// Hidden states captured from a forward pass.
///
/// `mlp_inputs[l]` is the post-attention residual state `h` of layer `l + 1`
/// and `layer_outputs[l]` its output `y`, each `T x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    pub mlp_inputs: Vec<Array2<f64>>,
    pub layer_outputs: Vec<Array2<f64>>,
}

impl ActivationTrace {
    pub fn new(mlp_inputs: Vec<Array2<f64>>, layer_outputs: Vec<Array2<f64>>) -> Result<Self> {
        let trace = ActivationTrace {
            mlp_inputs,
            layer_outputs,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn num_layers(&self) -> usize {
        self.mlp_inputs.len()
    }

    pub fn seq_len(&self) -> usize {
        self.mlp_inputs.first().map_or(0, |m| m.nrows())
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_inputs.first().map_or(0, |m| m.ncols())
    }

    /// `h` of 1-based layer `l`.
    pub fn h(&self, l: usize) -> &Array2<f64> {
        &self.mlp_inputs[l - 1]
    }

    /// `y` of 1-based layer `l`.
    pub fn y(&self, l: usize) -> &Array2<f64> {
        &self.layer_outputs[l - 1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.mlp_inputs.is_empty() {
            return Err(Error::OutOfRange("trace has no layers".into()));
        }
        if self.mlp_inputs.len() != self.layer_outputs.len() {
            return Err(Error::OutOfRange(format!(
                "trace has {} h-matrices but {} y-matrices",
                self.mlp_inputs.len(),
                self.layer_outputs.len()
            )));
        }
        let dims = self.mlp_inputs[0].dim();
        for (kind, set) in [("h", &self.mlp_inputs), ("y", &self.layer_outputs)] {
            for (i, m) in set.iter().enumerate() {
                if m.dim() != dims {
                    return Err(Error::DimensionMismatch {
                        tensor: format!("{kind}[{}]", i + 1),
                        expected: vec![dims.0, dims.1],
                        found: vec![m.nrows(), m.ncols()],
                    });
                }
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteValue(format!("{kind}[{}]", i + 1)));
                }
            }
        }
        Ok(())
    }

    /// Total size of the encoded stream.
    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES + 2 * self.num_layers() * self.seq_len() * self.hidden_dim() * 4
    }
}

/// Encodes `trace` as a `D2MT` stream and returns the number of bytes written.
pub fn write_trace(trace: &ActivationTrace, sink: &mut impl Write) -> Result<usize> {
    trace.validate()?;
    let mut n = 0;
    sink.write_all(&TRACE_MAGIC)?;
    n += 4;
    n += binio::write_u32(sink, TRACE_VERSION)?;
    n += binio::write_u32(sink, binio::to_u32(trace.num_layers(), "L")?)?;
    n += binio::write_u32(sink, binio::to_u32(trace.seq_len(), "T")?)?;
    n += binio::write_u32(sink, binio::to_u32(trace.hidden_dim(), "d")?)?;
    for m in trace.mlp_inputs.iter().chain(&trace.layer_outputs) {
        n += binio::write_f32s(sink, m.iter())?;
    }
    sink.flush()?;
    Ok(n)
}

pub fn read_trace(source: &mut impl Read) -> Result<ActivationTrace> {
    binio::read_magic(source, TRACE_MAGIC)?;
    binio::read_version(source, TRACE_VERSION)?;
    let layers = binio::read_u32(source, "L")? as usize;
    let seq = binio::read_u32(source, "T")? as usize;
    let dim = binio::read_u32(source, "d")? as usize;
    if layers == 0 || seq == 0 || dim == 0 {
        return Err(Error::OutOfRange(format!(
            "trace header has an empty dimension (L={layers}, T={seq}, d={dim})"
        )));
    }
    let mut read_set = |kind: &str| -> Result<Vec<Array2<f64>>> {
        (1..=layers)
            .map(|l| {
                let what = format!("{kind}[{l}]");
                let data = binio::read_f32s(source, seq * dim, &what)?;
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteValue(what));
                }
                Ok(Array2::from_shape_vec((seq, dim), data).expect("length checked"))
            })
            .collect()
    };
    let h = read_set("h")?;
    let y = read_set("y")?;
    ActivationTrace::new(h, y)
}

/// Declares layer `base + offset` a noisy copy of layer `base`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Redundancy {
    pub base: usize,
    pub offset: usize,
    pub noise_scale: f64,
}

impl Redundancy {
    pub fn new(base: usize, offset: usize, noise_scale: f64) -> Self {
        Redundancy {
            base,
            offset,
            noise_scale,
        }
    }
}

/// Deterministic synthetic trace.
///
/// Every layer starts as independent standard-normal `h` and `y`; each
/// redundancy entry (applied in order) then overwrites layer `base + offset`
/// with layer `base` plus `noise_scale`-scaled Gaussian noise. Values are
/// rounded to on-disk precision so the trace round-trips bit-exactly.
pub fn synth_trace(
    num_layers: usize,
    seq_len: usize,
    hidden_dim: usize,
    redundancy: &[Redundancy],
    seed: u64,
) -> Result<ActivationTrace> {
    if num_layers == 0 || seq_len == 0 || hidden_dim == 0 {
        return Err(Error::OutOfRange("L, T and d must be positive".into()));
    }
    for r in redundancy {
        if r.base == 0 || r.offset == 0 || r.base + r.offset > num_layers {
            return Err(Error::OutOfRange(format!(
                "redundancy (base {}, offset {}) outside 1..={num_layers}",
                r.base, r.offset
            )));
        }
        if !(r.noise_scale >= 0.0 && r.noise_scale.is_finite()) {
            return Err(Error::OutOfRange(format!("noise scale {}", r.noise_scale)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussian = |rows: usize, cols: usize| -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
    };
    let mut h: Vec<Array2<f64>> = (0..num_layers).map(|_| gaussian(seq_len, hidden_dim)).collect();
    let mut y: Vec<Array2<f64>> = (0..num_layers).map(|_| gaussian(seq_len, hidden_dim)).collect();
    for r in redundancy {
        let (src, dst) = (r.base - 1, r.base + r.offset - 1);
        h[dst] = &h[src] + &(gaussian(seq_len, hidden_dim) * r.noise_scale);
        y[dst] = &y[src] + &(gaussian(seq_len, hidden_dim) * r.noise_scale);
    }
    for m in h.iter_mut().chain(y.iter_mut()) {
        m.mapv_inplace(storage_round);
    }
    ActivationTrace::new(h, y)
}
