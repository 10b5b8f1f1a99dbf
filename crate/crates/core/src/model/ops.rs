//! Row-wise numerical kernels used by the toy transformer.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

pub const NORM_EPS: f64 = 1e-6;

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Layer normalization of one vector with a learned scale and no bias.
pub fn layer_norm_row(x: ArrayView1<f64>, scale: ArrayView1<f64>) -> Array1<f64> {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + NORM_EPS).sqrt();
    Array1::from_iter(x.iter().zip(scale).map(|(v, g)| (v - mean) * inv * g))
}

/// Row-wise layer normalization of a `T x d` matrix.
pub fn layer_norm(x: &Array2<f64>, scale: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (t, row) in x.axis_iter(Axis(0)).enumerate() {
        out.row_mut(t).assign(&layer_norm_row(row, scale.view()));
    }
    out
}

/// Backward of `layer_norm_row` with respect to its input.
pub fn layer_norm_row_backward(
    x: ArrayView1<f64>,
    scale: ArrayView1<f64>,
    grad_out: ArrayView1<f64>,
) -> Array1<f64> {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + NORM_EPS).sqrt();
    let xhat: Array1<f64> = x.mapv(|v| (v - mean) * inv);
    let g: Array1<f64> = &grad_out * &scale;
    let g_mean = g.sum() / n;
    let gx_mean = (&g * &xhat).sum() / n;
    Array1::from_iter(
        g.iter()
            .zip(&xhat)
            .map(|(gi, xi)| inv * (gi - g_mean - xi * gx_mean)),
    )
}

/// Numerically stable softmax of one row.
pub fn softmax_row(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// Fixed sinusoidal position code added to token embeddings, scaled by `scale`.
pub fn position_code(seq_len: usize, dim: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((seq_len, dim), |(t, i)| {
        let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let angle = t as f64 * freq;
        scale * if i % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

/// Columns `[start, start + width)` of `m`.
pub(crate) fn col_block(m: &Array2<f64>, start: usize, width: usize) -> ndarray::ArrayView2<'_, f64> {
    m.slice(s![.., start..start + width])
}
