//! Inter-layer similarity statistics.
//!
//! For layers `l < m` the matrices hold the sequence-averaged cosine
//! similarity of layer outputs (`s_out`) and of MLP inputs (`s_mlp`), and the
//! token-averaged relative norm gap of MLP inputs (`delta_norm`), whose
//! denominator is always the later layer. All three are stored symmetric.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};

use crate::binio;
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::trace::ActivationTrace;

pub const MATRICES_MAGIC: [u8; 4] = *b"D2MS";
pub const MATRICES_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrices {
    pub s_out: Array2<f64>,
    pub s_mlp: Array2<f64>,
    pub delta_norm: Array2<f64>,
}

impl SimilarityMatrices {
    pub fn num_layers(&self) -> usize {
        self.s_out.nrows()
    }

    /// Entries for 1-based layers `(l, m)`.
    pub fn s_out(&self, l: usize, m: usize) -> f64 {
        self.s_out[[l - 1, m - 1]]
    }

    pub fn s_mlp(&self, l: usize, m: usize) -> f64 {
        self.s_mlp[[l - 1, m - 1]]
    }

    pub fn delta_norm(&self, l: usize, m: usize) -> f64 {
        self.delta_norm[[l - 1, m - 1]]
    }

    /// Assembles matrices from their upper triangles (`l < m`); the diagonal
    /// is set to 1 / 1 / 0 and the lower triangle mirrored.
    pub fn from_upper(
        num_layers: usize,
        mut entry: impl FnMut(usize, usize) -> (f64, f64, f64),
    ) -> Self {
        let mut s_out = Array2::eye(num_layers);
        let mut s_mlp = Array2::eye(num_layers);
        let mut delta_norm = Array2::zeros((num_layers, num_layers));
        for l in 1..=num_layers {
            for m in l + 1..=num_layers {
                let (so, sm, dn) = entry(l, m);
                for (a, b) in [(l - 1, m - 1), (m - 1, l - 1)] {
                    s_out[[a, b]] = so;
                    s_mlp[[a, b]] = sm;
                    delta_norm[[a, b]] = dn;
                }
            }
        }
        SimilarityMatrices {
            s_out,
            s_mlp,
            delta_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_layers();
        for (name, m) in [("s_out", &self.s_out), ("s_mlp", &self.s_mlp), ("delta_norm", &self.delta_norm)] {
            if m.dim() != (n, n) {
                return Err(Error::DimensionMismatch {
                    tensor: name.into(),
                    expected: vec![n, n],
                    found: vec![m.nrows(), m.ncols()],
                });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue(name.into()));
            }
        }
        if self.delta_norm.iter().any(|&v| v < 0.0) {
            return Err(Error::OutOfRange("delta_norm has negative entries".into()));
        }
        Ok(())
    }
}

fn row_norms(m: &Array2<f64>) -> Array1<f64> {
    m.map_axis(Axis(1), |r| r.dot(&r).sqrt())
}

fn check_dims(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() || a.nrows() == 0 {
        return Err(Error::DimensionMismatch {
            tensor: "activations".into(),
            expected: vec![a.nrows(), a.ncols()],
            found: vec![b.nrows(), b.ncols()],
        });
    }
    Ok(())
}

/// `(1/T) sum_t cos(a_t, b_t)`.
pub fn seq_avg_cosine(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    check_dims(a, b)?;
    cosine_with_norms(a, b, &row_norms(a), &row_norms(b))
}

fn cosine_with_norms(a: &Array2<f64>, b: &Array2<f64>, na: &Array1<f64>, nb: &Array1<f64>) -> Result<f64> {
    let mut total = 0.0;
    for t in 0..a.nrows() {
        if na[t] == 0.0 || nb[t] == 0.0 {
            return Err(Error::ZeroVector { token: t });
        }
        let c = a.row(t).dot(&b.row(t)) / (na[t] * nb[t]);
        total += c.clamp(-1.0, 1.0);
    }
    Ok(total / a.nrows() as f64)
}

/// `(1/T) sum_t | |a_t| - |b_t| | / |b_t|`.
pub fn norm_mismatch(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    check_dims(a, b)?;
    mismatch_with_norms(&row_norms(a), &row_norms(b))
}

fn mismatch_with_norms(na: &Array1<f64>, nb: &Array1<f64>) -> Result<f64> {
    let mut total = 0.0;
    for (t, (x, y)) in na.iter().zip(nb).enumerate() {
        if *y == 0.0 {
            return Err(Error::ZeroVector { token: t });
        }
        total += (x - y).abs() / y;
    }
    Ok(total / na.len() as f64)
}

pub fn build_matrices(trace: &ActivationTrace) -> Result<SimilarityMatrices> {
    build_matrices_with(trace, Execution::default())
}

/// Builds all three matrices, evaluating layer pairs under `exec`.
pub fn build_matrices_with(trace: &ActivationTrace, exec: Execution) -> Result<SimilarityMatrices> {
    trace.validate()?;
    let layers = trace.num_layers();
    let h_norms: Vec<Array1<f64>> = exec.map(&trace.mlp_inputs, row_norms);
    let y_norms: Vec<Array1<f64>> = exec.map(&trace.layer_outputs, row_norms);
    let pairs: Vec<(usize, usize)> = (1..=layers)
        .flat_map(|l| (l + 1..=layers).map(move |m| (l, m)))
        .collect();
    let entries = exec.map(&pairs, |&(l, m)| -> Result<(f64, f64, f64)> {
        let (i, j) = (l - 1, m - 1);
        let so = cosine_with_norms(trace.y(l), trace.y(m), &y_norms[i], &y_norms[j])?;
        let sm = cosine_with_norms(trace.h(l), trace.h(m), &h_norms[i], &h_norms[j])?;
        let dn = mismatch_with_norms(&h_norms[i], &h_norms[j])?;
        Ok((so, sm, dn))
    });
    let entries = entries.into_iter().collect::<Result<Vec<_>>>()?;
    let mut it = entries.into_iter();
    Ok(SimilarityMatrices::from_upper(layers, |_, _| {
        it.next().expect("one entry per pair")
    }))
}

pub const HEATMAP_FILES: [&str; 3] = ["s_out.csv", "s_mlp.csv", "delta_norm.csv"];

/// Formats one matrix with header `layer,1,...,L` and 9 significant digits.
pub fn heatmap_csv(m: &Array2<f64>) -> String {
    let n = m.nrows();
    let mut out = String::from("layer");
    for l in 1..=n {
        out.push_str(&format!(",{l}"));
    }
    out.push('\n');
    for (i, row) in m.rows().into_iter().enumerate() {
        out.push_str(&(i + 1).to_string());
        for v in row {
            out.push_str(&format!(",{v:.8e}"));
        }
        out.push('\n');
    }
    out
}

/// Writes `s_out.csv`, `s_mlp.csv` and `delta_norm.csv` into `dir`.
pub fn export_heatmap(matrices: &SimilarityMatrices, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (name, m) in HEATMAP_FILES
        .iter()
        .zip([&matrices.s_out, &matrices.s_mlp, &matrices.delta_norm])
    {
        let path = dir.join(name);
        fs::write(&path, heatmap_csv(m))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Parses a heatmap CSV back into a matrix.
pub fn parse_heatmap_csv(text: &str) -> Result<Array2<f64>> {
    let bad = |m: String| Error::InvalidConfig(format!("heatmap csv: {m}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty".into()))?;
    let n = header.split(',').count() - 1;
    let mut data = Vec::with_capacity(n * n);
    for line in lines.filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n + 1 {
            return Err(bad(format!("row `{}` has {} cells", fields[0], fields.len() - 1)));
        }
        for f in &fields[1..] {
            data.push(f.trim().parse::<f64>().map_err(|e| bad(e.to_string()))?);
        }
    }
    Array2::from_shape_vec((data.len() / n.max(1), n), data).map_err(|e| bad(e.to_string()))
}

/// Binary cache: magic `D2MS` | version u32 | L u32 | s_out, s_mlp, delta_norm as f64-LE row-major.
pub fn write_matrices(matrices: &SimilarityMatrices, sink: &mut impl Write) -> Result<usize> {
    matrices.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&MATRICES_MAGIC);
    binio::write_u32(&mut buf, MATRICES_VERSION)?;
    binio::write_u32(&mut buf, binio::to_u32(matrices.num_layers(), "L")?)?;
    for m in [&matrices.s_out, &matrices.s_mlp, &matrices.delta_norm] {
        binio::write_f64s(&mut buf, m.iter())?;
    }
    sink.write_all(&buf)?;
    Ok(buf.len())
}

pub fn read_matrices(source: &mut impl Read) -> Result<SimilarityMatrices> {
    binio::read_magic(source, MATRICES_MAGIC)?;
    binio::read_version(source, MATRICES_VERSION)?;
    let n = binio::read_u32(source, "L")? as usize;
    let mut read = |what: &str| -> Result<Array2<f64>> {
        let data = binio::read_f64s(source, n * n, what)?;
        Ok(Array2::from_shape_vec((n, n), data).expect("length checked"))
    };
    let m = SimilarityMatrices {
        s_out: read("s_out")?,
        s_mlp: read("s_mlp")?,
        delta_norm: read("delta_norm")?,
    };
    m.validate()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{synth_trace, Redundancy};
    use ndarray::array;

    #[test]
    fn cosine_identities() {
        let a = array![[1.0, 2.0, -0.5], [0.3, -0.1, 4.0]];
        assert!((seq_avg_cosine(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((seq_avg_cosine(&a, &(-&a)).unwrap() + 1.0).abs() < 1e-12);
        let b = array![[1.0, 0.0], [0.0, 2.0]];
        let c = array![[0.0, 3.0], [0.0, 1.0]];
        assert_eq!(seq_avg_cosine(&b, &c).unwrap(), 0.5);
    }

    #[test]
    fn zero_rows_are_rejected() {
        let a = array![[1.0, 2.0], [0.0, 0.0]];
        let b = array![[1.0, 2.0], [1.0, 1.0]];
        assert!(matches!(seq_avg_cosine(&a, &b), Err(Error::ZeroVector { token: 1 })));
        assert!(matches!(norm_mismatch(&b, &a), Err(Error::ZeroVector { token: 1 })));
        // zero rows in the numerator side are fine for the norm gap
        assert_eq!(norm_mismatch(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn norm_gap_asymmetry() {
        let b = array![[3.0, 4.0], [1.0, 0.0]];
        assert_eq!(norm_mismatch(&b, &b).unwrap(), 0.0);
        assert_eq!(norm_mismatch(&(&b * 2.0), &b).unwrap(), 1.0);
        assert_eq!(norm_mismatch(&b, &(&b * 2.0)).unwrap(), 0.5);
    }

    #[test]
    fn duplicate_layers_are_perfectly_similar() {
        let trace = synth_trace(4, 6, 5, &[Redundancy::new(2, 1, 0.0)], 1).unwrap();
        let m = build_matrices(&trace).unwrap();
        assert_eq!(m.s_out(2, 3), 1.0);
        assert_eq!(m.s_mlp(2, 3), 1.0);
        assert_eq!(m.delta_norm(2, 3), 0.0);
        for l in 1..=4 {
            assert_eq!(m.s_out(l, l), 1.0);
            assert_eq!(m.s_mlp(l, l), 1.0);
            assert_eq!(m.delta_norm(l, l), 0.0);
        }
    }

    #[test]
    fn heatmap_layout_and_round_trip() {
        let trace = synth_trace(2, 4, 3, &[], 2).unwrap();
        let m = build_matrices(&trace).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = export_heatmap(&m, dir.path()).unwrap();
        assert_eq!(paths.len(), 3);
        let text = fs::read_to_string(&paths[0]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "layer,1,2");
        assert_eq!(lines.len(), 3);
        let back = parse_heatmap_csv(&text).unwrap();
        for (a, b) in back.iter().zip(m.s_out.iter()) {
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0));
        }
    }

    #[test]
    fn cache_round_trip() {
        let trace = synth_trace(3, 4, 3, &[Redundancy::new(1, 1, 0.2)], 2).unwrap();
        let m = build_matrices(&trace).unwrap();
        let mut buf = Vec::new();
        write_matrices(&m, &mut buf).unwrap();
        assert_eq!(read_matrices(&mut buf.as_slice()).unwrap(), m);
    }
}
