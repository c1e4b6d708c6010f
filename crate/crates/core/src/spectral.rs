//! Singular-value spectra of GLU gating matrices.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneModel;
use crate::error::{Error, Result};
use crate::extension::ExtendedModel;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 100;

/// Thin SVD `A = U diag(s) Vᵀ` with `s` sorted in descending order.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `m × k` column-orthonormal factor (row-major), `k = min(m, n)`.
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    /// `n × k` column-orthonormal factor (row-major).
    pub v: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

/// One-sided (Hestenes) Jacobi SVD of a row-major `rows × cols` matrix.
pub fn jacobi_svd(a: &[f64], rows: usize, cols: usize) -> Svd {
    assert_eq!(a.len(), rows * cols);
    if rows < cols {
        // Decompose the transpose and swap the factors.
        let mut t = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        let svd = jacobi_svd(&t, cols, rows);
        return Svd {
            u: svd.v,
            s: svd.s,
            v: svd.u,
            rows,
            cols,
        };
    }
    let (m, n) = (rows, cols);
    // Work column-major: w[j] is column j of A, rotated in place.
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[i * n + j]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let tol = 1e-15;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = w[p].iter().map(|x| x * x).sum();
                let beta: f64 = w[q].iter().map(|x| x * x).sum();
                let gamma: f64 = w[p].iter().zip(&w[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for cols in [&mut w, &mut v] {
                    let (lo, hi) = cols.split_at_mut(q);
                    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                        let (xp, xq) = (*x, *y);
                        *x = c * xp - s * xq;
                        *y = s * xp + c * xq;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = w.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let mut u = vec![0.0; m * n];
    let mut vv = vec![0.0; n * n];
    let mut s = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        s.push(norms[j]);
        for i in 0..m {
            u[i * n + k] = if norms[j] > 0.0 { w[j][i] / norms[j] } else { 0.0 };
        }
        for i in 0..n {
            vv[i * n + k] = v[j][i];
        }
    }
    Svd {
        u,
        s,
        v: vv,
        rows,
        cols,
    }
}

pub fn singular_values<S: Scalar>(matrix: &Tensor<S>) -> Result<Vec<f64>> {
    if matrix.shape().len() != 2 {
        return Err(Error::Contract(format!(
            "singular values need a matrix, got shape {:?}",
            matrix.shape()
        )));
    }
    let a: Vec<f64> = matrix.data().iter().map(|x| x.f64()).collect();
    Ok(jacobi_svd(&a, matrix.shape()[0], matrix.shape()[1]).s)
}

/// Sorts descending and divides by the largest value. An all-zero input
/// stays all-zero.
pub fn normalize_spectrum(values: &[f64]) -> Vec<f64> {
    let mut s = values.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let max = s.first().copied().unwrap_or(0.0);
    if max > 0.0 {
        s.iter_mut().for_each(|x| *x /= max);
    }
    s
}

/// `1 − mean(s)` of a max-normalized spectrum: 0 when flat, approaching 1
/// when a single direction dominates. This summary is our own construction.
pub fn skewness_metric(spectrum: &[f64]) -> Result<f64> {
    if spectrum.is_empty() {
        return Err(Error::Contract("skewness of an empty spectrum".into()));
    }
    if (spectrum[0] - 1.0).abs() > 1e-9 || spectrum.windows(2).any(|w| w[1] > w[0] + 1e-12) {
        return Err(Error::Contract(
            "skewness needs a max-normalized, non-increasing spectrum".into(),
        ));
    }
    Ok(1.0 - spectrum.iter().sum::<f64>() / spectrum.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Owner {
    Backbone,
    Adapter,
}

impl fmt::Display for Owner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Owner::Backbone => "backbone",
            Owner::Adapter => "adapter",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixSpectrum {
    pub owner: Owner,
    pub layer: usize,
    /// Descending singular values divided by the largest.
    pub values: Vec<f64>,
    pub zero_matrix: bool,
    /// `None` for a zero matrix.
    pub skewness: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub matrices: Vec<MatrixSpectrum>,
}

impl SpectrumReport {
    /// Mean skewness over the non-zero matrices of one owner.
    pub fn mean_skewness(&self, owner: Owner) -> Option<f64> {
        let v: Vec<f64> = self
            .matrices
            .iter()
            .filter(|m| m.owner == owner)
            .filter_map(|m| m.skewness)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// CSV with header `owner,layer,index,value,zero_matrix`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("owner,layer,index,value,zero_matrix\n");
        for m in &self.matrices {
            for (i, v) in m.values.iter().enumerate() {
                out.push_str(&format!("{},{},{},{},{}\n", m.owner, m.layer, i, v, m.zero_matrix));
            }
        }
        out
    }
}

fn spectrum_of<S: Scalar>(params: &ParamStore<S>, id: ParamId, owner: Owner, layer: usize) -> Result<MatrixSpectrum> {
    let raw = singular_values(params.get(id))?;
    let zero_matrix = raw.iter().all(|&x| x == 0.0);
    let values = normalize_spectrum(&raw);
    let skewness = if zero_matrix {
        None
    } else {
        Some(skewness_metric(&values)?)
    };
    Ok(MatrixSpectrum {
        owner,
        layer,
        values,
        zero_matrix,
        skewness,
    })
}

/// Spectra of every backbone `W_g`.
pub fn backbone_spectra<S: Scalar>(model: &BackboneModel<S>) -> Result<SpectrumReport> {
    let matrices = model
        .layout
        .blocks
        .iter()
        .enumerate()
        .map(|(l, b)| spectrum_of(&model.params, b.w_g, Owner::Backbone, l))
        .collect::<Result<_>>()?;
    Ok(SpectrumReport { matrices })
}

/// Spectra of every backbone `W_g` and every adapter `A_g`.
pub fn gating_spectra<S: Scalar>(model: &ExtendedModel<S>) -> Result<SpectrumReport> {
    let mut matrices: Vec<MatrixSpectrum> = model
        .backbone
        .blocks
        .iter()
        .enumerate()
        .map(|(l, b)| spectrum_of(&model.params, b.w_g, Owner::Backbone, l))
        .collect::<Result<_>>()?;
    for (l, a) in model.adapters() {
        matrices.push(spectrum_of(&model.params, a.a_g, Owner::Adapter, l)?);
    }
    Ok(SpectrumReport { matrices })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reconstructs_input() {
        let a = [3.0, 1.0, -2.0, 0.5, 4.0, 1.5, -1.0, 2.0, 0.0, 1.0, 1.0, -3.0];
        for (m, n) in [(4, 3), (3, 4), (2, 6)] {
            let svd = jacobi_svd(&a, m, n);
            let k = m.min(n);
            assert_eq!(svd.s.len(), k);
            for i in 0..m {
                for j in 0..n {
                    let r: f64 = (0..k).map(|p| svd.u[i * k + p] * svd.s[p] * svd.v[j * k + p]).sum();
                    assert!((r - a[i * n + j]).abs() < 1e-12, "({m}x{n}) entry {i},{j}");
                }
            }
            assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn diagonal_and_identity() {
        let eye = Tensor::<f64>::eye(3);
        assert_eq!(normalize_spectrum(&singular_values(&eye).unwrap()), vec![1.0, 1.0, 1.0]);
        let diag = Tensor::<f64>::from_f64(&[3, 3], &[4.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(
            normalize_spectrum(&singular_values(&diag).unwrap()),
            vec![1.0, 0.5, 0.0]
        );
    }

    #[test]
    fn skewness_examples() {
        assert_eq!(skewness_metric(&[1.0; 5]).unwrap(), 0.0);
        assert_eq!(skewness_metric(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 0.75);
        assert!((skewness_metric(&[1.0, 0.5, 0.25]).unwrap() - 5.0 / 12.0).abs() < 1e-15);
        assert!(matches!(skewness_metric(&[]), Err(Error::Contract(_))));
        assert!(skewness_metric(&[0.5, 1.0]).is_err());
    }

    #[test]
    fn zero_matrix_spectrum() {
        let mut store = ParamStore::<f32>::new();
        let id = store.insert("z", Tensor::zeros(&[4, 3]));
        let s = spectrum_of(&store, id, Owner::Adapter, 0).unwrap();
        assert!(s.zero_matrix);
        assert_eq!(s.values, vec![0.0; 3]);
        assert_eq!(s.skewness, None);
    }
}
