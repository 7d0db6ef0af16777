use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A fitted PCA: `projected = (rows - mean) · componentsᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    /// `[k, D]`, orthonormal rows.
    pub components: Tensor,
    /// `[n, k]`.
    pub projected: Tensor,
    /// Fraction of total variance per kept component, nonincreasing.
    pub explained_variance_ratio: Vec<f64>,
    /// All singular values of the centered data, descending.
    pub singular_values: Vec<f64>,
}

impl PcaProjection {
    pub fn cumulative_ratio(&self) -> f64 {
        self.explained_variance_ratio.iter().sum()
    }

    /// Map projected coordinates back into the original space (mean added back).
    pub fn reconstruct(&self) -> Result<Tensor> {
        let back = self.projected.matmul(&self.components)?;
        back.add(&Tensor::vector(self.mean.clone()))
    }
}

fn check_rows(rows: &Tensor) -> Result<(usize, usize)> {
    match *rows.shape() {
        [n, d] if n >= 2 && d >= 1 => Ok((n, d)),
        _ => Err(Error::InvalidShape {
            shape: rows.shape().to_vec(),
            reason: "PCA needs an n×D matrix with n ≥ 2".into(),
        }),
    }
}

type CenteredSvd = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>);

/// Centered SVD; returns mean, singular values (descending) and matching right
/// singular vectors as rows, each flipped so its largest-magnitude entry is positive.
fn centered_svd(rows: &Tensor) -> Result<CenteredSvd> {
    let (n, d) = check_rows(rows)?;
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(rows.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, d, |i, j| rows.data()[i * d + j] - mean[j]);
    let svd = x.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| Error::Format("SVD did not produce right singular vectors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let vecs = order
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = vt.row(i).iter().copied().collect();
            let lead = v.iter().enumerate().fold(0, |best, (j, x)| if x.abs() > v[best].abs() { j } else { best });
            if v[lead] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Ok((mean, sv, vecs))
}

/// Top-`k` principal components of `rows` (`n × D`), `1 ≤ k ≤ min(n, D)`.
pub fn pca_fit_project(rows: &Tensor, k: usize) -> Result<PcaProjection> {
    let (n, d) = check_rows(rows)?;
    if k == 0 || k > n.min(d) {
        return Err(Error::Config(format!("PCA dimension {k} is outside 1..={}", n.min(d))));
    }
    let (mean, sv, vecs) = centered_svd(rows)?;
    let total: f64 = sv.iter().map(|s| s * s).sum();
    let explained_variance_ratio = sv[..k].iter().map(|s| if total > 0.0 { s * s / total } else { 0.0 }).collect();
    let components = Tensor::new(vec![k, d], vecs[..k].concat())?;
    let centered = Tensor::from_fn(&[n, d], |i| rows.data()[i] - mean[i % d]);
    let projected = centered.matmul(&components.transpose_last2()?)?;
    Ok(PcaProjection {
        mean,
        components,
        projected,
        explained_variance_ratio,
        singular_values: sv,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvRow {
    pub model: String,
    pub dim: usize,
    /// Cumulative explained variance, in percent.
    pub ev_percent: f64,
}

/// Cumulative explained variance (%) for each named table at each requested dimension.
pub fn explained_variance_table(tables: &[(String, Tensor)], dims: &[usize]) -> Result<Vec<EvRow>> {
    let mut out = Vec::with_capacity(tables.len() * dims.len());
    for (name, rows) in tables {
        let (n, d) = check_rows(rows)?;
        let (_, sv, _) = centered_svd(rows)?;
        let total: f64 = sv.iter().map(|s| s * s).sum();
        for &k in dims {
            if k == 0 || k > n.min(d) {
                return Err(Error::Config(format!("EV dimension {k} is outside 1..={} for {name}", n.min(d))));
            }
            let kept: f64 = sv[..k].iter().map(|s| s * s).sum();
            out.push(EvRow {
                model: name.clone(),
                dim: k,
                ev_percent: if total > 0.0 { 100.0 * kept / total } else { 0.0 },
            });
        }
    }
    Ok(out)
}

/// Joint 2-D PCA of paired truth / recovered rows and their cosine similarities.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityScatter {
    pub truth_xy: Vec<[f64; 2]>,
    pub recovered_xy: Vec<[f64; 2]>,
    /// Cosine similarity of each pair, measured in the original space.
    pub cosine: Vec<f64>,
}

pub fn pe_similarity_scatter(truth: &Tensor, recovered: &Tensor) -> Result<SimilarityScatter> {
    if truth.shape() != recovered.shape() || truth.ndim() != 2 {
        return Err(Error::ShapeMismatch {
            left: truth.shape().to_vec(),
            right: recovered.shape().to_vec(),
            context: "similarity scatter rows",
        });
    }
    let n = truth.shape()[0];
    let joint = Tensor::concat(&[truth, recovered], 0)?;
    let p = pca_fit_project(&joint, 2)?;
    let xy = |i: usize| [p.projected.at(&[i, 0]), p.projected.at(&[i, 1])];
    let cosine = (0..n)
        .map(|i| {
            let (a, b) = (truth.row(i), recovered.row(i));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                (dot / (na * nb)).clamp(-1.0, 1.0)
            }
        })
        .collect();
    Ok(SimilarityScatter {
        truth_xy: (0..n).map(xy).collect(),
        recovered_xy: (n..2 * n).map(xy).collect(),
        cosine,
    })
}
