//! Latent-space analysis: interpolation between virtual raters, PCA of
//! the codebook, principal-component performance sweeps, code norms.
//!
//! PCA runs on the sample covariance of the mean-centered code rows
//! (1/(R−1) normalization) via a cyclic Jacobi eigensolver — the matrices
//! here are tiny. Components carry a fixed sign convention (largest-
//! magnitude entry positive) so reports are reproducible.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::eval::{group_aggregate, jt_index};
use crate::latent::LatentCodebook;
use crate::model::FittedModel;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Orthonormal basis of the codebook with its variance spectrum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    /// Mean code (length M).
    pub mean: Vec<f64>,
    /// Principal axes, one row per component, descending variance.
    pub components: Vec<Vec<f64>>,
    /// Eigenvalues of the sample covariance, descending, non-negative.
    pub eigenvalues: Vec<f64>,
    /// Explained-variance ratios; sum to 1 when any variance exists.
    pub ratios: Vec<f64>,
}

/// Straight-line interpolation `z0 + α·(z1 − z0)`.
pub fn interpolate(z0: &[f64], z1: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if z0.len() != z1.len() {
        return Err(Error::shape(
            "interpolate",
            format!("{} vs {}", z0.len(), z1.len()),
        ));
    }
    Ok(z0
        .iter()
        .zip(z1)
        .map(|(a, b)| a + alpha * (b - a))
        .collect())
}

/// Test-set rank index for each code in `codes`, group-aggregated.
pub fn performance_curve(
    model: &FittedModel,
    codes: &[Vec<f64>],
    ds: &Dataset,
) -> Result<Vec<(usize, f64)>> {
    let gold = ds.group_gold_labels()?;
    let labels: Vec<usize> = gold.iter().map(|&(_, y)| y).collect();
    let x = ds.all_features();
    let mut out = Vec::with_capacity(codes.len());
    for (i, z) in codes.iter().enumerate() {
        let scores = model.scores_with_code(&x, z)?;
        let pairs: Vec<(u64, f64)> = ds
            .samples
            .iter()
            .map(|s| s.group_id)
            .zip(scores)
            .collect();
        let units: Vec<f64> = group_aggregate(&pairs).into_iter().map(|(_, s)| s).collect();
        out.push((i, jt_index(&units, &labels)?));
    }
    Ok(out)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (flat m×m).
/// Returns (eigenvalues, eigenvectors as rows), unsorted.
fn jacobi_eigh(sym: &[f64], m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = sym.to_vec();
    // v starts as identity; rows accumulate the rotations
    let mut v = vec![0.0; m * m];
    for i in 0..m {
        v[i * m + i] = 1.0;
    }
    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for p in 0..m {
            for q in 0..m {
                if p != q {
                    s += a[p * m + q] * a[p * m + q];
                }
            }
        }
        s
    };
    let scale: f64 = sym.iter().map(|x| x * x).sum::<f64>().max(1e-300);
    for _sweep in 0..100 {
        if off(&a) <= 1e-28 * scale {
            break;
        }
        for p in 0..m {
            for q in p + 1..m {
                let apq = a[p * m + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * m + p];
                let aqq = a[q * m + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..m {
                    let akp = a[k * m + p];
                    let akq = a[k * m + q];
                    a[k * m + p] = c * akp - s * akq;
                    a[k * m + q] = s * akp + c * akq;
                }
                for k in 0..m {
                    let apk = a[p * m + k];
                    let aqk = a[q * m + k];
                    a[p * m + k] = c * apk - s * aqk;
                    a[q * m + k] = s * apk + c * aqk;
                }
                for k in 0..m {
                    let vpk = v[p * m + k];
                    let vqk = v[q * m + k];
                    v[p * m + k] = c * vpk - s * vqk;
                    v[q * m + k] = s * vpk + c * vqk;
                }
            }
        }
    }
    let eigenvalues: Vec<f64> = (0..m).map(|i| a[i * m + i]).collect();
    (eigenvalues, v)
}

/// PCA of the code matrix (R×M): eigendecomposition of the sample
/// covariance of the mean-centered rows.
pub fn pca(codes: &Tensor) -> Result<PcaBasis> {
    if codes.rank() != 2 {
        return Err(Error::shape("pca", format!("want R×M, got {:?}", codes.shape())));
    }
    let (r, m) = (codes.dim(0), codes.dim(1));
    if r < 2 {
        return Err(Error::InvalidArgument(format!(
            "pca needs at least 2 rows, got {}",
            r
        )));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("pca needs at least 1 column".into()));
    }
    let data = codes.data();
    let mut mean = vec![0.0; m];
    for i in 0..r {
        for j in 0..m {
            mean[j] += data[i * m + j];
        }
    }
    for v in &mut mean {
        *v /= r as f64;
    }
    let mut cov = vec![0.0; m * m];
    for i in 0..r {
        for a in 0..m {
            let da = data[i * m + a] - mean[a];
            for b in a..m {
                cov[a * m + b] += da * (data[i * m + b] - mean[b]);
            }
        }
    }
    for a in 0..m {
        for b in a..m {
            let v = cov[a * m + b] / (r - 1) as f64;
            cov[a * m + b] = v;
            cov[b * m + a] = v;
        }
    }

    let (eigenvalues, vectors) = jacobi_eigh(&cov, m);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]).then(a.cmp(&b)));

    let mut sorted_values = Vec::with_capacity(m);
    let mut components = Vec::with_capacity(m);
    for &i in &order {
        sorted_values.push(eigenvalues[i].max(0.0));
        // eigenvector i is the i-th column of the accumulated rotations
        let mut comp: Vec<f64> = (0..m).map(|k| vectors[i * m + k]).collect();
        // sign convention: the largest-magnitude entry is positive
        let lead = comp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        if comp[lead] < 0.0 {
            for c in &mut comp {
                *c = -*c;
            }
        }
        components.push(comp);
    }
    let total: f64 = sorted_values.iter().sum();
    let ratios = if total > 0.0 {
        sorted_values.iter().map(|&l| l / total).collect()
    } else {
        vec![0.0; m]
    };
    Ok(PcaBasis {
        mean,
        components,
        eigenvalues: sorted_values,
        ratios,
    })
}

impl PcaBasis {
    /// Projection of a code onto component `c` (after centering).
    pub fn project(&self, z: &[f64], c: usize) -> f64 {
        self.components[c]
            .iter()
            .zip(z.iter().zip(&self.mean))
            .map(|(v, (zi, mi))| v * (zi - mi))
            .sum()
    }

    /// Code at coordinate λ along component `c` from the mean.
    pub fn point(&self, c: usize, lambda: f64) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.components[c])
            .map(|(m, v)| m + lambda * v)
            .collect()
    }
}

/// Default sweep grid for component `c`: evenly spaced between the
/// smallest and largest projection of the actual rater codes.
pub fn default_sweep_grid(
    basis: &PcaBasis,
    component: usize,
    codes: &Tensor,
    points: usize,
) -> Result<Vec<f64>> {
    if component >= basis.components.len() {
        return Err(Error::InvalidArgument(format!(
            "component {} out of {}",
            component,
            basis.components.len()
        )));
    }
    if points < 2 {
        return Err(Error::InvalidArgument("sweep grid needs ≥ 2 points".into()));
    }
    let projections: Vec<f64> = (0..codes.dim(0))
        .map(|r| basis.project(codes.row(r), component))
        .collect();
    let lo = projections.iter().cloned().fold(f64::MAX, f64::min);
    let hi = projections.iter().cloned().fold(f64::MIN, f64::max);
    Ok((0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect())
}

/// Rank index along one principal component: evaluates `mean + λ·v_c`
/// for every λ in the grid.
pub fn component_sweep(
    model: &FittedModel,
    basis: &PcaBasis,
    component: usize,
    grid: &[f64],
    ds: &Dataset,
) -> Result<Vec<(f64, f64)>> {
    if component >= basis.components.len() {
        return Err(Error::InvalidArgument(format!(
            "component {} out of {}",
            component,
            basis.components.len()
        )));
    }
    let codes: Vec<Vec<f64>> = grid.iter().map(|&l| basis.point(component, l)).collect();
    let curve = performance_curve(model, &codes, ds)?;
    Ok(grid.iter().copied().zip(curve.into_iter().map(|(_, jt)| jt)).collect())
}

/// Euclidean norm of each rater's code, in rater order.
pub fn code_norms(cb: &LatentCodebook) -> Vec<(String, f64)> {
    (0..cb.num_raters())
        .map(|r| {
            let norm = cb.code(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            (cb.rater_ids[r].clone(), norm)
        })
        .collect()
}
