//! PCA compression of sequential descriptors.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::datamodel::SequentialDescriptor;
use crate::error::{Error, Result};
use crate::heads::l2_normalize;

/// Whitening divides by `sqrt(eigenvalue + WHITEN_EPS)`.
pub const WHITEN_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    dim: usize,
    out_dim: usize,
    mean: Vec<f64>,
    /// `out_dim x dim`, row-major, orthonormal rows.
    components: Vec<f64>,
    /// Covariance eigenvalues for each component, descending.
    explained_variance: Vec<f64>,
    whiten: bool,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i * self.dim..(i + 1) * self.dim]
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    pub fn whiten(&self) -> bool {
        self.whiten
    }

    /// Projection onto the components, without normalization.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(Error::Shape(format!("PCA expects D={}, got {}", self.dim, v.len())));
        }
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        Ok((0..self.out_dim)
            .map(|i| {
                let p: f64 = self.component(i).iter().zip(&centered).map(|(a, b)| a * b).sum();
                if self.whiten {
                    p / (self.explained_variance[i] + WHITEN_EPS).sqrt()
                } else {
                    p
                }
            })
            .collect())
    }

    pub fn apply(&self, v: &[f64]) -> Result<SequentialDescriptor> {
        let mut p = self.project(v)?;
        l2_normalize(&mut p);
        Ok(SequentialDescriptor::new(p, true))
    }

    pub fn apply_all(&self, descs: &[SequentialDescriptor]) -> Result<Vec<SequentialDescriptor>> {
        descs.iter().map(|d| self.apply(d.values())).collect()
    }
}

/// Flip each direction so its largest-magnitude entry is positive.
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0.0f64;
    for &x in v.iter() {
        if x.abs() > best.abs() {
            best = x;
        }
    }
    if best < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Fit the top `out_dim` principal directions of `samples`.
///
/// When there are fewer samples than dimensions the eigenproblem is solved on
/// the `N x N` Gram matrix instead of the `D x D` covariance; both give the
/// same directions.
pub fn pca_fit<V: AsRef<[f64]>>(samples: &[V], out_dim: usize, whiten: bool) -> Result<PcaModel> {
    let n = samples.len();
    let dim = samples.first().map(|s| s.as_ref().len()).unwrap_or(0);
    if out_dim == 0 || out_dim > dim {
        return Err(Error::Config(format!("PCA output dim {out_dim} must be in 1..={dim}")));
    }
    if n <= out_dim {
        return Err(Error::Config(format!("PCA to {out_dim} dims needs more than {out_dim} samples, got {n}")));
    }
    let mut mean = vec![0.0; dim];
    for s in samples {
        let s = s.as_ref();
        if s.len() != dim {
            return Err(Error::Shape(format!("PCA sample has {} values, expected {dim}", s.len())));
        }
        mean.iter_mut().zip(s).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, dim, |i, j| samples[i].as_ref()[j] - mean[j]);
    let scale = 1.0 / (n - 1) as f64;

    let mut pairs: Vec<(f64, Vec<f64>)> = if n > dim {
        let cov = (x.transpose() * &x) * scale;
        let eig = SymmetricEigen::new(cov);
        (0..dim).map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).iter().copied().collect())).collect()
    } else {
        let gram = &x * x.transpose();
        let eig = SymmetricEigen::new(gram);
        (0..n)
            .filter(|&i| eig.eigenvalues[i] > 0.0)
            .map(|i| {
                let lambda = eig.eigenvalues[i];
                let v = x.transpose() * eig.eigenvectors.column(i) / lambda.sqrt();
                (lambda * scale, v.iter().copied().collect())
            })
            .collect()
    };
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    if pairs.len() < out_dim {
        return Err(Error::Config(format!(
            "data has rank {} but {out_dim} components were requested",
            pairs.len()
        )));
    }
    pairs.truncate(out_dim);

    let mut components = Vec::with_capacity(out_dim * dim);
    let mut explained_variance = Vec::with_capacity(out_dim);
    for (lambda, mut v) in pairs {
        // The dual route loses a little orthonormality to rounding.
        l2_normalize(&mut v);
        canonical_sign(&mut v);
        components.extend(v);
        explained_variance.push(lambda.max(0.0));
    }
    if !components.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("PCA eigendecomposition produced non-finite components".into()));
    }
    Ok(PcaModel { dim, out_dim, mean, components, explained_variance, whiten })
}
