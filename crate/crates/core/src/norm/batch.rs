//! Plain batch normalization: per-feature standardization.

use super::{BatchStats, DbnState, ForwardCache, GroupCache, NormError, NormMode, Result};
use crate::linalg::{EigDecomp, Matrix};

/// Standardizes every row by its batch mean and `sqrt(var + ε)`. The cache
/// stores each feature as a one-row group so the generic backward chain can
/// also run on it.
pub(super) fn standardize(state: &DbnState, x: &Matrix) -> (Matrix, Vec<GroupCache>, BatchStats) {
    let eps = state.epsilon();
    let m = x.cols() as f64;
    let mut normalized = Matrix::zeros(x.rows(), x.cols());
    let mut groups = Vec::with_capacity(x.rows());
    let mut means = Vec::with_capacity(x.rows());
    let mut whitening = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mu = row.iter().sum::<f64>() / m;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m + eps;
        let inv = 1.0 / var.sqrt();
        for (o, &v) in normalized.row_mut(r).iter_mut().zip(row) {
            *o = (v - mu) * inv;
        }
        groups.push(GroupCache {
            rows: r..r + 1,
            mean: vec![mu],
            eig: EigDecomp { eigenvalues: vec![var], eigenvectors: Matrix::identity(1) },
            xtilde: normalized.rows_range(r, r + 1),
        });
        means.push(mu);
        whitening.push(Matrix::from_diag(&[inv]));
    }
    (normalized, groups, BatchStats { mean: means, whitening })
}

/// Batch-normalization training forward (updates running statistics).
pub fn bn_forward(state: &mut DbnState, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
    if state.mode() != NormMode::Bn {
        return Err(NormError::InvalidConfig(format!("bn_forward needs a BN-mode state, got {:?}", state.mode())));
    }
    state.forward_train(x)
}

/// Closed-form standardization backward for one feature:
/// `dx = (dx̂ - mean(dx̂) - x̂·mean(dx̂ ⊙ x̂)) / sqrt(var + ε)`.
pub(super) fn standardize_backward(group: &GroupCache, grad: &Matrix) -> Matrix {
    let m = grad.cols() as f64;
    let inv = 1.0 / group.eig.eigenvalues[0].sqrt();
    let xhat = group.xtilde.row(0);
    let g = grad.row(0);
    let mean_g = g.iter().sum::<f64>() / m;
    let mean_gx = g.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / m;
    let data: Vec<f64> = g.iter().zip(xhat).map(|(&gi, &xi)| inv * (gi - mean_g - xi * mean_gx)).collect();
    Matrix::from_rows(&[data])
}
