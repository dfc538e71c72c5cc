//! Group-wise ZCA / PCA whitening of a mini-batch.

use super::{BatchStats, DbnState, ForwardCache, GroupCache, NormMode, Result};
use crate::linalg::{sym_eig, Matrix};

pub(super) fn whiten_batch(state: &DbnState, x: &Matrix) -> Result<(Matrix, Vec<GroupCache>, BatchStats)> {
    let ranges = state.groups();
    let eps = state.epsilon();
    let mode = state.mode();
    let per_group = state.exec.map_slice(&ranges, |range| -> Result<(Matrix, GroupCache, Matrix)> {
        let block = x.rows_range(range.start, range.end);
        let mean = block.mean_column();
        let centered = block.sub_column(&mean);
        let k = range.len();
        let mut cov = centered.gram_scaled();
        for i in 0..k {
            cov[(i, i)] += eps;
        }
        let eig = sym_eig(&cov)?;
        let u = eig.pca_whitening()?;
        let xtilde = u.matmul(&centered);
        let (out, applied) = match mode {
            NormMode::Pca => (xtilde.clone(), u),
            _ => (eig.eigenvectors.matmul(&xtilde), eig.eigenvectors.matmul(&u)),
        };
        Ok((out, GroupCache { rows: range.clone(), mean, eig, xtilde }, applied))
    });

    let mut outputs = Vec::with_capacity(ranges.len());
    let mut groups = Vec::with_capacity(ranges.len());
    let mut mean = Vec::with_capacity(x.rows());
    let mut whitening = Vec::with_capacity(ranges.len());
    for res in per_group {
        let (out, cache, applied) = res?;
        mean.extend_from_slice(&cache.mean);
        outputs.push(out);
        groups.push(cache);
        whitening.push(applied);
    }
    Ok((Matrix::vstack(&outputs), groups, BatchStats { mean, whitening }))
}

/// Training-mode forward: whitens each group with its batch statistics and
/// folds them into the running averages.
pub fn dbn_forward(state: &mut DbnState, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
    state.forward_train(x)
}

/// Inference forward with the running mean and running whitening matrix.
pub fn dbn_infer(state: &DbnState, x: &Matrix) -> Result<Matrix> {
    state.infer(x)
}
