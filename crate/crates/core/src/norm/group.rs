use std::ops::Range;

use super::{NormError, Result};
use crate::linalg::Matrix;

/// Consecutive row ranges of size `group_size`; the last range holds the
/// remainder when `dim` is not a multiple.
pub fn group_ranges(dim: usize, group_size: usize) -> Result<Vec<Range<usize>>> {
    if group_size == 0 || group_size > dim {
        return Err(NormError::InvalidGroup { group_size, dim });
    }
    Ok((0..dim).step_by(group_size).map(|s| s..(s + group_size).min(dim)).collect())
}

pub fn group_split(x: &Matrix, group_size: usize) -> Result<Vec<Matrix>> {
    Ok(group_ranges(x.rows(), group_size)?.into_iter().map(|r| x.rows_range(r.start, r.end)).collect())
}

pub fn group_merge(blocks: &[Matrix]) -> Matrix {
    Matrix::vstack(blocks)
}
