//! Datasets: synthetic correlated Gaussians, IDX (MNIST) and CSV ingestion,
//! seeded shuffling and batching.

mod idx;

pub use idx::{encode_idx, load_idx_images, load_idx_labels, mnist_dataset, parse_idx, read_idx, write_idx, IdxTensor};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linalg::{sym_eig, LinalgError, Matrix};
use crate::seed;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("bad IDX magic number {0:#010x}")]
    BadMagic(u32),
    #[error("unsupported IDX type code {0:#04x}")]
    UnsupportedType(u8),
    #[error("truncated IDX file: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("batch size {batch} exceeds dataset size {n} with drop_partial set; epoch would be empty")]
    EmptyEpoch { batch: usize, n: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Features are stored column-per-example (`d × n`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.is_empty() || labels.len() != features.cols() {
            return Err(DataError::InvalidParameters(format!(
                "{} labels for {} examples",
                labels.len(),
                features.cols()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::InvalidParameters(format!("label {bad} out of range for {classes} classes")));
        }
        features.check_finite()?;
        Ok(Dataset { features, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.rows()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_columns(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// First `n` examples (all of them if `n` is larger).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Subtracts the per-feature (per-pixel) mean over the dataset.
    pub fn subtract_feature_mean(&mut self) -> Vec<f64> {
        let mean = self.features.mean_column();
        self.features = self.features.sub_column(&mean);
        mean
    }
}

/// Parameters of [`gen_correlated_gaussians`].
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSpec {
    pub dim: usize,
    pub n: usize,
    pub classes: usize,
    /// Off-diagonal entry of the shared unit-diagonal covariance.
    pub correlation: f64,
    /// Pairwise distance between class means.
    pub separation: f64,
    pub seed: u64,
}

/// Class-conditional Gaussians `N(μ_c, Σ_ρ)` with `Σ_ρ` equal to 1 on the
/// diagonal and `ρ` elsewhere. The means sit on a regular simplex with edge
/// length `separation`; labels cycle through the classes.
pub fn gen_correlated_gaussians(spec: &GaussianSpec) -> Result<Dataset> {
    let GaussianSpec { dim, n, classes, correlation, separation, seed } = *spec;
    if correlation.abs() >= 1.0 || !correlation.is_finite() {
        return Err(DataError::InvalidCovariance(format!("|rho| must be < 1, got {correlation}")));
    }
    if dim == 0 || n == 0 || classes == 0 {
        return Err(DataError::InvalidParameters("dim, n and classes must be positive".into()));
    }
    if classes > dim + 1 {
        return Err(DataError::InvalidParameters(format!("{classes} simplex vertices do not fit in {dim} dimensions")));
    }
    let cov = Matrix::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { correlation });
    let eig = sym_eig(&cov)?;
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l <= 0.0) {
        return Err(DataError::InvalidCovariance(format!("covariance not positive definite (eigenvalue {bad:e})")));
    }
    let sqrt_vals: Vec<f64> = eig.eigenvalues.iter().map(|l| l.sqrt()).collect();
    let factor = eig.eigenvectors.scale_cols(&sqrt_vals);

    let means = simplex_means(dim, classes, separation);
    let mut rng = seed::substream(seed, "data/gaussians");
    let z = Matrix::from_fn(dim, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut features = factor.matmul(&z);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for (c, &label) in labels.iter().enumerate() {
        for (r, &mu) in means[label].iter().enumerate() {
            features[(r, c)] += mu;
        }
    }
    Dataset::new(features, labels, classes)
}

/// Vertices of a centered regular simplex with the given edge length.
fn simplex_means(dim: usize, classes: usize, edge: f64) -> Vec<Vec<f64>> {
    if classes == 1 {
        return vec![vec![0.0; dim]];
    }
    // Scaled basis vectors in `classes` coordinates are pairwise `edge` apart;
    // centering and an orthonormal basis of the centered span map them into
    // `classes - 1` dimensions without changing distances.
    let scale = edge / std::f64::consts::SQRT_2;
    let k = classes;
    let centered: Vec<Vec<f64>> =
        (0..k).map(|c| (0..k).map(|j| scale * ((c == j) as u8 as f64 - 1.0 / k as f64)).collect()).collect();
    // Orthonormal basis of vectors orthogonal to the all-ones direction (Helmert).
    let basis: Vec<Vec<f64>> = (1..k)
        .map(|b| {
            let norm = ((b * (b + 1)) as f64).sqrt();
            (0..k)
                .map(|j| match j.cmp(&b) {
                    std::cmp::Ordering::Less => 1.0 / norm,
                    std::cmp::Ordering::Equal => -(b as f64) / norm,
                    std::cmp::Ordering::Greater => 0.0,
                })
                .collect()
        })
        .collect();
    centered
        .iter()
        .map(|v| {
            let mut out = vec![0.0; dim];
            for (i, b) in basis.iter().enumerate() {
                out[i] = v.iter().zip(b).map(|(a, c)| a * c).sum();
            }
            out
        })
        .collect()
}

/// Loads a CSV file with a header row; the column named `label` holds class
/// ids and every other column is a feature.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| DataError::InvalidParameters("csv has no `label` column".into()))?;
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record?;
        let mut feats = Vec::with_capacity(record.len().saturating_sub(1));
        for (i, field) in record.iter().enumerate() {
            let field = field.trim();
            if i == label_col {
                let l: usize =
                    field.parse().map_err(|_| DataError::InvalidParameters(format!("bad label `{field}`")))?;
                labels.push(l);
            } else {
                let v: f64 =
                    field.parse().map_err(|_| DataError::InvalidParameters(format!("bad feature value `{field}`")))?;
                feats.push(v);
            }
        }
        columns.push(feats);
    }
    if columns.is_empty() {
        return Err(DataError::InvalidParameters("csv has no rows".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Matrix::from_columns(&columns), labels, classes)
}

/// Options for [`batches`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub drop_partial: bool,
}

/// One epoch of mini-batches. Every example appears exactly once (except a
/// dropped partial tail); the order depends only on `(seed, epoch)`.
pub fn batches(data: &Dataset, opts: BatchOptions, epoch: usize) -> Result<BatchIter<'_>> {
    if opts.batch_size == 0 {
        return Err(DataError::InvalidParameters("batch size must be positive".into()));
    }
    let n = data.len();
    if opts.drop_partial && opts.batch_size > n {
        return Err(DataError::EmptyEpoch { batch: opts.batch_size, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    if opts.shuffle {
        let mut rng = seed::substream(opts.seed, &format!("data/shuffle/{epoch}"));
        order.shuffle(&mut rng);
    }
    if opts.drop_partial {
        order.truncate(n - n % opts.batch_size);
    }
    Ok(BatchIter { data, order, batch_size: opts.batch_size, pos: 0 })
}

pub struct BatchIter<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl BatchIter<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for BatchIter<'_> {
    type Item = (Matrix, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some((self.data.features.select_columns(idx), idx.iter().map(|&i| self.data.labels[i]).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(dim: usize, n: usize, rho: f64) -> GaussianSpec {
        GaussianSpec { dim, n, classes: 2, correlation: rho, separation: 0.0, seed: 5 }
    }

    fn sample_cov(x: &Matrix) -> Matrix {
        x.sub_column(&x.mean_column()).gram_scaled()
    }

    #[test]
    fn uncorrelated_samples() {
        let ds = gen_correlated_gaussians(&spec(3, 10_000, 0.0)).unwrap();
        let c = sample_cov(&ds.features);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(c[(i, j)].abs() < 0.05);
                }
            }
        }
    }

    #[test]
    fn strongly_correlated_samples() {
        let ds = gen_correlated_gaussians(&spec(2, 10_000, 0.99)).unwrap();
        let c = sample_cov(&ds.features);
        let corr = c[(0, 1)] / (c[(0, 0)] * c[(1, 1)]).sqrt();
        assert!((corr - 0.99).abs() < 0.01, "corr {corr}");
    }

    #[test]
    fn single_point() {
        let ds = gen_correlated_gaussians(&spec(2, 1, 0.3)).unwrap();
        assert_eq!(ds.len(), 1);
    }

    #[test]
    fn invalid_correlation() {
        assert!(matches!(gen_correlated_gaussians(&spec(2, 10, 1.0)), Err(DataError::InvalidCovariance(_))));
        // Equicorrelation below -1/(d-1) is not positive definite.
        assert!(matches!(gen_correlated_gaussians(&spec(4, 10, -0.5)), Err(DataError::InvalidCovariance(_))));
    }

    #[test]
    fn simplex_edges() {
        for classes in 2..6 {
            let means = simplex_means(6, classes, 3.0);
            for a in 0..classes {
                for b in (a + 1)..classes {
                    let d: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                    assert!((d - 3.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn deterministic_generation() {
        let s = GaussianSpec { dim: 4, n: 50, classes: 3, correlation: 0.5, separation: 2.0, seed: 11 };
        assert_eq!(gen_correlated_gaussians(&s).unwrap(), gen_correlated_gaussians(&s).unwrap());
    }

    fn tiny(n: usize) -> Dataset {
        Dataset::new(Matrix::from_fn(1, n, |_, c| c as f64), vec![0; n], 1).unwrap()
    }

    #[test]
    fn batch_sizes_with_partial_tail() {
        let ds = tiny(10);
        let opts = BatchOptions { batch_size: 3, seed: 1, shuffle: true, drop_partial: false };
        let sizes: Vec<usize> = batches(&ds, opts, 0).unwrap().map(|(x, _)| x.cols()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
    }

    #[test]
    fn unshuffled_keeps_order() {
        let ds = tiny(5);
        let opts = BatchOptions { batch_size: 2, seed: 1, shuffle: false, drop_partial: false };
        let first: Vec<f64> = batches(&ds, opts, 3).unwrap().flat_map(|(x, _)| x.into_vec()).collect();
        assert_eq!(first, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn same_seed_same_batches() {
        let ds = tiny(20);
        let opts = BatchOptions { batch_size: 4, seed: 9, shuffle: true, drop_partial: false };
        let a: Vec<_> = batches(&ds, opts, 2).unwrap().collect();
        let b: Vec<_> = batches(&ds, opts, 2).unwrap().collect();
        assert_eq!(a, b);
        let c: Vec<_> = batches(&ds, opts, 3).unwrap().collect();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_epoch_rejected() {
        let ds = tiny(3);
        let opts = BatchOptions { batch_size: 4, seed: 0, shuffle: false, drop_partial: true };
        assert!(matches!(batches(&ds, opts, 0), Err(DataError::EmptyEpoch { .. })));
    }

    #[test]
    fn csv_loader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "a,label,b\n1.5,0,2\n-1,2,0.25\n").unwrap();
        let ds = load_csv(&path).unwrap();
        assert_eq!(ds.labels, vec![0, 2]);
        assert_eq!(ds.classes, 3);
        assert_eq!(ds.features, Matrix::from_columns(&[[1.5, 2.0], [-1.0, 0.25]]));
    }

    #[test]
    fn per_feature_mean_subtraction() {
        let mut ds = Dataset::new(Matrix::from_rows(&[[1.0, 3.0], [0.0, 4.0]]), vec![0, 1], 2).unwrap();
        let mean = ds.subtract_feature_mean();
        assert_eq!(mean, vec![2.0, 2.0]);
        assert_eq!(ds.features, Matrix::from_rows(&[[-1.0, 1.0], [-2.0, 2.0]]));
    }

    proptest! {
        #[test]
        fn batches_partition_indices(n in 1usize..60, m in 1usize..20, seed in any::<u64>(), shuffle in any::<bool>()) {
            let ds = tiny(n);
            let opts = BatchOptions { batch_size: m, seed, shuffle, drop_partial: false };
            let mut seen: Vec<usize> = batches(&ds, opts, 0).unwrap().flat_map(|(x, _)| x.into_vec()).map(|v| v as usize).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
    }
}
