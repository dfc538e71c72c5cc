//! Normalization layers: batch normalization and decorrelated batch
//! normalization (ZCA or PCA whitening over feature groups).
//!
//! A training step is split into a pure part and a mutation:
//! [`DbnState::forward_batch`] computes the output, the backward cache and the
//! batch statistics without touching the state, and
//! [`DbnState::update_running`] folds the statistics into the running
//! averages. [`dbn_forward`] and [`bn_forward`] do both.

mod backward;
mod batch;
mod conv;
mod group;
mod trelu;
mod whiten;

pub use backward::{dbn_backward, dbn_backward_reference};
pub use batch::bn_forward;
pub use conv::{roll_conv, unroll_conv, Tensor4};
pub use group::{group_merge, group_ranges, group_split};
pub use trelu::{trelu_backward, trelu_forward};
pub use whiten::{dbn_forward, dbn_infer};

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::linalg::{EigDecomp, LinalgError, Matrix};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;
/// Eigenvalue pairs closer than this fraction of the largest eigenvalue are
/// treated as degenerate by the backward pass.
pub const DEGENERATE_GAP: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NormError {
    #[error("batch of {m} examples is too small; training mode needs at least 2")]
    InsufficientBatch { m: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid group size {group_size} for dimension {dim}")]
    InvalidGroup { group_size: usize, dim: usize },
    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: String, found: String },
    #[error("degenerate spectrum: eigenvalue gap {gap:e} below threshold {threshold:e}")]
    DegenerateSpectrum { gap: f64, threshold: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, NormError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    Zca,
    Pca,
    Bn,
}

/// What the backward pass does when two eigenvalues (nearly) coincide.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegeneratePolicy {
    #[default]
    Error,
    /// Clamp `|σᵢ - σⱼ|` at the threshold; the gradient becomes approximate.
    Clamp,
}

/// Which backward derivation to run. Both compute the same gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Closed-form expression in terms of `x̃`, `Λ` and `D`.
    #[default]
    Simplified,
    /// Step-by-step chain through `U`, `Λ`, `D`, `Σ` and `μ`.
    Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormConfig {
    pub mode: NormMode,
    /// `None` whitens all features together.
    pub group_size: Option<usize>,
    pub epsilon: f64,
    pub momentum: f64,
    pub affine: bool,
    pub degenerate: DegeneratePolicy,
    pub backend: Backend,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig {
            mode: NormMode::Zca,
            group_size: None,
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
            affine: false,
            degenerate: DegeneratePolicy::Error,
            backend: Backend::Simplified,
        }
    }
}

impl NormConfig {
    pub fn zca(group_size: usize) -> Self {
        NormConfig { group_size: Some(group_size), ..Default::default() }
    }

    pub fn pca(group_size: usize) -> Self {
        NormConfig { mode: NormMode::Pca, group_size: Some(group_size), ..Default::default() }
    }

    pub fn bn() -> Self {
        NormConfig { mode: NormMode::Bn, group_size: Some(1), ..Default::default() }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn with_affine(mut self, affine: bool) -> Self {
        self.affine = affine;
        self
    }

    pub fn with_backend(mut self, backend: Backend) -> Self {
        self.backend = backend;
        self
    }

    pub fn with_degenerate(mut self, policy: DegeneratePolicy) -> Self {
        self.degenerate = policy;
        self
    }
}

/// Per-layer normalization state: configuration, running statistics and the
/// optional affine parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbnState {
    config: NormConfig,
    dim: usize,
    group_size: usize,
    pub running_mean: Vec<f64>,
    /// One block per feature group; together they form a block-diagonal matrix.
    pub running_whitening: Vec<Matrix>,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    pub training: bool,
    #[serde(skip, default)]
    pub exec: Exec,
}

/// Saved tensors for one feature group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCache {
    pub rows: Range<usize>,
    pub mean: Vec<f64>,
    /// Decomposition of the ε-augmented covariance.
    pub eig: EigDecomp,
    /// PCA-whitened activations `Λ^{-1/2}·Dᵀ·(x - μ)`, `k × m`.
    pub xtilde: Matrix,
}

/// Everything the backward pass needs from the matching training forward.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardCache {
    pub mode: NormMode,
    pub m: usize,
    pub groups: Vec<GroupCache>,
    /// Whitened output before the affine transform.
    pub normalized: Matrix,
}

/// Batch statistics produced by a training forward, consumed by
/// [`DbnState::update_running`].
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// The whitening matrix applied to each group in this batch.
    pub whitening: Vec<Matrix>,
}

/// Gradients from a normalization backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct NormGrads {
    pub input: Matrix,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

impl DbnState {
    pub fn new(dim: usize, config: NormConfig) -> Result<Self> {
        if dim == 0 {
            return Err(NormError::InvalidConfig("dimension must be positive".into()));
        }
        if !(config.epsilon > 0.0 && config.epsilon.is_finite()) {
            return Err(NormError::InvalidConfig(format!("epsilon must be positive, got {}", config.epsilon)));
        }
        if !(config.momentum > 0.0 && config.momentum <= 1.0) {
            return Err(NormError::InvalidConfig(format!("momentum must be in (0, 1], got {}", config.momentum)));
        }
        let group_size = match config.mode {
            NormMode::Bn => 1,
            _ => config.group_size.unwrap_or(dim),
        };
        if group_size == 0 || group_size > dim {
            return Err(NormError::InvalidGroup { group_size, dim });
        }
        let running_whitening = group_ranges(dim, group_size)?.into_iter().map(|r| Matrix::identity(r.len())).collect();
        let (gamma, beta) = if config.affine { (Some(vec![1.0; dim]), Some(vec![0.0; dim])) } else { (None, None) };
        Ok(DbnState {
            config,
            dim,
            group_size,
            running_mean: vec![0.0; dim],
            running_whitening,
            gamma,
            beta,
            training: true,
            exec: Exec::default(),
        })
    }

    pub fn config(&self) -> &NormConfig {
        &self.config
    }

    pub fn mode(&self) -> NormMode {
        self.config.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn epsilon(&self) -> f64 {
        self.config.epsilon
    }

    pub fn groups(&self) -> Vec<Range<usize>> {
        group_ranges(self.dim, self.group_size).expect("validated on construction")
    }

    /// The running whitening matrix assembled as a dense block-diagonal `d × d`.
    pub fn running_whitening_dense(&self) -> Matrix {
        let mut out = Matrix::zeros(self.dim, self.dim);
        for (range, block) in self.groups().into_iter().zip(&self.running_whitening) {
            for (i, r) in range.clone().enumerate() {
                for (j, c) in range.clone().enumerate() {
                    out[(r, c)] = block[(i, j)];
                }
            }
        }
        out
    }

    pub(crate) fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.dim {
            return Err(NormError::Shape { expected: format!("{} rows", self.dim), found: format!("{} rows", x.rows()) });
        }
        if x.cols() == 0 {
            return Err(NormError::InvalidInput("empty batch".into()));
        }
        if !x.is_finite() {
            return Err(NormError::InvalidInput("non-finite entry in input".into()));
        }
        Ok(())
    }

    /// Training-mode forward without mutating the state.
    pub fn forward_batch(&self, x: &Matrix) -> Result<(Matrix, ForwardCache, BatchStats)> {
        self.check_input(x)?;
        if x.cols() < 2 {
            return Err(NormError::InsufficientBatch { m: x.cols() });
        }
        let (normalized, groups, stats) = match self.config.mode {
            NormMode::Bn => batch::standardize(self, x),
            NormMode::Zca | NormMode::Pca => whiten::whiten_batch(self, x)?,
        };
        let out = self.apply_affine(&normalized);
        let cache = ForwardCache { mode: self.config.mode, m: x.cols(), groups, normalized };
        Ok((out, cache, stats))
    }

    /// Folds one batch's statistics into the running averages.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let lambda = self.config.momentum;
        for (e, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *e = (1.0 - lambda) * *e + lambda * b;
        }
        for (e, b) in self.running_whitening.iter_mut().zip(&stats.whitening) {
            *e = e.scale(1.0 - lambda).add(&b.scale(lambda));
        }
    }

    /// Training forward plus running-statistics update.
    pub fn forward_train(&mut self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        let (out, cache, stats) = self.forward_batch(x)?;
        self.update_running(&stats);
        Ok((out, cache))
    }

    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let centered = x.sub_column(&self.running_mean);
        let blocks = group_split(&centered, self.group_size)?;
        let whitened: Vec<Matrix> = blocks.iter().zip(&self.running_whitening).map(|(b, w)| w.matmul(b)).collect();
        Ok(self.apply_affine(&group_merge(&whitened)))
    }

    /// Backward with the configured backend.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Matrix) -> Result<NormGrads> {
        backward::backward_with(self, cache, grad_out, self.config.backend)
    }

    pub(crate) fn apply_affine(&self, x: &Matrix) -> Matrix {
        match (&self.gamma, &self.beta) {
            (Some(g), Some(b)) => x.scale_rows(g).add_column(b),
            _ => x.clone(),
        }
    }

    pub(crate) fn degenerate_threshold(&self, eig: &EigDecomp) -> f64 {
        DEGENERATE_GAP * eig.eigenvalues.first().copied().unwrap_or(0.0).abs()
    }
}
