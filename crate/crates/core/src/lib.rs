//! Mini-batch whitening layers (ZCA and PCA decorrelated batch normalization,
//! plain batch normalization) with exact backward passes, a small
//! hand-differentiated MLP, and the diagnostics used to study them.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod exec;
pub mod experiments;
pub mod linalg;
pub mod net;
pub mod norm;
pub mod seed;
pub mod train;

pub use linalg::{EigDecomp, LinalgError, Matrix};

pub use net::{LayerSpec, Network, NetworkSpec};
pub use norm::{DbnState, ForwardCache, NormConfig, NormMode};
