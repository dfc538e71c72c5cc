//! Gradient checking, whiteness and conditioning reports, the axis-swap
//! demonstration and empirical Fisher conditioning.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::data::Dataset;
use crate::linalg::{condition_from_spectrum, sym_eig, LinalgError, Matrix};
use crate::net::{Layer, NetError, Network};
use crate::norm::{group_ranges, DbnState, NormConfig, NormError};
use crate::seed;

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("non-finite value at coordinate {index}")]
    NonFinite { index: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("construction failed: {0}")]
    Construction(String),
    #[error("{params} parameters exceed the cap of {cap}")]
    CapExceeded { params: usize, cap: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Norm(#[from] NormError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, DiagError>;

/// Largest Fisher matrix [`fim_condition`] will build.
pub const FIM_PARAM_CAP: usize = 2000;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Central differences `(f(x+h) − f(x−h)) / 2h` for every coordinate.
pub fn numeric_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> std::result::Result<f64, DiagError>,
{
    if !(h > 0.0) {
        return Err(DiagError::InvalidInput(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe)?;
        probe[i] = x[i] - h;
        let minus = f(&probe)?;
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(DiagError::NonFinite { index: i });
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Worst relative error between two gradients.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> Result<GradcheckReport> {
    if analytic.len() != numeric.len() {
        return Err(DiagError::InvalidInput(format!("{} gradient entries for {} coordinates", analytic.len(), numeric.len())));
    }
    let mut report = GradcheckReport { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, checked: analytic.len() };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        if !a.is_finite() {
            return Err(DiagError::NonFinite { index: i });
        }
        let err = relative_error(a, n);
        if err > report.max_rel_error {
            report = GradcheckReport { max_rel_error: err, worst_index: i, analytic: a, numeric: n, ..report };
        }
    }
    Ok(report)
}

/// Compares `analytic` against central differences of `f` around `x`.
pub fn gradcheck<F>(f: F, analytic: &[f64], x: &[f64], h: f64) -> Result<GradcheckReport>
where
    F: FnMut(&[f64]) -> std::result::Result<f64, DiagError>,
{
    if analytic.len() != x.len() {
        return Err(DiagError::InvalidInput(format!("{} gradient entries for {} coordinates", analytic.len(), x.len())));
    }
    compare_gradients(analytic, &numeric_gradient(f, x, h)?)
}

/// Checks the input gradient of a normalization layer in training mode for
/// the loss `½‖out − target‖²`.
pub fn gradcheck_norm(state: &DbnState, x: &Matrix, target: &Matrix, h: f64) -> Result<GradcheckReport> {
    let (out, cache, _) = state.forward_batch(x)?;
    let grads = state.backward(&cache, &out.sub(target))?;
    // The loss is measured relative to its value at `x`, summed from
    // elementwise differences; otherwise cancellation in an O(dm) sum
    // swamps the small gradient entries.
    let shifted = |probe: &Matrix| -> f64 {
        probe
            .as_slice()
            .iter()
            .zip(out.as_slice())
            .zip(target.as_slice())
            .map(|((p, o), t)| (p - o) * (0.5 * (p + o) - t))
            .sum()
    };
    let (rows, cols) = x.shape();
    gradcheck(
        |p| {
            let probe = Matrix::from_vec(rows, cols, p.to_vec()).map_err(|_| DiagError::NonFinite { index: 0 })?;
            Ok(shifted(&state.forward_batch(&probe)?.0))
        },
        grads.input.as_slice(),
        x.as_slice(),
        h,
    )
}

/// Analytic and numeric gradient of one parameter block (or the input).
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGradients {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl BlockGradients {
    pub fn report(&self) -> Result<GradcheckReport> {
        compare_gradients(&self.analytic, &self.numeric)
    }
}

/// Gradients of a network's training-mode loss for every parameter block
/// and then the input.
pub fn network_gradients(net: &Network, x: &Matrix, labels: &[usize], h: f64) -> Result<Vec<BlockGradients>> {
    let (trace, _) = net.forward_pure(x, labels)?;
    let grads = net.backward(&trace)?;
    let mut out = Vec::new();
    for (block, analytic) in grads.params.into_iter().enumerate() {
        let base: Vec<f64> = net.params()[block].to_vec();
        let mut probe_net = net.clone();
        let numeric = numeric_gradient(
            |p| {
                probe_net.params_mut()[block].copy_from_slice(p);
                Ok(probe_net.training_loss(x, labels)?)
            },
            &base,
            h,
        )?;
        out.push(BlockGradients { analytic, numeric });
    }
    let (rows, cols) = x.shape();
    let numeric = numeric_gradient(
        |p| {
            let probe = Matrix::from_vec(rows, cols, p.to_vec()).map_err(|_| DiagError::NonFinite { index: 0 })?;
            Ok(net.training_loss(&probe, labels)?)
        },
        x.as_slice(),
        h,
    )?;
    out.push(BlockGradients { analytic: grads.input.expect("input gradient").into_vec(), numeric });
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WhitenessReport {
    /// Per group: `max |cov(X̂) − (I − εΣ⁻¹)|` over the group block.
    pub group_deviation: Vec<f64>,
    /// `max |cov(X̂) − I|` over the whole matrix.
    pub identity_deviation: f64,
    pub correlation: Matrix,
    pub condition_before: f64,
    pub condition_after: f64,
}

/// `(1/m)·(X − μ)(X − μ)ᵀ`.
pub fn covariance(x: &Matrix) -> Matrix {
    x.sub_column(&x.mean_column()).gram_scaled()
}

fn condition_of(cov: &Matrix) -> Result<f64> {
    Ok(condition_from_spectrum(&sym_eig(cov)?.eigenvalues))
}

/// Compares the covariance of `output` with the exact identity
/// `I − εΣ⁻¹` (ZCA), where `Σ` is the ε-augmented covariance of each
/// `group_size` block of `input`.
pub fn whiteness_report(output: &Matrix, input: &Matrix, epsilon: f64, group_size: usize) -> Result<WhitenessReport> {
    if output.shape() != input.shape() {
        return Err(DiagError::InvalidInput(format!("output {:?} vs input {:?}", output.shape(), input.shape())));
    }
    let d = input.rows();
    let cov_in = covariance(input);
    let cov_out = covariance(output);
    let mut group_deviation = Vec::new();
    for r in group_ranges(d, group_size)? {
        let k = r.len();
        let sigma = Matrix::from_fn(k, k, |i, j| cov_in[(r.start + i, r.start + j)] + if i == j { epsilon } else { 0.0 });
        let eig = sym_eig(&sigma)?;
        let inv_vals: Vec<f64> = eig.eigenvalues.iter().map(|l| 1.0 / l).collect();
        let inv = eig.eigenvectors.scale_cols(&inv_vals).matmul_t(&eig.eigenvectors);
        let mut dev: f64 = 0.0;
        for i in 0..k {
            for j in 0..k {
                let expected = if i == j { 1.0 } else { 0.0 } - epsilon * inv[(i, j)];
                dev = dev.max((cov_out[(r.start + i, r.start + j)] - expected).abs());
            }
        }
        group_deviation.push(dev);
    }
    let identity_deviation = cov_out.sub(&Matrix::identity(d)).max_abs();
    let scale: Vec<f64> = (0..d).map(|i| 1.0 / cov_out[(i, i)].sqrt()).collect();
    let correlation = cov_out.scale_rows(&scale).scale_cols(&scale);
    Ok(WhitenessReport {
        group_deviation,
        identity_deviation,
        correlation,
        condition_before: condition_of(&cov_in)?,
        condition_after: condition_of(&cov_out)?,
    })
}

/// Matches each row of `a` to a distinct row of `b` by largest absolute
/// cosine similarity. Rows are processed in order; ties go to the lower index.
pub fn match_rows(a: &Matrix, b: &Matrix) -> Vec<usize> {
    let mut used = vec![false; b.rows()];
    let mut perm = Vec::with_capacity(a.rows());
    for i in 0..a.rows() {
        let ra = a.row(i);
        let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut best: Option<(usize, f64)> = None;
        for (j, taken) in used.iter().enumerate() {
            if *taken {
                continue;
            }
            let rb = b.row(j);
            let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cos = (ra.iter().zip(rb).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).abs();
            if best.is_none_or(|(_, c)| cos > c) {
                best = Some((j, cos));
            }
        }
        let j = best.map_or(i, |(j, _)| j);
        used[j] = true;
        perm.push(j);
    }
    perm
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SwapPair {
    pub eigenvalues_a: Vec<f64>,
    pub eigenvalues_b: Vec<f64>,
    /// Row `i` of batch A's PCA whitening matches row `pca_permutation[i]` of batch B's.
    pub pca_permutation: Vec<usize>,
    pub zca_permutation: Vec<usize>,
    /// Largest change in a shared point's whitened coordinates between batches.
    pub pca_displacement: f64,
    pub zca_displacement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AxisSwapReport {
    pub seed: u64,
    pub core_points: usize,
    /// Extra points turn the core's identity covariance into diag(2,1) and diag(1,2).
    pub flipping: SwapPair,
    /// Both batches stretch the first axis, so the ordering is preserved.
    pub control: SwapPair,
    pub identical: SwapPair,
}

const CORE_POINTS: usize = 8;

/// Zero-mean core points with covariance exactly `I` (up to rounding).
fn whitened_core(seed: u64) -> Result<Matrix> {
    let mut rng = seed::substream(seed, "diagnostics/axis_swap");
    let raw = Matrix::from_fn(2, CORE_POINTS, |_, _| rng.sample::<f64, _>(StandardNormal));
    let centered = raw.sub_column(&raw.mean_column());
    let w = crate::linalg::inv_sqrt_zca(&centered.gram_scaled())?;
    Ok(w.matmul(&centered))
}

/// Core plus a symmetric pair `±a` along `axis`.
fn batch_with_pair(core: &Matrix, axis: usize, a: f64) -> Matrix {
    let mut pair = Matrix::zeros(2, 2);
    pair[(axis, 0)] = a;
    pair[(axis, 1)] = -a;
    Matrix::from_columns(&[core.clone(), pair].iter().flat_map(|m| (0..m.cols()).map(|j| m.column(j))).collect::<Vec<_>>())
}

fn compare(a: &Matrix, b: &Matrix, shared: usize) -> Result<SwapPair> {
    let whiten = |cfg: NormConfig, x: &Matrix| -> Result<(Matrix, Matrix, Vec<f64>)> {
        let state = DbnState::new(2, cfg)?;
        let (out, cache, stats) = state.forward_batch(x)?;
        Ok((out, stats.whitening[0].clone(), cache.groups[0].eig.eigenvalues.clone()))
    };
    let (pa, wpa, eig_a) = whiten(NormConfig::pca(2), a)?;
    let (pb, wpb, eig_b) = whiten(NormConfig::pca(2), b)?;
    let (za, wza, _) = whiten(NormConfig::zca(2), a)?;
    let (zb, wzb, _) = whiten(NormConfig::zca(2), b)?;
    let displacement = |x: &Matrix, y: &Matrix| {
        (0..shared)
            .map(|j| x.column(j).iter().zip(y.column(j)).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    };
    Ok(SwapPair {
        eigenvalues_a: eig_a,
        eigenvalues_b: eig_b,
        pca_permutation: match_rows(&wpa, &wpb),
        zca_permutation: match_rows(&wza, &wzb),
        pca_displacement: displacement(&pa, &pb),
        zca_displacement: displacement(&za, &zb),
    })
}

/// Two mini-batches share whitened core points and differ only in one pair
/// of extra points. Choosing `a² = n/2` for the pair gives covariances
/// proportional to diag(2,1) when it lies on the first axis and diag(1,2)
/// on the second, so the principal axes trade places.
pub fn axis_swap_demo(seed: u64) -> Result<AxisSwapReport> {
    let core = whitened_core(seed)?;
    let a = (CORE_POINTS as f64 / 2.0).sqrt();
    let on_x = batch_with_pair(&core, 0, a);
    let on_y = batch_with_pair(&core, 1, a);
    let longer_x = batch_with_pair(&core, 0, (CORE_POINTS as f64).sqrt());

    let flipping = compare(&on_x, &on_y, CORE_POINTS)?;
    let control = compare(&on_x, &longer_x, CORE_POINTS)?;
    let identical = compare(&on_x, &on_x, CORE_POINTS)?;
    let ratio = |e: &[f64]| e[0] / e[1];
    if !(ratio(&flipping.eigenvalues_a) > 1.5 && ratio(&flipping.eigenvalues_b) > 1.5) {
        return Err(DiagError::Construction("eigenvalues are not separated".into()));
    }
    if flipping.pca_permutation != [1, 0] {
        return Err(DiagError::Construction(format!("ordering did not flip: {:?}", flipping.pca_permutation)));
    }
    Ok(AxisSwapReport { seed, core_points: CORE_POINTS, flipping, control, identical })
}

/// Condition number of the empirical Fisher `(1/n)·Σ gᵢgᵢᵀ` of one linear
/// layer's weights, `gᵢ` being the per-example gradient of the
/// log-likelihood. Computed in training mode on the whole dataset as one
/// batch. A numerically singular matrix gives `∞`.
pub fn fim_condition(net: &Network, data: &Dataset, layer: usize) -> Result<f64> {
    let params = match net.layers().get(layer) {
        Some(Layer::Linear { weight, .. }) => weight.rows() * weight.cols(),
        _ => return Err(DiagError::InvalidInput(format!("layer {layer} is not linear"))),
    };
    if params > FIM_PARAM_CAP {
        return Err(DiagError::CapExceeded { params, cap: FIM_PARAM_CAP });
    }
    let g = net.per_example_weight_grads(&data.features, &data.labels, layer)?;
    let (n, p) = g.shape();
    if n < p {
        return Ok(f64::INFINITY);
    }
    let fisher = g.t_matmul(&g).scale(1.0 / n as f64).symmetrized();
    let values = sym_eig(&fisher)?.eigenvalues;
    let max = values[0];
    let min = *values.last().expect("non-empty");
    if !(max > 0.0) || min <= max * p as f64 * f64::EPSILON {
        return Ok(f64::INFINITY);
    }
    Ok(max / min)
}
