//! Backward passes through the whitening transform.
//!
//! Two derivations are kept side by side. The simplified one works directly
//! from the cached `x̃`, `Λ` and `D`; the reference one walks the full chain
//! `∂L/∂U → ∂L/∂Λ, ∂L/∂D → ∂L/∂Σ → ∂L/∂μ → ∂L/∂x`. They agree to rounding
//! error and serve as oracles for each other.

use super::batch::standardize_backward;
use super::{Backend, DbnState, DegeneratePolicy, ForwardCache, GroupCache, NormError, NormGrads, NormMode, Result};
use crate::linalg::Matrix;

/// `Kᵢⱼ = 1/(σᵢ - σⱼ)` off the diagonal, zero on it.
fn k_matrix(values: &[f64], threshold: f64, policy: DegeneratePolicy) -> Result<Matrix> {
    let k = values.len();
    let mut out = Matrix::zeros(k, k);
    for i in 0..k {
        for j in (i + 1)..k {
            let mut diff = values[i] - values[j];
            if diff.abs() < threshold {
                match policy {
                    DegeneratePolicy::Error => {
                        return Err(NormError::DegenerateSpectrum { gap: diff.abs(), threshold });
                    }
                    DegeneratePolicy::Clamp => {
                        diff = if diff < 0.0 { -threshold } else { threshold };
                    }
                }
            }
            out[(i, j)] = 1.0 / diff;
            out[(j, i)] = -1.0 / diff;
        }
    }
    Ok(out)
}

/// Gradient with respect to `x̃` given the gradient at the whitened output.
fn grad_xtilde(mode: NormMode, g: &GroupCache, grad: &Matrix) -> Matrix {
    match mode {
        NormMode::Zca => g.eig.eigenvectors.t_matmul(grad),
        NormMode::Pca | NormMode::Bn => grad.clone(),
    }
}

fn simplified_group(mode: NormMode, g: &GroupCache, grad: &Matrix, k: &Matrix) -> Matrix {
    let m = grad.cols() as f64;
    let lam = &g.eig.eigenvalues;
    let sqrt_lam: Vec<f64> = lam.iter().map(|l| l.sqrt()).collect();
    let n = lam.len();

    let dxt = grad_xtilde(mode, g, grad);
    let f = dxt.mean_column();
    let fc = dxt.matmul_t(&g.xtilde).scale(1.0 / m);

    // B = Kᵀ ⊙ (Λ·F_cᵀ [+ Λ^{1/2}·F_c·Λ^{1/2}]),  S = B + Bᵀ.
    let b = Matrix::from_fn(n, n, |i, j| {
        let mut a = lam[i] * fc[(j, i)];
        if mode == NormMode::Zca {
            a += sqrt_lam[i] * fc[(i, j)] * sqrt_lam[j];
        }
        k[(j, i)] * a
    });
    let mut s_minus_m = b.add(&b.transpose());
    for i in 0..n {
        s_minus_m[(i, i)] -= fc[(i, i)];
    }

    let inner = dxt.sub_column(&f).add(&s_minus_m.matmul(&g.xtilde));
    let inv_sqrt: Vec<f64> = sqrt_lam.iter().map(|s| 1.0 / s).collect();
    // Uᵀ = D·Λ^{-1/2}.
    g.eig.eigenvectors.scale_cols(&inv_sqrt).matmul(&inner)
}

fn reference_group(mode: NormMode, g: &GroupCache, grad: &Matrix, k: &Matrix) -> Matrix {
    let m = grad.cols() as f64;
    let lam = &g.eig.eigenvalues;
    let d = &g.eig.eigenvectors;
    let n = lam.len();
    let sqrt_lam: Vec<f64> = lam.iter().map(|l| l.sqrt()).collect();
    let inv_sqrt: Vec<f64> = sqrt_lam.iter().map(|s| 1.0 / s).collect();

    let u = d.transpose().scale_rows(&inv_sqrt);
    // x - μ = D·Λ^{1/2}·x̃.
    let centered = d.scale_cols(&sqrt_lam).matmul(&g.xtilde);

    let dxt = grad_xtilde(mode, g, grad);
    let d_u = dxt.matmul_t(&centered);
    let neg_half_inv32: Vec<f64> = lam.iter().map(|l| -0.5 / (l * l.sqrt())).collect();
    let d_lambda = d_u.matmul(d).scale_cols(&neg_half_inv32);
    let mut d_d = d_u.transpose().scale_cols(&inv_sqrt);
    if mode == NormMode::Zca {
        d_d.add_assign(&grad.matmul_t(&g.xtilde));
    }

    let dt_dd = d.t_matmul(&d_d);
    let mut inner = Matrix::from_fn(n, n, |i, j| k[(j, i)] * dt_dd[(i, j)]);
    for i in 0..n {
        inner[(i, i)] += d_lambda[(i, i)];
    }
    let d_sigma = d.matmul(&inner).matmul_t(d).symmetrized();

    let sum_dxt = dxt.row_sums();
    let sum_centered = centered.row_sums();
    let ut_sum = u.t_matmul(&Matrix::from_columns(&[sum_dxt]));
    let sig_sum = d_sigma.matmul(&Matrix::from_columns(&[sum_centered]));
    let d_mu: Vec<f64> = (0..n).map(|i| -ut_sum[(i, 0)] - 2.0 / m * sig_sum[(i, 0)]).collect();

    let mut dx = u.t_matmul(&dxt);
    dx.add_assign(&d_sigma.matmul(&centered).scale(2.0 / m));
    let shift: Vec<f64> = d_mu.iter().map(|v| v / m).collect();
    dx.add_column(&shift)
}

pub(crate) fn backward_with(state: &DbnState, cache: &ForwardCache, grad_out: &Matrix, backend: Backend) -> Result<NormGrads> {
    let (d, m) = (state.dim(), cache.m);
    if grad_out.shape() != (d, m) || cache.normalized.shape() != (d, m) {
        return Err(NormError::Shape {
            expected: format!("{d}x{m} (from cache)"),
            found: format!("{}x{}", grad_out.rows(), grad_out.cols()),
        });
    }
    if cache.mode != state.mode() || cache.groups.iter().map(|g| g.rows.len()).sum::<usize>() != d {
        return Err(NormError::InvalidInput("cache does not match this layer".into()));
    }

    let (grad_norm, gamma, beta) = match &state.gamma {
        Some(gm) => {
            let dgamma = grad_out.hadamard(&cache.normalized).row_sums();
            let dbeta = grad_out.row_sums();
            (grad_out.scale_rows(gm), Some(dgamma), Some(dbeta))
        }
        None => (grad_out.clone(), None, None),
    };

    let mode = state.mode();
    let policy = state.config().degenerate;
    let blocks = state.exec.map_slice(&cache.groups, |g| -> Result<Matrix> {
        let grad = grad_norm.rows_range(g.rows.start, g.rows.end);
        if mode == NormMode::Bn && backend == Backend::Simplified {
            return Ok(standardize_backward(g, &grad));
        }
        let k = k_matrix(&g.eig.eigenvalues, state.degenerate_threshold(&g.eig), policy)?;
        Ok(match backend {
            Backend::Simplified => simplified_group(mode, g, &grad, &k),
            Backend::Reference => reference_group(mode, g, &grad, &k),
        })
    });
    let blocks = blocks.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(NormGrads { input: Matrix::vstack(&blocks), gamma, beta })
}

/// Backward pass using the simplified closed form.
pub fn dbn_backward(state: &DbnState, cache: &ForwardCache, grad_out: &Matrix) -> Result<NormGrads> {
    backward_with(state, cache, grad_out, Backend::Simplified)
}

/// Backward pass through the unsimplified chain rule.
pub fn dbn_backward_reference(state: &DbnState, cache: &ForwardCache, grad_out: &Matrix) -> Result<NormGrads> {
    backward_with(state, cache, grad_out, Backend::Reference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::NormConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn batch(d: usize, m: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scales: Vec<f64> = (0..d).map(|i| 1.0 + i as f64).collect();
        let mix = Matrix::from_fn(d, d, |_, _| rng.gen_range(-0.5..0.5)).add(&Matrix::from_diag(&scales));
        mix.matmul(&Matrix::from_fn(d, m, |_, _| rng.sample::<f64, _>(StandardNormal)))
    }

    /// Central differences of `L = Σ w ⊙ forward(x)`.
    fn numeric_grad(state: &DbnState, x: &Matrix, w: &Matrix, h: f64) -> Matrix {
        let loss = |x: &Matrix| state.forward_batch(x).unwrap().0.hadamard(w).as_slice().iter().sum::<f64>();
        let mut g = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            for c in 0..x.cols() {
                let mut xp = x.clone();
                xp[(r, c)] += h;
                let mut xm = x.clone();
                xm[(r, c)] -= h;
                g[(r, c)] = (loss(&xp) - loss(&xm)) / (2.0 * h);
            }
        }
        g
    }

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8)).fold(0.0, f64::max)
    }

    #[test]
    fn zero_upstream_gives_zero() {
        let x = batch(3, 8, 1);
        for cfg in [NormConfig::zca(3), NormConfig::pca(3), NormConfig::bn()] {
            let s = DbnState::new(3, cfg).unwrap();
            let (_, cache, _) = s.forward_batch(&x).unwrap();
            let zero = Matrix::zeros(3, 8);
            assert_eq!(dbn_backward(&s, &cache, &zero).unwrap().input.max_abs(), 0.0);
            assert_eq!(dbn_backward_reference(&s, &cache, &zero).unwrap().input.max_abs(), 0.0);
        }
    }

    #[test]
    fn constant_upstream_sums_to_zero() {
        let x = batch(4, 10, 2);
        let s = DbnState::new(4, NormConfig::zca(4)).unwrap();
        let (_, cache, _) = s.forward_batch(&x).unwrap();
        let c = [0.3, -1.2, 2.0, 0.7];
        let up = Matrix::from_fn(4, 10, |r, _| c[r]);
        let dx = dbn_backward(&s, &cache, &up).unwrap().input;
        assert!(dx.row_sums().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn finite_differences_small_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for (cfg, d) in [(NormConfig::zca(4), 4), (NormConfig::pca(4), 4), (NormConfig::zca(2), 4), (NormConfig::bn(), 3)] {
            let x = batch(d, 16, 5);
            let w = Matrix::from_fn(d, 16, |_, _| rng.gen_range(-1.0..1.0));
            let s = DbnState::new(d, cfg.clone()).unwrap();
            let (_, cache, _) = s.forward_batch(&x).unwrap();
            let numeric = numeric_grad(&s, &x, &w, 1e-5);
            for backend in [Backend::Simplified, Backend::Reference] {
                let analytic = backward_with(&s, &cache, &w, backend).unwrap().input;
                let e = rel_err(&analytic, &numeric);
                assert!(e < 1e-5, "{:?} {:?} rel err {e}", cfg.mode, backend);
            }
        }
    }

    #[test]
    fn affine_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = batch(3, 12, 7);
        let w = Matrix::from_fn(3, 12, |_, _| rng.gen_range(-1.0..1.0));
        let mut s = DbnState::new(3, NormConfig::zca(3).with_affine(true)).unwrap();
        s.gamma = Some(vec![1.5, -0.5, 2.0]);
        s.beta = Some(vec![0.1, 0.2, 0.3]);
        let (_, cache, _) = s.forward_batch(&x).unwrap();
        let grads = dbn_backward(&s, &cache, &w).unwrap();
        let numeric = numeric_grad(&s, &x, &w, 1e-5);
        assert!(rel_err(&grads.input, &numeric) < 1e-5);
        let h = 1e-6;
        for i in 0..3 {
            let eval = |delta: f64| {
                let mut t = s.clone();
                t.gamma.as_mut().unwrap()[i] += delta;
                t.forward_batch(&x).unwrap().0.hadamard(&w).as_slice().iter().sum::<f64>()
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((num - grads.gamma.as_ref().unwrap()[i]).abs() < 1e-6);
            assert!((grads.beta.as_ref().unwrap()[i] - w.row(i).iter().sum::<f64>()).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_spectrum_policies() {
        // Perfectly isotropic batch: all eigenvalues equal.
        let x = Matrix::from_columns(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]);
        let s = DbnState::new(2, NormConfig::zca(2)).unwrap();
        let (_, cache, _) = s.forward_batch(&x).unwrap();
        let up = Matrix::from_fn(2, 4, |r, c| (r + c) as f64);
        assert!(matches!(dbn_backward(&s, &cache, &up), Err(NormError::DegenerateSpectrum { .. })));
        let clamped = DbnState::new(2, NormConfig::zca(2).with_degenerate(DegeneratePolicy::Clamp)).unwrap();
        let dx = dbn_backward(&clamped, &cache, &up).unwrap().input;
        assert!(dx.is_finite());
    }

    #[test]
    fn shape_mismatch() {
        let x = batch(3, 8, 1);
        let s = DbnState::new(3, NormConfig::zca(3)).unwrap();
        let (_, cache, _) = s.forward_batch(&x).unwrap();
        assert!(matches!(dbn_backward(&s, &cache, &Matrix::zeros(3, 7)), Err(NormError::Shape { .. })));
    }
}
