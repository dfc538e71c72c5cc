//! Property tests for the normalization, network, data and training invariants.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use whitenorm::data::{batches, gen_correlated_gaussians, BatchOptions, GaussianSpec};
use whitenorm::diagnostics::{axis_swap_demo, whiteness_report};
use whitenorm::experiments::Method;
use whitenorm::linalg::{sym_eig, Matrix};
use whitenorm::net::init_params;
use whitenorm::norm::{
    bn_forward, dbn_backward, dbn_backward_reference, dbn_forward, dbn_infer, DbnState, NormConfig, NormMode,
};
use whitenorm::train::{sgd_step, train, TrainConfig};

fn rotated_batch(d: usize, m: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sym = Matrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0)).symmetrized();
    let q = sym_eig(&sym).unwrap().eigenvectors;
    let z = Matrix::from_fn(d, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let scales: Vec<f64> = (1..=d).map(|i| i as f64).collect();
    let offset: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
    q.matmul(&z.scale_rows(&scales)).add_column(&offset)
}

fn normals(d: usize, m: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(d, m, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn whitening_mode() -> impl Strategy<Value = NormMode> {
    prop_oneof![Just(NormMode::Zca), Just(NormMode::Pca)]
}

/// `(d, m, k)` with `m > d` so every group covariance is full rank.
fn shape() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=8).prop_flat_map(|d| (Just(d), (d + 4)..=48, 1..=d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zca_output_satisfies_whiteness_identity((d, m, k) in shape(), seed in any::<u64>(), eps in prop_oneof![Just(1e-5), Just(1e-3)]) {
        let x = rotated_batch(d, m, seed);
        let mut s = DbnState::new(d, NormConfig::zca(k).with_epsilon(eps)).unwrap();
        let (y, _) = dbn_forward(&mut s, &x).unwrap();
        let r = whiteness_report(&y, &x, eps, k).unwrap();
        for dev in r.group_deviation {
            prop_assert!(dev < 1e-8, "deviation {dev}");
        }
    }

    #[test]
    fn pca_output_has_diagonal_covariance((d, m, k) in shape(), seed in any::<u64>()) {
        let x = rotated_batch(d, m, seed);
        let s = DbnState::new(d, NormConfig::pca(k)).unwrap();
        let (y, cache, _) = s.forward_batch(&x).unwrap();
        let cov = y.gram_scaled();
        for g in &cache.groups {
            for (a, i) in g.rows.clone().enumerate() {
                for (b, j) in g.rows.clone().enumerate() {
                    let want = if a == b { 1.0 - s.epsilon() / g.eig.eigenvalues[a] } else { 0.0 };
                    prop_assert!((cov[(i, j)] - want).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn unit_groups_match_batch_norm(d in 1usize..8, m in 2usize..40, seed in any::<u64>(), mode in whitening_mode()) {
        let x = rotated_batch(d, m, seed);
        let mut z = DbnState::new(d, NormConfig { mode, ..NormConfig::zca(1) }).unwrap();
        let mut b = DbnState::new(d, NormConfig::bn()).unwrap();
        let (yz, _) = dbn_forward(&mut z, &x).unwrap();
        let (yb, _) = bn_forward(&mut b, &x).unwrap();
        prop_assert!(yz.max_abs_diff(&yb) < 1e-12);
    }

    #[test]
    fn constant_shift_leaves_output_unchanged((d, m, k) in shape(), seed in any::<u64>(), mode in whitening_mode()) {
        // Power-of-two batch sizes and dyadic entries keep the mean exact.
        let m = m.next_power_of_two();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::from_fn(d, m, |_, _| rng.gen_range(-256i32..=256) as f64 / 16.0);
        let c: Vec<f64> = (0..d).map(|_| rng.gen_range(-64i32..=64) as f64 / 8.0).collect();
        let s = DbnState::new(d, NormConfig { mode, ..NormConfig::zca(k) }.with_degenerate(whitenorm::norm::DegeneratePolicy::Clamp)).unwrap();
        let (a, _, _) = s.forward_batch(&x).unwrap();
        let (b, _, _) = s.forward_batch(&x.add_column(&c)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn input_gradient_sums_to_zero_over_examples((d, m, k) in shape(), seed in any::<u64>(), mode in whitening_mode()) {
        let x = rotated_batch(d, m, seed);
        let s = DbnState::new(d, NormConfig { mode, ..NormConfig::zca(k) }).unwrap();
        let (_, cache, _) = s.forward_batch(&x).unwrap();
        let dx = s.backward(&cache, &normals(d, m, seed ^ 1)).unwrap().input;
        for v in dx.row_sums() {
            prop_assert!(v.abs() < 1e-10, "row sum {v}");
        }
    }

    #[test]
    fn simplified_backward_matches_reference_chain((d, m, k) in shape(), seed in any::<u64>(), mode in whitening_mode()) {
        let x = rotated_batch(d, m, seed);
        let s = DbnState::new(d, NormConfig { mode, ..NormConfig::zca(k) }).unwrap();
        let (_, cache, _) = s.forward_batch(&x).unwrap();
        let gap = cache.groups.iter().map(|g| g.eig.min_gap()).fold(f64::INFINITY, f64::min);
        prop_assume!(gap >= 1e-3);
        let g = normals(d, m, seed ^ 2);
        let a = dbn_backward(&s, &cache, &g).unwrap().input;
        let b = dbn_backward_reference(&s, &cache, &g).unwrap().input;
        prop_assert!(a.max_abs_diff(&b) < 1e-12, "{}", a.max_abs_diff(&b));
    }

    #[test]
    fn zca_ignores_eigen_conventions_and_pca_permutes(d in 2usize..7, seed in any::<u64>(), perm_seed in any::<u64>()) {
        let x = rotated_batch(d, 3 * d + 5, seed);
        let s = DbnState::new(d, NormConfig::zca(d)).unwrap();
        let (_, cache, _) = s.forward_batch(&x).unwrap();
        let g = &cache.groups[0];
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        let mut perm: Vec<usize> = (0..d).collect();
        for i in (1..d).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let signs: Vec<f64> = (0..d).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let shuffled = g.eig.permuted(&perm, &signs);
        let centered = x.sub_column(&g.mean);
        let zca = |e: &whitenorm::EigDecomp| e.zca_whitening().unwrap().matmul(&centered);
        prop_assert!(zca(&shuffled).max_abs_diff(&zca(&g.eig)) < 1e-12);
        let pca = shuffled.pca_whitening().unwrap().matmul(&centered);
        for (i, &p) in perm.iter().enumerate() {
            let want = g.xtilde.rows_range(p, p + 1).scale(signs[i]);
            prop_assert!(pca.rows_range(i, i + 1).max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn inference_does_not_touch_state((d, m, k) in shape(), seed in any::<u64>(), mode in whitening_mode()) {
        let mut s = DbnState::new(d, NormConfig { mode, ..NormConfig::zca(k) }).unwrap();
        dbn_forward(&mut s, &rotated_batch(d, m, seed)).unwrap();
        s.training = false;
        let before = s.clone();
        dbn_infer(&s, &rotated_batch(d, 3, seed ^ 3)).unwrap();
        prop_assert_eq!(s, before);
    }

    #[test]
    fn axis_swap_demo_is_deterministic(seed in any::<u64>()) {
        let a = axis_swap_demo(seed).unwrap();
        prop_assert_eq!(&a, &axis_swap_demo(seed).unwrap());
        prop_assert_eq!(&a.flipping.pca_permutation, &vec![1, 0]);
        prop_assert_eq!(&a.control.pca_permutation, &vec![0, 1]);
        prop_assert_eq!(&a.flipping.zca_permutation, &vec![0, 1]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn loss_is_invariant_to_batch_order(seed in any::<u64>(), method in prop_oneof![
        Just(Method::Plain), Just(Method::Bn), Just(Method::Dbn { mode: NormMode::Zca, group_size: Some(3) })
    ]) {
        let data = gen_correlated_gaussians(&GaussianSpec { dim: 6, n: 40, classes: 3, correlation: 0.5, separation: 2.0, seed }).unwrap();
        let net = init_params(&method.mlp(6, &[8, 6], 3), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let shuffled = data.subset(&order);
        let a = net.training_loss(&data.features, &data.labels).unwrap();
        let b = net.training_loss(&shuffled.features, &shuffled.labels).unwrap();
        prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn batches_partition_the_dataset(n in 1usize..200, batch in 1usize..64, seed in any::<u64>(), epoch in 0usize..5, shuffle in any::<bool>()) {
        let data = gen_correlated_gaussians(&GaussianSpec { dim: 2, n, classes: 1, correlation: 0.0, separation: 0.0, seed }).unwrap();
        let it = batches(&data, BatchOptions { batch_size: batch, seed, shuffle, drop_partial: false }, epoch).unwrap();
        let mut seen: Vec<usize> = it.order().to_vec();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn plain_sgd_is_gradient_descent(p in prop::collection::vec(-10.0f64..10.0, 1..20), lr in 1e-4f64..1.0, seed in any::<u64>()) {
        let g: Vec<f64> = normals(1, p.len(), seed).into_vec();
        let mut params = p.clone();
        let mut velocity = vec![vec![0.0; p.len()]];
        sgd_step(&mut [params.as_mut_slice()], std::slice::from_ref(&g), &mut velocity, lr, 0.0, 0.0).unwrap();
        for i in 0..p.len() {
            prop_assert_eq!(params[i], p[i] - lr * g[i]);
        }
    }

    #[test]
    fn seeded_training_is_reproducible(seed in any::<u64>()) {
        let data = gen_correlated_gaussians(&GaussianSpec { dim: 4, n: 64, classes: 2, correlation: 0.6, separation: 2.0, seed }).unwrap();
        let spec = Method::Dbn { mode: NormMode::Zca, group_size: Some(2) }.mlp(4, &[6], 2);
        let cfg = TrainConfig { batch_size: 16, full_batch: false, seed, momentum: 0.9, ..TrainConfig::full_batch(0.1, 3) };
        let run = || {
            let mut net = init_params(&spec, seed).unwrap();
            (train(&mut net, &data, None, &cfg).unwrap(), net)
        };
        let (log_a, net_a) = run();
        let (log_b, net_b) = run();
        prop_assert_eq!(log_a, log_b);
        prop_assert_eq!(net_a.params(), net_b.params());
    }
}
