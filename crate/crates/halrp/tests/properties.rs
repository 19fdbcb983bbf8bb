//! Property tests over the numerical kernels.
#![allow(clippy::needless_range_loop)]

use proptest::prelude::*;

use halrp::linalg::{frobenius_norm, svd, truncate, truncation_error, Matrix};
use halrp::perturb::{decompose_fc, residual_b, solve_r, solve_s};
use halrp::rank_select::{importance_scores, select_ranks};
use halrp::reg_prune::{prune_absolute, prune_percentile, reg_loss_layer, RegCoefficients};

fn small_matrix() -> impl Strategy<Value = Matrix> {
    (1usize..=6, 1usize..=6).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-1.0f64..1.0, r * c)
            .prop_map(move |data| Matrix::from_vec(r, c, data))
    })
}

fn matrix_pair() -> impl Strategy<Value = (Matrix, Matrix)> {
    (2usize..=5, 2usize..=5).prop_flat_map(|(r, c)| {
        let a = proptest::collection::vec(-1.0f64..1.0, r * c);
        let b = proptest::collection::vec(-1.0f64..1.0, r * c);
        (a, b).prop_map(move |(x, y)| (Matrix::from_vec(r, c, x), Matrix::from_vec(r, c, y)))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_reconstructs_and_orthonormal(m in small_matrix()) {
        let f = svd(&m).unwrap();
        // Descending spectrum.
        for w in f.sigma.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
        // Reconstruction within 1e-6 relative.
        let err = frobenius_norm(&m.sub(&f.reconstruct()));
        prop_assert!(err <= 1e-6 * frobenius_norm(&m).max(1e-9));
        // U columns orthonormal within 1e-8.
        for a in 0..f.u.cols() {
            for b in a..f.u.cols() {
                let dot: f64 = (0..f.u.rows()).map(|r| f.u.get(r, a) * f.u.get(r, b)).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                prop_assert!((dot - expect).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn truncation_error_monotone_in_k(m in small_matrix()) {
        let f = svd(&m).unwrap();
        let mut prev = f64::INFINITY;
        for k in 0..=f.sigma.len() {
            let e = truncation_error(&f, k).unwrap();
            prop_assert!(e <= prev + 1e-12);
            prev = e;
        }
        prop_assert!(prev.abs() < 1e-9 * frobenius_norm(&m).max(1.0) || f.rank() < f.sigma.len());
    }

    #[test]
    fn truncated_residual_matches_tail(m in small_matrix()) {
        let f = svd(&m).unwrap();
        for k in 0..=f.sigma.len() {
            let low = truncate(&f, k).unwrap();
            let direct = frobenius_norm(&m.sub(&low.reconstruct()));
            let tail = truncation_error(&f, k).unwrap();
            prop_assert!((direct - tail).abs() <= 1e-8 * tail.max(1.0));
        }
    }

    #[test]
    fn residual_identity_exact((wf, wb) in matrix_pair()) {
        let r = solve_r(&wf, &wb).unwrap();
        let s = solve_s(&wf, &wb, &r).unwrap();
        let b = residual_b(&wf, &wb, &r, &s);
        for j in 0..wf.rows() {
            for i in 0..wf.cols() {
                let rec = r[j] * wb.get(j, i) * s[i] + b.get(j, i);
                prop_assert!((rec - wf.get(j, i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_rank_decomposition_lossless((wf, wb) in matrix_pair()) {
        let (r, s, f) = decompose_fc(&wf, &wb).unwrap();
        let full = truncate(&f, f.sigma.len()).unwrap();
        let rec = full.reconstruct();
        for j in 0..wf.rows() {
            for i in 0..wf.cols() {
                let v = r[j] * wb.get(j, i) * s[i] + rec.get(j, i);
                prop_assert!((v - wf.get(j, i)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pruning_idempotent_and_contractive(
        mut pool in proptest::collection::vec(-1.0f64..1.0, 1..60),
        tau in 1e-6f64..0.5,
    ) {
        let before: f64 = pool.iter().map(|x| x.abs()).sum();
        prune_absolute(&mut pool, tau);
        let once = pool.clone();
        let after: f64 = pool.iter().map(|x| x.abs()).sum();
        prune_absolute(&mut pool, tau);
        prop_assert_eq!(once, pool);
        prop_assert!(after <= before);
    }

    #[test]
    fn percentile_keeps_at_least_gamma(
        pool in proptest::collection::vec(-1.0f64..1.0, 1..80),
        gamma in 0.05f64..1.0,
    ) {
        let tau = prune_percentile(&pool, gamma).unwrap();
        let kept = pool.iter().filter(|x| x.abs() >= tau).count();
        prop_assert!(kept as f64 >= gamma * pool.len() as f64 - 1e-9);
    }

    #[test]
    fn reg_loss_scales_with_lambda(
        r in proptest::collection::vec(-1.0f64..1.0, 1..4),
        s in proptest::collection::vec(-1.0f64..1.0, 1..4),
        c in 0.1f64..10.0,
    ) {
        let k = 2usize;
        let layer = halrp::perturb::TaskLayerParams {
            layer_index: 0,
            low_rank: halrp::linalg::LowRankFactors {
                u_k: Matrix::from_fn(r.len(), k, |a, b| 0.3 * (a as f64 - b as f64)),
                sigma_k: vec![0.5; k],
                v_k: Matrix::from_fn(s.len(), k, |a, b| 0.2 * (a as f64 + b as f64)),
                k,
            },
            r,
            s,
            k,
        };
        let base = reg_loss_layer(&layer, &RegCoefficients::new(0.3, 0.07));
        let scaled = reg_loss_layer(&layer, &RegCoefficients::new(0.3 * c, 0.07 * c));
        prop_assert!((scaled - c * base).abs() <= 1e-9 * base.abs().max(1.0));
    }

    #[test]
    fn rank_budget_covers_alpha(
        grads in proptest::collection::vec(0.0f64..4.0, 1..4),
        alpha in 0.0f64..1.0,
    ) {
        let spectra: Vec<Vec<f64>> = grads
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let len = 1 + i % 3;
                (0..len).map(|j| 2.0 / (j + 1) as f64).collect()
            })
            .collect();
        let items = importance_scores(&grads, &spectra);
        let ranks: Vec<usize> = spectra.iter().map(|s| s.len()).collect();
        let budget = select_ranks(&items, alpha, &ranks).unwrap();
        if budget.total_score > 0.0 {
            prop_assert!(budget.selected_score >= alpha * budget.total_score - 1e-12);
        } else {
            prop_assert!(budget.k_per_layer.iter().all(|&k| k == 0));
        }
    }
}

/// The engine's concurrency contract: every value type can move across
/// threads, and read-only snapshots can be shared for parallel evaluation.
#[test]
fn core_types_are_send_and_sync() {
    fn check<T: Send + Sync>() {}
    check::<halrp::linalg::Matrix>();
    check::<halrp::linalg::Tensor4>();
    check::<halrp::linalg::SVDFactors>();
    check::<halrp::nn::Network>();
    check::<halrp::nn::Batch>();
    check::<halrp::perturb::TaskPrivateParams>();
    check::<halrp::cl_engine::ContinualState>();
    check::<halrp::tasks::TaskDataset>();
    check::<halrp::metrics::AccuracyMatrix>();
}
