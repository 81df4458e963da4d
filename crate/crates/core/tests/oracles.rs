//! Production routines against the naive reference implementations.

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use asymrec::data::{k_core_filter, UserSequence};
use asymrec::eval::{effective_rank, ndcg_at_k, normalized_spectrum, recall_at_k, rrf_fuse, target_rank, RRF_K0};
use asymrec::numerics::{svd_values, Matrix};
use asymrec::oracle;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn matrix_pair() -> impl Strategy<Value = (Matrix, Matrix)> {
    (1usize..9, 1usize..9, 1usize..9).prop_flat_map(|(n, k, m)| (matrix(n, k), matrix(k, m)))
}

fn any_matrix() -> impl Strategy<Value = Matrix> {
    (1usize..10, 1usize..10).prop_flat_map(|(r, c)| matrix(r, c))
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop((a, b) in matrix_pair()) {
        let fast = a.matmul(&b).unwrap();
        let slow = oracle::matmul(&a, &b);
        prop_assert!(fast.max_abs_diff(&slow) < 1e-12);
        let nt = a.matmul_nt(&b.transpose()).unwrap();
        prop_assert!(nt.max_abs_diff(&slow) < 1e-12);
        let tn = a.transpose().matmul_tn(&b).unwrap();
        prop_assert!(tn.max_abs_diff(&slow) < 1e-12);
    }

    #[test]
    fn singular_values_match_jacobi(a in any_matrix()) {
        let fast = svd_values(&a).unwrap();
        let slow = oracle::singular_values(&a);
        prop_assert_eq!(fast.len(), slow.len());
        for (x, y) in fast.iter().zip(&slow) {
            prop_assert!((x - y).abs() < 1e-8 * (1.0 + y), "{} vs {}", x, y);
        }
        prop_assert!(fast.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn effective_rank_is_scale_invariant(a in any_matrix(), c in 0.01f64..100.0) {
        prop_assume!(a.frobenius_norm() > 1e-3);
        let er = effective_rank(&a).unwrap();
        let scaled = effective_rank(&a.scale(c)).unwrap();
        prop_assert!((er - scaled).abs() < 1e-9, "{} vs {}", er, scaled);
        prop_assert!(er >= 1.0 - 1e-12 && er <= a.rows().min(a.cols()) as f64 + 1e-9);
        let spec = normalized_spectrum(&a).unwrap();
        prop_assert!((spec.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn effective_rank_matches_oracle_spectrum() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let (r, c) = (rng.random_range(2..30), rng.random_range(2..12));
        let a = Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let er = effective_rank(&a).unwrap();
        let expect = oracle::effective_rank_from_spectrum(&oracle::singular_values(&a));
        assert!((er - expect).abs() < 1e-6, "{er} vs {expect}");
    }
    let id = Matrix::identity(7);
    assert!((effective_rank(&id).unwrap() - 7.0).abs() < 1e-12);
}

fn random_ranking(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(rng);
    ids.truncate(rng.random_range(0..=n));
    ids
}

#[test]
fn metrics_match_linear_scan_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let n = rng.random_range(1..40);
        let ranked = random_ranking(&mut rng, n);
        let target = rng.random_range(0..n + 3);
        let k = rng.random_range(1..15);
        assert_eq!(recall_at_k(&ranked, target, k), oracle::recall(&ranked, target, k));
        assert!((ndcg_at_k(&ranked, target, k) - oracle::ndcg(&ranked, target, k)).abs() <= 1e-12);
        let lists: Vec<Vec<usize>> = (0..rng.random_range(1..4)).map(|_| random_ranking(&mut rng, n)).collect();
        let refs: Vec<&[usize]> = lists.iter().map(Vec::as_slice).collect();
        assert_eq!(rrf_fuse(&refs, RRF_K0), oracle::rrf(&refs, RRF_K0));
    }
    let both = rrf_fuse(&[&[4, 1], &[4, 2]], RRF_K0);
    assert_eq!(both[0], (4, 2.0 / 51.0));
}

#[test]
fn target_rank_matches_sorted_position() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let n = rng.random_range(1..30);
        // Few distinct values, so ties are common.
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        for t in 0..n {
            assert_eq!(Some(target_rank(&scores, t)), oracle::rank_of(&order, t));
        }
    }
}

#[test]
fn k_core_matches_fixpoint_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let n_items = rng.random_range(1..25);
        let users: Vec<UserSequence> = (0..rng.random_range(0..30))
            .map(|u| UserSequence {
                user_id: u as u64,
                items: (0..rng.random_range(0..12)).map(|_| rng.random_range(0..n_items)).collect(),
            })
            .collect();
        let k = rng.random_range(1..6);
        let got: Vec<(u64, Vec<usize>)> = k_core_filter(&users, k)
            .into_iter()
            .map(|u| (u.user_id, u.items))
            .collect();
        let raw: Vec<(u64, Vec<usize>)> = users.iter().map(|u| (u.user_id, u.items.clone())).collect();
        assert_eq!(got, oracle::k_core(&raw, k));
    }
}
