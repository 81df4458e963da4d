//! Independent reference computations used by the test suites.
//!
//! Nothing here shares code paths with the engine: every routine is the
//! plain textbook version, written for clarity and checked against the
//! optimized implementations.

use crate::numerics::Matrix;

/// Triple-loop matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

/// Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotations, descending.
pub fn jacobi_eigenvalues(sym: &Matrix) -> Vec<f64> {
    let n = sym.rows();
    assert_eq!(n, sym.cols());
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| sym.row(i).to_vec()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Singular values via eigenvalues of the smaller Gram matrix.
pub fn singular_values(a: &Matrix) -> Vec<f64> {
    let gram = if a.rows() >= a.cols() {
        matmul(&a.transpose(), a)
    } else {
        matmul(a, &a.transpose())
    };
    jacobi_eigenvalues(&gram)
        .into_iter()
        .map(|v| v.max(0.0).sqrt())
        .collect()
}

/// Effective rank recomputed from an explicit spectrum.
pub fn effective_rank_from_spectrum(sigma: &[f64]) -> f64 {
    let total: f64 = sigma.iter().sum();
    let mut h = 0.0;
    for s in sigma {
        let p = s / total;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h.exp()
}

/// 1-based rank of `target` in `ranked` by linear scan.
pub fn rank_of(ranked: &[usize], target: usize) -> Option<usize> {
    for (i, &id) in ranked.iter().enumerate() {
        if id == target {
            return Some(i + 1);
        }
    }
    None
}

pub fn recall(ranked: &[usize], target: usize, k: usize) -> f64 {
    match rank_of(ranked, target) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

pub fn ndcg(ranked: &[usize], target: usize, k: usize) -> f64 {
    // DCG over the top k with a single relevant item; ideal DCG is 1.
    let mut dcg = 0.0;
    for (i, &id) in ranked.iter().take(k).enumerate() {
        if id == target {
            dcg += 1.0 / ((i + 2) as f64).log2();
        }
    }
    dcg
}

/// Reciprocal rank fusion by explicit score table and full sort.
pub fn rrf(lists: &[&[usize]], k0: f64) -> Vec<(usize, f64)> {
    let mut ids: Vec<usize> = lists.iter().flat_map(|l| l.iter().copied()).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut scored: Vec<(usize, f64)> = ids
        .into_iter()
        .map(|id| {
            let mut s = 0.0;
            for l in lists {
                if let Some(r) = rank_of(l, id) {
                    s += 1.0 / (k0 + r as f64);
                }
            }
            (id, s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
}

/// Naive 5-core style filter: repeat full recount-and-drop passes until nothing changes.
pub fn k_core(users: &[(u64, Vec<usize>)], k: usize) -> Vec<(u64, Vec<usize>)> {
    let mut cur: Vec<(u64, Vec<usize>)> = users.to_vec();
    loop {
        let mut item_counts = std::collections::BTreeMap::new();
        for (_, items) in &cur {
            for &i in items {
                *item_counts.entry(i).or_insert(0usize) += 1;
            }
        }
        let next: Vec<(u64, Vec<usize>)> = cur
            .iter()
            .map(|(u, items)| {
                (
                    *u,
                    items
                        .iter()
                        .copied()
                        .filter(|i| item_counts[i] >= k)
                        .collect::<Vec<_>>(),
                )
            })
            .filter(|(_, items)| items.len() >= k)
            .collect();
        if next == cur {
            return next;
        }
        cur = next;
    }
}
