//! Ranking metrics, popularity-binned diagnostics, effective rank and
//! reciprocal-rank fusion.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{FrequencyBins, InteractionDataset, Split};
use crate::error::{Error, Result};
use crate::format::write_file;
use crate::numerics::{cosine, svd_values, Matrix};
use crate::recmodel::{rank_scores, Catalog, RecModel};

/// Default fusion constant.
pub const RRF_K0: f64 = 50.0;

/// 1 if `target` is among the first `k` ids.
pub fn recall_at_k(ranked: &[usize], target: usize, k: usize) -> f64 {
    match ranked.iter().take(k).position(|&i| i == target) {
        Some(_) => 1.0,
        None => 0.0,
    }
}

/// Single-target NDCG: `1/log2(1 + rank)` inside the cutoff, else 0.
pub fn ndcg_at_k(ranked: &[usize], target: usize, k: usize) -> f64 {
    match ranked.iter().take(k).position(|&i| i == target) {
        Some(p) => ndcg_from_rank(p + 1, k),
        None => 0.0,
    }
}

pub fn recall_from_rank(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_from_rank(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((1 + rank) as f64).log2()
    } else {
        0.0
    }
}

/// 1-based rank of `target` under descending scores with ties by ascending id.
pub fn target_rank(scores: &[f64], target: usize) -> usize {
    let st = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, s)| match s.total_cmp(&st) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Equal => j < target,
            std::cmp::Ordering::Less => false,
        })
        .count()
}

/// Reciprocal-rank fusion: each list adds `1/(k0 + rank)` to its items.
/// Returns `(id, score)` sorted by descending score, ties by ascending id.
pub fn rrf_fuse(lists: &[&[usize]], k0: f64) -> Vec<(usize, f64)> {
    let mut score: BTreeMap<usize, f64> = BTreeMap::new();
    for list in lists {
        for (r, &id) in list.iter().enumerate() {
            *score.entry(id).or_insert(0.0) += 1.0 / (k0 + (r + 1) as f64);
        }
    }
    let mut fused: Vec<(usize, f64)> = score.into_iter().collect();
    fused.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    fused
}

/// `exp(−Σ p ln p)` with `p` the singular values normalized to sum to one.
pub fn effective_rank(z: &Matrix) -> Result<f64> {
    let sigma = svd_values(z)?;
    effective_rank_of_spectrum(&sigma)
}

pub fn effective_rank_of_spectrum(sigma: &[f64]) -> Result<f64> {
    let total: f64 = sigma.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Usage("effective rank of an all-zero matrix is undefined".into()));
    }
    let h: f64 = sigma
        .iter()
        .map(|s| s / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(h.exp())
}

/// Singular values divided by their sum, descending.
pub fn normalized_spectrum(z: &Matrix) -> Result<Vec<f64>> {
    let sigma = svd_values(z)?;
    let total: f64 = sigma.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Usage("spectrum of an all-zero matrix".into()));
    }
    Ok(sigma.iter().map(|s| s / total).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinMetric {
    pub low: usize,
    pub high: Option<usize>,
    pub users: usize,
    pub recall10: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub users: usize,
    pub recall5: f64,
    pub recall10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    /// Recall@10 grouped by the target item's training frequency.
    pub bins: Vec<BinMetric>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Top-10 ids per evaluated user.
    pub predictions: Vec<(u64, Vec<usize>)>,
}

struct Accumulator {
    sums: [f64; 4],
    users: usize,
    bin_hits: Vec<f64>,
    bin_users: Vec<usize>,
}

impl Accumulator {
    fn new(bins: usize) -> Self {
        Accumulator {
            sums: [0.0; 4],
            users: 0,
            bin_hits: vec![0.0; bins],
            bin_users: vec![0; bins],
        }
    }

    fn add(&mut self, rank: usize, bin: usize) {
        self.sums[0] += recall_from_rank(rank, 5);
        self.sums[1] += recall_from_rank(rank, 10);
        self.sums[2] += ndcg_from_rank(rank, 5);
        self.sums[3] += ndcg_from_rank(rank, 10);
        self.users += 1;
        self.bin_hits[bin] += recall_from_rank(rank, 10);
        self.bin_users[bin] += 1;
    }

    fn finish(self, bins: &FrequencyBins) -> MetricReport {
        let n = self.users.max(1) as f64;
        MetricReport {
            users: self.users,
            recall5: self.sums[0] / n,
            recall10: self.sums[1] / n,
            ndcg5: self.sums[2] / n,
            ndcg10: self.sums[3] / n,
            bins: (0..bins.len())
                .map(|b| {
                    let (low, high) = bins.range(b);
                    let users = self.bin_users[b];
                    BinMetric {
                        low,
                        high,
                        users,
                        recall10: if users == 0 { 0.0 } else { self.bin_hits[b] / users as f64 },
                    }
                })
                .collect(),
        }
    }
}

/// Evaluates any catalog scorer: `scorer` maps a batch of contexts to one
/// score per catalog item for each.
pub fn evaluate_scores(
    dataset: &InteractionDataset,
    split: Split,
    bins: &FrequencyBins,
    mut scorer: impl FnMut(&[&[usize]]) -> Result<Vec<Vec<f64>>>,
) -> Result<Evaluation> {
    let freq = dataset.item_frequency();
    let mut acc = Accumulator::new(bins.len());
    let mut predictions = Vec::new();
    let users: Vec<_> = dataset
        .users()
        .iter()
        .filter_map(|u| u.context(split).map(|(c, t)| (u.user_id, c, t)))
        .collect();
    for chunk in users.chunks(256) {
        let ctx: Vec<&[usize]> = chunk.iter().map(|u| u.1).collect();
        let scores = scorer(&ctx)?;
        if scores.len() != chunk.len() {
            return Err(Error::dim(
                "evaluate",
                format!("{} score vectors for {} contexts", scores.len(), chunk.len()),
            ));
        }
        for (s, &(user, _, target)) in scores.iter().zip(chunk) {
            if s.len() != dataset.n_items() {
                return Err(Error::dim(
                    "evaluate",
                    format!("{} scores for a catalog of {}", s.len(), dataset.n_items()),
                ));
            }
            acc.add(target_rank(s, target), bins.bin_of(freq[target]));
            predictions.push((user, rank_scores(s).top_ids(10)));
        }
    }
    Ok(Evaluation {
        report: acc.finish(bins),
        predictions,
    })
}

/// Full-catalog evaluation of a trained model on one split.
pub fn evaluate(
    model: &RecModel,
    catalog: &Catalog<'_>,
    dataset: &InteractionDataset,
    split: Split,
    bins: &FrequencyBins,
) -> Result<Evaluation> {
    evaluate_scores(dataset, split, bins, |ctx| model.score_contexts(catalog, ctx))
}

/// Input-side retrieval diagnostic: rank the target against seeded random
/// negatives by cosine similarity to the mean representation of the history.
/// Returns recall@10 per target-frequency bin, with the user count per bin.
pub fn binned_input_retrieval(
    reps: &Matrix,
    dataset: &InteractionDataset,
    split: Split,
    bins: &FrequencyBins,
    negatives: usize,
    seed: u64,
) -> Result<Vec<BinMetric>> {
    let n = reps.rows();
    if n != dataset.n_items() {
        return Err(Error::dim(
            "binned_input_retrieval",
            format!("{n} representations for {} items", dataset.n_items()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let freq = dataset.item_frequency();
    let mut acc = Accumulator::new(bins.len());
    let mut warned = false;
    for u in dataset.users() {
        let Some((history, target)) = u.context(split) else {
            continue;
        };
        let mut mean = vec![0.0; reps.cols()];
        for &i in history {
            for (m, v) in mean.iter_mut().zip(reps.row(i)) {
                *m += v;
            }
        }
        let inv = 1.0 / history.len() as f64;
        mean.iter_mut().for_each(|m| *m *= inv);

        let mut excluded = vec![false; n];
        excluded[target] = true;
        for &i in history {
            excluded[i] = true;
        }
        let pool: Vec<usize> = (0..n).filter(|&i| !excluded[i]).collect();
        let negs: Vec<usize> = if pool.len() >= negatives {
            index::sample(&mut rng, pool.len(), negatives)
                .into_iter()
                .map(|j| pool[j])
                .collect()
        } else {
            if !warned {
                warn!(
                    "only {} eligible negatives for {negatives} requested; sampling with replacement",
                    pool.len()
                );
                warned = true;
            }
            let fallback: Vec<usize> = if pool.is_empty() {
                (0..n).filter(|&i| i != target).collect()
            } else {
                pool
            };
            if fallback.is_empty() {
                Vec::new()
            } else {
                (0..negatives)
                    .map(|_| fallback[rng.random_range(0..fallback.len())])
                    .collect()
            }
        };
        let st = cosine(&mean, reps.row(target));
        let rank = 1 + negs
            .iter()
            .filter(|&&j| {
                let s = cosine(&mean, reps.row(j));
                s > st || (s == st && j < target)
            })
            .count();
        acc.add(rank, bins.bin_of(freq[target]));
    }
    Ok(acc.finish(bins).bins)
}

fn fmt_high(h: Option<usize>) -> String {
    h.map_or_else(|| "inf".to_string(), |v| v.to_string())
}

/// `metric<TAB>value` lines followed by a per-bin block.
pub fn report_text(r: &MetricReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "users\t{}", r.users);
    let _ = writeln!(s, "recall@5\t{:.6}", r.recall5);
    let _ = writeln!(s, "recall@10\t{:.6}", r.recall10);
    let _ = writeln!(s, "ndcg@5\t{:.6}", r.ndcg5);
    let _ = writeln!(s, "ndcg@10\t{:.6}", r.ndcg10);
    s.push_str("\n[bins]\nlow\thigh\tusers\trecall@10\n");
    for b in &r.bins {
        let _ = writeln!(s, "{}\t{}\t{}\t{:.6}", b.low, fmt_high(b.high), b.users, b.recall10);
    }
    s
}

pub fn write_report(r: &MetricReport, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), report_text(r).as_bytes())
}

/// Plot data: `bin_low,bin_high,recall`.
pub fn bins_csv(bins: &[BinMetric]) -> String {
    let mut s = String::from("bin_low,bin_high,recall\n");
    for b in bins {
        let _ = writeln!(s, "{},{},{:.6}", b.low, fmt_high(b.high), b.recall10);
    }
    s
}

/// Plot data: `index,normalized_singular_value`, full precision.
pub fn spectrum_csv(normalized: &[f64]) -> String {
    let mut s = String::from("index,normalized_singular_value\n");
    for (i, v) in normalized.iter().enumerate() {
        let _ = writeln!(s, "{},{:?}", i + 1, v);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recall_and_ndcg_basics() {
        let ranked: Vec<usize> = (0..20).collect();
        assert_eq!(recall_at_k(&ranked, 0, 5), 1.0);
        assert_eq!(recall_at_k(&ranked, 5, 5), 0.0);
        assert_eq!(recall_at_k(&ranked, 5, 10), 1.0);
        assert_eq!(ndcg_at_k(&ranked, 0, 5), 1.0);
        assert!((ndcg_at_k(&ranked, 1, 5) - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert_eq!(ndcg_at_k(&ranked, 7, 5), 0.0);
    }

    #[test]
    fn rrf_rank_one_in_both() {
        let f = rrf_fuse(&[&[3, 1], &[3, 2]], RRF_K0);
        assert_eq!(f[0], (3, 2.0 / 51.0));
        let same = rrf_fuse(&[&[4, 2, 9], &[4, 2, 9]], RRF_K0);
        assert_eq!(same.iter().map(|p| p.0).collect::<Vec<_>>(), vec![4, 2, 9]);
    }

    #[test]
    fn effective_rank_examples() {
        assert!((effective_rank(&Matrix::diag(&[2.0, 2.0, 2.0])).unwrap() - 3.0).abs() < 1e-9);
        assert!((effective_rank(&Matrix::diag(&[1.0, 0.0, 0.0])).unwrap() - 1.0).abs() < 1e-12);
        assert!(effective_rank(&Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn target_rank_breaks_ties_by_id() {
        assert_eq!(target_rank(&[1.0, 1.0, 0.5], 1), 2);
        assert_eq!(target_rank(&[1.0, 1.0, 0.5], 0), 1);
        assert_eq!(target_rank(&[1.0, 3.0, 0.5], 2), 3);
    }
}
