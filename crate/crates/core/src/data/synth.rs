//! Synthetic clustered corpus with learnable next-item structure.
//!
//! Items are scattered around Gaussian cluster centers. Each user has a home
//! cluster and draws successive items from it with probability `stay_prob`,
//! otherwise from a uniformly chosen other cluster. Within a cluster, items
//! are drawn with Zipf-like popularity so that item frequencies span a long
//! tail. Embedding values are rounded to f32 precision so the table survives
//! an AEMB round trip unchanged.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::embeddings::EmbeddingTable;
use super::interactions::{InteractionDataset, UserSequence};
use crate::error::{Error, Result};
use crate::numerics::{norm, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_items: usize,
    pub dim: usize,
    pub n_users: usize,
    pub cluster_count: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub stay_prob: f64,
    /// Norm of the per-item offset from its center, relative to a unit center.
    pub noise: f64,
    /// Zipf exponent of within-cluster popularity; 0 is uniform.
    pub popularity_skew: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_items: 1000,
            dim: 64,
            n_users: 2000,
            cluster_count: 20,
            seq_len_min: 5,
            seq_len_max: 15,
            stay_prob: 0.8,
            noise: 0.35,
            popularity_skew: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_items == 0 || self.dim == 0 {
            return fail(format!("n_items and dim must be positive ({}, {})", self.n_items, self.dim));
        }
        if self.cluster_count == 0 || self.cluster_count > self.n_items {
            return fail(format!(
                "cluster_count must be in 1..={}, got {}",
                self.n_items, self.cluster_count
            ));
        }
        if self.seq_len_min == 0 || self.seq_len_min > self.seq_len_max {
            return fail(format!(
                "bad sequence length range [{}, {}]",
                self.seq_len_min, self.seq_len_max
            ));
        }
        if !(0.0..=1.0).contains(&self.stay_prob) {
            return fail(format!("stay_prob must be in [0, 1], got {}", self.stay_prob));
        }
        if !(self.noise >= 0.0) || !(self.popularity_skew >= 0.0) {
            return fail("noise and popularity_skew must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub embeddings: EmbeddingTable,
    pub dataset: InteractionDataset,
    /// Euclidean norm of every emitted embedding row.
    pub row_norms: Vec<f64>,
    /// Number of interactions written across all users, before any filtering.
    pub emitted_interactions: usize,
    pub item_cluster: Vec<usize>,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = 1.0 / (cfg.dim as f64).sqrt();

    let centers: Vec<Vec<f64>> = (0..cfg.cluster_count)
        .map(|_| {
            (0..cfg.dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                .collect()
        })
        .collect();

    let mut order: Vec<usize> = (0..cfg.n_items).collect();
    order.shuffle(&mut rng);
    let mut item_cluster = vec![0usize; cfg.n_items];
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cfg.cluster_count];
    for (j, &item) in order.iter().enumerate() {
        let c = j % cfg.cluster_count;
        item_cluster[item] = c;
        members[c].push(item);
    }

    let mut data = Vec::with_capacity(cfg.n_items * cfg.dim);
    let mut row_norms = Vec::with_capacity(cfg.n_items);
    for item in 0..cfg.n_items {
        let center = &centers[item_cluster[item]];
        let row: Vec<f64> = center
            .iter()
            .map(|c| round_f32(c + cfg.noise * scale * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        row_norms.push(norm(&row));
        data.extend(row);
    }
    let embeddings = EmbeddingTable::new(Matrix::from_vec(cfg.n_items, cfg.dim, data)?)?;

    let pickers: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| {
            let w: Vec<f64> = (0..m.len())
                .map(|r| 1.0 / ((r + 1) as f64).powf(cfg.popularity_skew))
                .collect();
            WeightedIndex::new(w).expect("non-empty positive weights")
        })
        .collect();

    let mut users = Vec::with_capacity(cfg.n_users);
    let mut emitted = 0;
    for user_id in 0..cfg.n_users {
        let home = rng.random_range(0..cfg.cluster_count);
        let len = rng.random_range(cfg.seq_len_min..=cfg.seq_len_max);
        let mut items: Vec<usize> = Vec::with_capacity(len);
        for _ in 0..len {
            let cluster = if cfg.cluster_count == 1 || rng.random::<f64>() < cfg.stay_prob {
                home
            } else {
                let other = rng.random_range(0..cfg.cluster_count - 1);
                if other >= home {
                    other + 1
                } else {
                    other
                }
            };
            let pool = &members[cluster];
            let mut item = pool[pickers[cluster].sample(&mut rng)];
            if pool.len() > 1 {
                while items.last() == Some(&item) {
                    item = pool[pickers[cluster].sample(&mut rng)];
                }
            }
            items.push(item);
        }
        emitted += items.len();
        users.push(UserSequence {
            user_id: user_id as u64,
            items,
        });
    }
    let dataset = InteractionDataset::new(cfg.n_items, users)?;
    Ok(SynthOutput {
        embeddings,
        dataset,
        row_norms,
        emitted_interactions: emitted,
        item_cluster,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_output() {
        let cfg = SynthConfig {
            n_items: 50,
            n_users: 30,
            cluster_count: 5,
            ..Default::default()
        };
        let a = synth_dataset(&cfg).unwrap();
        let b = synth_dataset(&cfg).unwrap();
        assert_eq!(a.embeddings, b.embeddings);
        assert_eq!(a.dataset, b.dataset);
    }

    #[test]
    fn lengths_stay_in_range() {
        let cfg = SynthConfig {
            n_items: 80,
            n_users: 100,
            cluster_count: 8,
            seq_len_min: 5,
            seq_len_max: 10,
            ..Default::default()
        };
        let out = synth_dataset(&cfg).unwrap();
        assert_eq!(out.dataset.users().len(), 100);
        assert!(out
            .dataset
            .users()
            .iter()
            .all(|u| (5..=10).contains(&u.items.len())));
    }

    #[test]
    fn rejects_more_clusters_than_items() {
        let cfg = SynthConfig {
            n_items: 3,
            cluster_count: 4,
            ..Default::default()
        };
        assert!(synth_dataset(&cfg).is_err());
    }
}
