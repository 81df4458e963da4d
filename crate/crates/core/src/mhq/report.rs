use std::collections::BTreeMap;

use super::{assign_all, CodebookSet, SemanticCode};
use crate::data::EmbeddingTable;
use crate::error::Result;

/// Fraction of each codebook's centroids chosen at least once over the table,
/// subspace-major.
pub fn codebook_utilization(cb: &CodebookSet, table: &EmbeddingTable) -> Result<Vec<f64>> {
    let codes = assign_all(cb, table)?;
    let k = cb.codebook_size();
    let mut used = vec![vec![false; k]; cb.code_len()];
    for c in &codes {
        for (u, &i) in used.iter_mut().zip(c.indices()) {
            u[i] = true;
        }
    }
    Ok(used
        .iter()
        .map(|u| u.iter().filter(|&&b| b).count() as f64 / k as f64)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CollisionReport {
    /// Items whose code no other item shares.
    pub unique_count: usize,
    /// Item ids sharing one code, ascending within and across groups.
    pub groups: Vec<Vec<usize>>,
}

impl CollisionReport {
    /// Items that share their code with at least one other item.
    pub fn colliding_items(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }
}

pub fn collision_report(codes: &[SemanticCode]) -> CollisionReport {
    let mut by_code: BTreeMap<&SemanticCode, Vec<usize>> = BTreeMap::new();
    for (item, c) in codes.iter().enumerate() {
        by_code.entry(c).or_default().push(item);
    }
    let mut groups: Vec<Vec<usize>> = by_code.into_values().filter(|g| g.len() > 1).collect();
    groups.sort();
    let colliding: usize = groups.iter().map(Vec::len).sum();
    CollisionReport {
        unique_count: codes.len() - colliding,
        groups,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_and_duplicated_codes() {
        let codes = vec![
            SemanticCode(vec![0, 1]),
            SemanticCode(vec![1, 1]),
            SemanticCode(vec![0, 1]),
        ];
        let r = collision_report(&codes);
        assert_eq!(r.unique_count, 1);
        assert_eq!(r.groups, vec![vec![0, 2]]);
        let r = collision_report(&codes[..2]);
        assert_eq!(r.unique_count, 2);
        assert!(r.groups.is_empty());
    }
}
