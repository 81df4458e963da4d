use std::fmt::Write as _;
use std::path::Path;

use super::{Catalog, OutputLayer, RecModel};
use crate::error::{Error, Result};
use crate::format::write_file;
use crate::numerics::{cosine, log_softmax_rows, Matrix};

/// Items ranked by descending score, ties by ascending id.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredCandidates {
    pub ranked: Vec<(usize, f64)>,
}

impl ScoredCandidates {
    pub fn top_ids(&self, k: usize) -> Vec<usize> {
        self.ranked.iter().take(k).map(|&(i, _)| i).collect()
    }
}

pub fn rank_scores(scores: &[f64]) -> ScoredCandidates {
    let mut ranked: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ScoredCandidates { ranked }
}

impl RecModel {
    /// Scores every catalog item for each context's final position.
    ///
    /// Code heads score an item by the summed log-probabilities of its code
    /// tokens, which is exact constrained decoding over the catalog. The
    /// regression variant scores by cosine similarity to the prediction.
    pub fn score_contexts(&self, catalog: &Catalog<'_>, contexts: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let hidden = self.final_hidden(catalog, contexts)?;
        let n_items = catalog.n_items();
        match &self.output {
            OutputLayer::Heads(heads) => {
                let codes = (0..n_items)
                    .map(|i| catalog.code(i).map(|c| c.indices()))
                    .collect::<Result<Vec<_>>>()?;
                if let Some(c) = codes.iter().find(|c| c.len() != heads.len()) {
                    return Err(Error::Config(format!(
                        "code of length {} but model has {} heads",
                        c.len(),
                        heads.len()
                    )));
                }
                let mut out = Vec::with_capacity(contexts.len());
                for h in hidden.row_iter() {
                    let logp: Vec<Matrix> = heads
                        .iter()
                        .map(|head| log_softmax_rows(&Matrix::row_vector(&head.apply(h))))
                        .collect();
                    let scores = codes
                        .iter()
                        .map(|c| c.iter().zip(&logp).map(|(&t, lp)| lp.data()[t]).sum())
                        .collect();
                    out.push(scores);
                }
                Ok(out)
            }
            OutputLayer::Regression(lin) => Ok(hidden
                .row_iter()
                .map(|h| {
                    let pred = lin.apply(h);
                    (0..n_items)
                        .map(|i| cosine(&pred, catalog.embeddings.row(i)))
                        .collect()
                })
                .collect()),
        }
    }

    pub fn score_catalog(&self, catalog: &Catalog<'_>, context: &[usize]) -> Result<ScoredCandidates> {
        let scores = self.score_contexts(catalog, &[context])?;
        Ok(rank_scores(&scores[0]))
    }
}

/// `user<TAB>id,id,...`, one line per user.
pub fn save_predictions(rows: &[(u64, Vec<usize>)], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::new();
    for (user, ids) in rows {
        let _ = write!(s, "{user}\t");
        for (j, i) in ids.iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            let _ = write!(s, "{i}");
        }
        s.push('\n');
    }
    write_file(path.as_ref(), s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_break_by_id() {
        let r = rank_scores(&[0.5, 1.0, 0.5, -2.0]);
        assert_eq!(r.top_ids(4), vec![1, 0, 2, 3]);
    }
}
