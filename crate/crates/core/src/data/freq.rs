//! Item popularity bins over training-interaction counts.

use crate::error::{Error, Result};

use super::interactions::InteractionDataset;

/// Upper-inclusive bin boundaries: with `[6, 15]`, counts `0..=6` fall in bin
/// 0, `7..=15` in bin 1 and everything above in bin 2.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyBins {
    boundaries: Vec<usize>,
}

impl Default for FrequencyBins {
    fn default() -> Self {
        FrequencyBins {
            boundaries: vec![6, 15, 50],
        }
    }
}

impl FrequencyBins {
    pub fn new(boundaries: Vec<usize>) -> Result<Self> {
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "bin boundaries must be strictly increasing: {boundaries:?}"
            )));
        }
        Ok(FrequencyBins { boundaries })
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn len(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bin_of(&self, count: usize) -> usize {
        self.boundaries.iter().filter(|&&b| count > b).count()
    }

    /// Inclusive count range of a bin; `None` as the upper end means unbounded.
    pub fn range(&self, bin: usize) -> (usize, Option<usize>) {
        let low = if bin == 0 { 0 } else { self.boundaries[bin - 1] + 1 };
        (low, self.boundaries.get(bin).copied())
    }
}

/// Bin index for every item; items never seen in training land in bin 0.
pub fn frequency_bin_assign(dataset: &InteractionDataset, bins: &FrequencyBins) -> Vec<usize> {
    dataset
        .item_frequency()
        .iter()
        .map(|&c| bins.bin_of(c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_bin_takes_everything() {
        let b = FrequencyBins::new(vec![]).unwrap();
        assert_eq!(b.len(), 1);
        assert!([0, 1, 1000].iter().all(|&c| b.bin_of(c) == 0));
    }

    #[test]
    fn boundaries_are_upper_inclusive() {
        let b = FrequencyBins::new(vec![6, 15]).unwrap();
        assert_eq!(b.bin_of(6), 0);
        assert_eq!(b.bin_of(7), 1);
        assert_eq!(b.bin_of(15), 1);
        assert_eq!(b.bin_of(16), 2);
        assert_eq!(b.range(1), (7, Some(15)));
        assert_eq!(b.range(2), (16, None));
    }

    #[test]
    fn non_increasing_boundaries_are_rejected() {
        assert!(FrequencyBins::new(vec![6, 6]).is_err());
        assert!(FrequencyBins::new(vec![15, 6]).is_err());
    }
}
