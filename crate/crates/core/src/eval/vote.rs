use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rank assigned to a label missing from a top-5 list.
pub const ABSENT_RANK: usize = 6;
pub const TOP_K: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Majority,
    Top5Rank,
    IndexTiebreak,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub predictions: Vec<usize>,
    /// Best-first label lists, at most five per block.
    pub top5: Vec<Vec<usize>>,
    pub label: usize,
    pub resolution: Resolution,
}

fn rank_in(list: &[usize], label: usize) -> usize {
    list.iter()
        .take(TOP_K)
        .position(|&l| l == label)
        .map_or(ABSENT_RANK, |p| p + 1)
}

/// Combines per-block best-first label lists (the first entry is the
/// block's prediction).
///
/// A strict plurality wins outright. Otherwise each tied label is scored by
/// the sum of its ranks (1 = best, 6 = absent) in the top-5 lists of the
/// blocks that did not predict it; the lowest score wins, and any tie left
/// goes to the smallest label.
pub fn majority_vote(top5: &[Vec<usize>]) -> Result<VoteRecord> {
    if top5.is_empty() || top5.iter().any(|l| l.is_empty()) {
        return Err(Error::Invalid("majority_vote needs a non-empty list per block".into()));
    }
    let predictions: Vec<usize> = top5.iter().map(|l| l[0]).collect();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &p in &predictions {
        *counts.entry(p).or_default() += 1;
    }
    let best = *counts.values().max().unwrap();
    let tied: Vec<usize> = counts.iter().filter(|(_, &c)| c == best).map(|(&l, _)| l).collect();
    let record = |label, resolution| VoteRecord {
        predictions: predictions.clone(),
        top5: top5.to_vec(),
        label,
        resolution,
    };
    if tied.len() == 1 {
        return Ok(record(tied[0], Resolution::Majority));
    }
    let score = |label: usize| -> usize {
        top5.iter()
            .filter(|l| l[0] != label)
            .map(|l| rank_in(l, label))
            .sum()
    };
    let scores: Vec<(usize, usize)> = tied.iter().map(|&l| (score(l), l)).collect();
    let min = scores.iter().map(|s| s.0).min().unwrap();
    let winners: Vec<usize> = scores.iter().filter(|s| s.0 == min).map(|s| s.1).collect();
    if winners.len() == 1 {
        Ok(record(winners[0], Resolution::Top5Rank))
    } else {
        Ok(record(*winners.iter().min().unwrap(), Resolution::IndexTiebreak))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plurality() {
        let r = majority_vote(&[vec![2, 0], vec![2, 1], vec![5, 2]]).unwrap();
        assert_eq!((r.label, r.resolution), (2, Resolution::Majority));
        let single = majority_vote(&[vec![7, 1, 2]]).unwrap();
        assert_eq!((single.label, single.resolution), (7, Resolution::Majority));
    }

    #[test]
    fn all_distinct_uses_other_blocks_ranks() {
        // Label 1 sits 2nd and 3rd in the other lists (score 5), label 0
        // sits 4th and 5th (score 9), label 2 is absent elsewhere (12).
        let lists = vec![vec![0, 1, 9, 8, 7], vec![1, 9, 8, 0, 7], vec![2, 9, 1, 8, 0]];
        let r = majority_vote(&lists).unwrap();
        assert_eq!((r.label, r.resolution), (1, Resolution::Top5Rank));
    }

    #[test]
    fn equal_scores_fall_to_smallest_label() {
        // Label 1: absent in block 0 (6) + 3rd in block 2 (3) = 9.
        // Label 0: 4th in block 1 (4) + 5th in block 2 (5) = 9.
        let lists = vec![vec![0, 9, 8, 7, 6], vec![1, 9, 8, 0, 7], vec![2, 9, 1, 8, 0]];
        let r = majority_vote(&lists).unwrap();
        assert_eq!((r.label, r.resolution), (0, Resolution::IndexTiebreak));
    }

    #[test]
    fn partial_tie_and_order_independence() {
        let lists = vec![
            vec![3, 4, 0],
            vec![4, 3, 0],
            vec![3, 1, 4],
            vec![4, 1, 2],
            vec![0, 4, 3],
        ];
        let r = majority_vote(&lists).unwrap();
        // Label 3 elsewhere: block1 2nd, block3 absent, block4 3rd → 2+6+3=11.
        // Label 4 elsewhere: block0 2nd, block2 3rd, block4 2nd → 7.
        assert_eq!((r.label, r.resolution), (4, Resolution::Top5Rank));
        let mut rev = lists.clone();
        rev.reverse();
        assert_eq!(majority_vote(&rev).unwrap().label, 4);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(majority_vote(&[]).is_err());
        assert!(majority_vote(&[vec![]]).is_err());
    }
}
