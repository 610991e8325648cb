//! Self-contained ROUGE-1, ROUGE-2, and ROUGE-L over token-id
//! sequences. F-scores use β=1; tokens compare by exact id.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub const ZERO: RougeScore = RougeScore {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };

    fn from_counts(overlap: usize, candidate_total: usize, reference_total: usize) -> RougeScore {
        if candidate_total == 0 || reference_total == 0 {
            return RougeScore::ZERO;
        }
        let precision = overlap as f64 / candidate_total as f64;
        let recall = overlap as f64 / reference_total as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        RougeScore {
            precision,
            recall,
            f1,
        }
    }
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap score.
pub fn rouge_n(candidate: &[usize], reference: &[usize], n: usize) -> RougeScore {
    assert!(n >= 1, "n-gram order must be at least 1");
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let overlap: usize = cand
        .iter()
        .map(|(gram, c)| (*c).min(refc.get(gram).copied().unwrap_or(0)))
        .sum();
    let cand_total = candidate.len().saturating_sub(n - 1);
    let ref_total = reference.len().saturating_sub(n - 1);
    RougeScore::from_counts(overlap, cand_total, ref_total)
}

/// Longest-common-subsequence length by dynamic programming.
pub fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based score over the flat token sequences.
pub fn rouge_l(candidate: &[usize], reference: &[usize]) -> RougeScore {
    RougeScore::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_sequences_score_one() {
        let s = [4usize, 5, 6, 7];
        for score in [rouge_n(&s, &s, 1), rouge_n(&s, &s, 2), rouge_l(&s, &s)] {
            assert_eq!(score.precision, 1.0);
            assert_eq!(score.recall, 1.0);
            assert_eq!(score.f1, 1.0);
        }
    }

    #[test]
    fn disjoint_sequences_score_zero() {
        let a = [4usize, 5, 6];
        let b = [7usize, 8, 9];
        for score in [rouge_n(&a, &b, 1), rouge_n(&a, &b, 2), rouge_l(&a, &b)] {
            assert_eq!(score, RougeScore::ZERO);
        }
    }

    #[test]
    fn unigram_hand_count_with_clipping() {
        // candidate "a b a" vs reference "a b c": overlap clipped to
        // a:1 + b:1 = 2 of 3 either way.
        let (a, b, c) = (4usize, 5usize, 6usize);
        let score = rouge_n(&[a, b, a], &[a, b, c], 1);
        assert!((score.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((score.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((score.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn bigram_hand_count() {
        // candidate "a b c d" vs reference "a b d c": only "a b" matches.
        let (a, b, c, d) = (4usize, 5, 6, 7);
        let score = rouge_n(&[a, b, c, d], &[a, b, d, c], 2);
        assert!((score.precision - 1.0 / 3.0).abs() < 1e-15);
        assert!((score.recall - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn lcs_hand_example() {
        // candidate "a c b" vs reference "a b c": LCS length 2.
        let (a, b, c) = (4usize, 5usize, 6usize);
        let score = rouge_l(&[a, c, b], &[a, b, c]);
        assert!((score.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((score.recall - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_inputs_score_zero() {
        let s = [4usize, 5];
        assert_eq!(rouge_n(&[], &s, 1), RougeScore::ZERO);
        assert_eq!(rouge_n(&s, &[], 1), RougeScore::ZERO);
        assert_eq!(rouge_l(&[], &s), RougeScore::ZERO);
        // Sequences shorter than n have no n-grams.
        assert_eq!(rouge_n(&[4], &s, 2), RougeScore::ZERO);
    }

    /// Brute-force LCS: enumerate all subsequences of the shorter side.
    fn lcs_brute(a: &[usize], b: &[usize]) -> usize {
        let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        let mut best = 0;
        for mask in 0u32..(1 << short.len()) {
            let sub: Vec<usize> = short
                .iter()
                .enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1)
                .map(|(_, &t)| t)
                .collect();
            if sub.len() > best && is_subsequence(&sub, long) {
                best = sub.len();
            }
        }
        best
    }

    fn is_subsequence(sub: &[usize], seq: &[usize]) -> bool {
        let mut it = seq.iter();
        sub.iter().all(|s| it.any(|t| t == s))
    }

    proptest! {
        #[test]
        fn f1_symmetric_under_swap(
            a in proptest::collection::vec(0usize..6, 0..12),
            b in proptest::collection::vec(0usize..6, 0..12),
        ) {
            for (x, y) in [
                (rouge_n(&a, &b, 1), rouge_n(&b, &a, 1)),
                (rouge_n(&a, &b, 2), rouge_n(&b, &a, 2)),
                (rouge_l(&a, &b), rouge_l(&b, &a)),
            ] {
                prop_assert_eq!(x.precision, y.recall);
                prop_assert_eq!(x.recall, y.precision);
                prop_assert!((x.f1 - y.f1).abs() < 1e-15);
            }
        }

        #[test]
        fn rouge_n_invariant_under_relabeling(
            a in proptest::collection::vec(0usize..8, 0..12),
            b in proptest::collection::vec(0usize..8, 0..12),
        ) {
            let relabel = |s: &[usize]| s.iter().map(|t| t * 31 + 100).collect::<Vec<_>>();
            prop_assert_eq!(rouge_n(&a, &b, 1), rouge_n(&relabel(&a), &relabel(&b), 1));
            prop_assert_eq!(rouge_n(&a, &b, 2), rouge_n(&relabel(&a), &relabel(&b), 2));
        }

        #[test]
        fn lcs_dp_matches_brute_force(
            a in proptest::collection::vec(0usize..4, 0..10),
            b in proptest::collection::vec(0usize..4, 0..10),
        ) {
            prop_assert_eq!(lcs_len(&a, &b), lcs_brute(&a, &b));
        }
    }
}
