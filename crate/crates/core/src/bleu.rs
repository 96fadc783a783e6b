//! Corpus-level BLEU against one or more references per sentence.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// BLEU in `[0, 100]`.
    pub score: f64,
    /// Modified precision per order (0 when an order has no hypothesis n-grams).
    pub precisions: Vec<f64>,
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    pub fn length_ratio(&self) -> f64 {
        if self.ref_len == 0 {
            0.0
        } else {
            self.hyp_len as f64 / self.ref_len as f64
        }
    }
}

fn ngram_counts<T: Ord>(tokens: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Reference length closest to `hyp_len`, ties going to the shorter one.
pub fn closest_ref_len<T>(hyp_len: usize, refs: &[Vec<T>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(hyp_len), r))
        .unwrap_or(0)
}

/// Clipped n-gram matches and hypothesis n-gram totals for one sentence.
pub fn sentence_stats<T: Ord>(hyp: &[T], refs: &[Vec<T>], max_order: usize) -> (Vec<usize>, Vec<usize>) {
    let mut matches = vec![0; max_order];
    let mut totals = vec![0; max_order];
    for n in 1..=max_order {
        let hyp_counts = ngram_counts(hyp, n);
        let mut max_ref: BTreeMap<&[T], usize> = BTreeMap::new();
        for r in refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        for (g, c) in hyp_counts {
            totals[n - 1] += c;
            matches[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
        }
    }
    (matches, totals)
}

/// Corpus BLEU: clipped precisions (clip = max count over references),
/// closest-reference brevity penalty, uniform geometric mean over the orders
/// for which the hypotheses contain any n-gram. Zero when an order has no matches.
pub fn bleu_multi_reference<T: Ord>(
    hypotheses: &[Vec<T>],
    references: &[Vec<Vec<T>>],
    max_order: usize,
) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::CountMismatch {
            what: "hypotheses and reference sets",
            left: hypotheses.len(),
            right: references.len(),
        });
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(Error::EmptyReferenceSet(i));
    }
    let mut matches = vec![0; max_order];
    let mut totals = vec![0; max_order];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, refs) in hypotheses.iter().zip(references) {
        let (m, t) = sentence_stats(h, refs, max_order);
        for n in 0..max_order {
            matches[n] += m[n];
            totals[n] += t[n];
        }
        hyp_len += h.len();
        ref_len += closest_ref_len(h.len(), refs);
    }
    let precisions: Vec<f64> = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        libm::exp(1.0 - ref_len as f64 / hyp_len as f64)
    };
    let active: Vec<usize> = (0..max_order).filter(|&n| totals[n] > 0).collect();
    let score = if active.is_empty() || active.iter().any(|&n| matches[n] == 0) {
        0.0
    } else {
        let log_mean = active.iter().map(|&n| libm::log(precisions[n])).sum::<f64>() / active.len() as f64;
        100.0 * brevity_penalty * libm::exp(log_mean)
    };
    Ok(BleuReport {
        score,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::String;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn identity_is_100() {
        let h = vec![toks("the cat sat on the mat"), toks("a b c d e")];
        let r: Vec<Vec<Vec<String>>> = h.iter().map(|s| vec![s.clone()]).collect();
        let rep = bleu_multi_reference(&h, &r, 4).unwrap();
        assert!((rep.score - 100.0).abs() < 1e-9);
    }

    #[test]
    fn empty_hypotheses_score_zero() {
        let h: Vec<Vec<String>> = vec![vec![], vec![]];
        let r = vec![vec![toks("a b")], vec![toks("c")]];
        assert_eq!(bleu_multi_reference(&h, &r, 4).unwrap().score, 0.0);
    }

    #[test]
    fn short_hypothesis_against_longer_reference() {
        let h = vec![toks("the cat sat")];
        let r = vec![vec![toks("the cat sat down")]];
        let rep = bleu_multi_reference(&h, &r, 4).unwrap();
        assert_eq!(rep.precisions, vec![1.0, 1.0, 1.0, 0.0]);
        assert_eq!(rep.totals, vec![3, 2, 1, 0]);
        let bp = f64::exp(1.0 - 4.0 / 3.0);
        assert!((rep.brevity_penalty - bp).abs() < 1e-15);
        assert!((rep.score - 100.0 * bp).abs() < 1e-9);
    }

    #[test]
    fn zero_match_order_gives_zero() {
        let h = vec![toks("a b c d")];
        let r = vec![vec![toks("a c b d")]];
        let rep = bleu_multi_reference(&h, &r, 4).unwrap();
        assert_eq!(rep.matches, vec![4, 0, 0, 0]);
        assert_eq!(rep.score, 0.0);
    }

    #[test]
    fn closest_length_prefers_shorter_on_tie() {
        let refs = vec![toks("a b c d e f"), toks("a b")];
        assert_eq!(closest_ref_len(4, &refs), 2);
        assert_eq!(closest_ref_len(5, &refs), 6);
    }

    #[test]
    fn errors() {
        let h = vec![toks("a")];
        assert!(matches!(
            bleu_multi_reference(&h, &[], 4),
            Err(Error::CountMismatch { .. })
        ));
        let empty: Vec<Vec<Vec<String>>> = vec![vec![]];
        assert_eq!(
            bleu_multi_reference(&h, &empty, 4).unwrap_err(),
            Error::EmptyReferenceSet(0)
        );
    }

    #[test]
    fn extra_reference_never_lowers_match_counts() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let sent = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<u32> {
            (0..rng.gen_range(1..9)).map(|_| rng.gen_range(0..5)).collect()
        };
        for _ in 0..100 {
            let h = vec![sent(&mut rng), sent(&mut rng)];
            let refs: Vec<Vec<Vec<u32>>> = (0..2).map(|_| vec![sent(&mut rng)]).collect();
            let mut more = refs.clone();
            more[rng.gen_range(0..2)].push(sent(&mut rng));
            let a = bleu_multi_reference(&h, &refs, 4).unwrap();
            let b = bleu_multi_reference(&h, &more, 4).unwrap();
            for n in 0..4 {
                assert!(b.matches[n] >= a.matches[n]);
            }
        }
    }

    #[test]
    fn extra_reference_can_lower_score_through_brevity() {
        // The added reference is closer in length but longer than the hypothesis.
        let h = vec![toks("a b c d e f g h")];
        let one = vec![vec![toks("a b c d e")]];
        let two = vec![vec![toks("a b c d e"), toks("x x x x x x x x x")]];
        let a = bleu_multi_reference(&h, &one, 4).unwrap();
        let b = bleu_multi_reference(&h, &two, 4).unwrap();
        assert_eq!(a.matches, b.matches);
        assert_eq!(a.brevity_penalty, 1.0);
        assert!((b.brevity_penalty - f64::exp(1.0 - 9.0 / 8.0)).abs() < 1e-15);
        assert!(b.score < a.score);
    }

    proptest::proptest! {
        #[test]
        fn identity_and_permutation(
            sents in proptest::collection::vec(proptest::collection::vec(0u32..6, 1..10), 1..6),
            rot in 0usize..6,
        ) {
            let refs: Vec<Vec<Vec<u32>>> = sents.iter().map(|s| vec![s.clone()]).collect();
            let r = bleu_multi_reference(&sents, &refs, 4).unwrap();
            proptest::prop_assert!((r.score - 100.0).abs() < 1e-9);
            let k = rot % sents.len();
            let mut h2 = sents.clone();
            h2.rotate_left(k);
            let mut r2 = refs.clone();
            r2.rotate_left(k);
            let other: Vec<Vec<u32>> = sents.iter().map(|s| s.iter().map(|t| (t + 1) % 6).collect()).collect();
            let a = bleu_multi_reference(&other, &refs, 4).unwrap();
            let mut o2 = other.clone();
            o2.rotate_left(k);
            let b = bleu_multi_reference(&o2, &r2, 4).unwrap();
            proptest::prop_assert_eq!(a.score, b.score);
        }
    }
}
