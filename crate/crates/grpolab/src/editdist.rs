//! Unit-cost Levenshtein distance and error-rate aggregation over token ids.
//!
//! Two aggregation rules coexist deliberately:
//! per-utterance `cer = distance / reference_length` feeds rewards, while the
//! corpus-level figure divides total distance by total reference length so
//! short utterances do not dominate evaluation.

use crate::error::{Error, Result};
use crate::seqcore::{require_same_vocab, TokenId, TokenSequence};

/// Distance plus the pieces needed to re-aggregate it later.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EditDistanceResult {
    pub distance: usize,
    pub ref_len: usize,
    /// `distance / ref_len`; construction requires a non-empty reference.
    pub cer: f64,
}

/// Minimum number of single-token insertions, deletions, and substitutions
/// turning `reference` into `hypothesis`.
pub fn edit_distance(reference: &TokenSequence, hypothesis: &TokenSequence) -> Result<usize> {
    require_same_vocab("edit_distance", reference.vocab(), hypothesis.vocab())?;
    Ok(levenshtein(reference.tokens(), hypothesis.tokens()))
}

/// Distance, reference length, and per-utterance error rate in one shot.
pub fn measure(reference: &TokenSequence, hypothesis: &TokenSequence) -> Result<EditDistanceResult> {
    if reference.is_empty() {
        return Err(Error::UndefinedMetric(
            "utterance error rate needs a non-empty reference".into(),
        ));
    }
    let distance = edit_distance(reference, hypothesis)?;
    let ref_len = reference.len();
    Ok(EditDistanceResult {
        distance,
        ref_len,
        cer: distance as f64 / ref_len as f64,
    })
}

/// Per-utterance error rate: `distance / |reference|`. Exceeds 1.0 when the
/// hypothesis is much longer than the reference; never clamped.
pub fn utterance_cer(reference: &TokenSequence, hypothesis: &TokenSequence) -> Result<f64> {
    Ok(measure(reference, hypothesis)?.cer)
}

/// Corpus-level error rate: total distance over total reference length,
/// not the mean of per-utterance rates.
pub fn corpus_cer(pairs: &[(TokenSequence, TokenSequence)]) -> Result<f64> {
    corpus_cer_from_counts(
        pairs
            .iter()
            .map(|(r, h)| measure(r, h).map(|m| (m.distance, m.ref_len))),
    )
}

/// Same aggregation from already-measured `(distance, ref_len)` pairs.
pub fn corpus_cer_from_counts<I>(counts: I) -> Result<f64>
where
    I: IntoIterator<Item = Result<(usize, usize)>>,
{
    let mut total_distance = 0usize;
    let mut total_len = 0usize;
    let mut any = false;
    for item in counts {
        let (d, l) = item?;
        if l == 0 {
            return Err(Error::UndefinedMetric(
                "corpus error rate needs non-empty references".into(),
            ));
        }
        total_distance += d;
        total_len += l;
        any = true;
    }
    if !any {
        return Err(Error::UndefinedMetric(
            "corpus error rate over an empty pair list".into(),
        ));
    }
    Ok(total_distance as f64 / total_len as f64)
}

/// Two-row DP over the shorter side: O(min(m, n)) memory.
pub(crate) fn levenshtein(a: &[TokenId], b: &[TokenId]) -> usize {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return long.len();
    }
    let mut prev: Vec<usize> = (0..=short.len()).collect();
    let mut cur = vec![0usize; short.len() + 1];
    for (i, &lt) in long.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &st) in short.iter().enumerate() {
            let sub = prev[j] + usize::from(lt != st);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[short.len()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqcore::Vocabulary;
    use proptest::prelude::*;

    /// Textbook recursive definition, deliberately not sharing code with the
    /// DP above. Exponential; test-only, short inputs.
    fn recursive_oracle(a: &[TokenId], b: &[TokenId]) -> usize {
        match (a.split_last(), b.split_last()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((&ta, ra)), Some((&tb, rb))) => {
                if ta == tb {
                    recursive_oracle(ra, rb)
                } else {
                    1 + recursive_oracle(ra, b)
                        .min(recursive_oracle(a, rb))
                        .min(recursive_oracle(ra, rb))
                }
            }
        }
    }

    fn seq(vocab: &Vocabulary, ids: &[TokenId]) -> TokenSequence {
        TokenSequence::new(vocab, ids.to_vec()).unwrap()
    }

    #[test]
    fn classic_word_pair() {
        // kitten -> sitting over a small letter alphabet:
        // e=0 g=1 i=2 k=3 n=4 s=5 t=6
        let v = Vocabulary::new("letters", 8, 1).unwrap();
        let kitten = seq(&v, &[3, 2, 6, 6, 0, 4]);
        let sitting = seq(&v, &[5, 2, 6, 6, 2, 4, 1]);
        assert_eq!(recursive_oracle(kitten.tokens(), sitting.tokens()), 3);
        assert_eq!(edit_distance(&kitten, &sitting).unwrap(), 3);
    }

    #[test]
    fn trivial_cases() {
        let v = Vocabulary::text(5).unwrap();
        let x = seq(&v, &[1, 2, 3]);
        let empty = TokenSequence::empty(&v);
        assert_eq!(edit_distance(&x, &x).unwrap(), 0);
        assert_eq!(edit_distance(&x, &empty).unwrap(), 3);
        assert_eq!(edit_distance(&empty, &x).unwrap(), 3);
        assert_eq!(edit_distance(&empty, &empty).unwrap(), 0);
    }

    #[test]
    fn vocabulary_mismatch_is_a_usage_error() {
        let v1 = Vocabulary::text(5).unwrap();
        let v2 = Vocabulary::speech(5).unwrap();
        let err = edit_distance(&seq(&v1, &[1]), &seq(&v2, &[1])).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn cer_of_empty_reference_is_undefined() {
        let v = Vocabulary::text(5).unwrap();
        let err = utterance_cer(&TokenSequence::empty(&v), &seq(&v, &[1])).unwrap_err();
        assert!(matches!(err, Error::UndefinedMetric(_)));
    }

    #[test]
    fn cer_exceeds_one_for_long_hypotheses_and_is_not_clamped() {
        let v = Vocabulary::text(5).unwrap();
        let r = seq(&v, &[1]);
        let h = seq(&v, &[2, 2, 2]);
        assert_eq!(utterance_cer(&r, &h).unwrap(), 3.0);
    }

    #[test]
    fn corpus_rate_divides_totals_not_means() {
        let v = Vocabulary::text(5).unwrap();
        // distances 0 and 3, reference lengths 10 and 30:
        // corpus rate 3/40 = 0.075; the mean of rates would be 0.05.
        let r1 = seq(&v, &[1, 2, 3, 1, 2, 3, 1, 2, 3, 1]);
        let h1 = r1.clone();
        let r2: Vec<TokenId> = (0..30).map(|i| (i % 3) as TokenId).collect();
        let mut h2 = r2.clone();
        h2[0] = 3;
        h2[1] = 3;
        h2[2] = 3;
        let pairs = vec![(r1, h1), (seq(&v, &r2), seq(&v, &h2))];
        let got = corpus_cer(&pairs).unwrap();
        assert!((got - 0.075).abs() < 1e-15);
        let mean_of_rates: f64 =
            pairs.iter().map(|(r, h)| utterance_cer(r, h).unwrap()).sum::<f64>() / 2.0;
        assert!((mean_of_rates - 0.05).abs() < 1e-15);
    }

    #[test]
    fn corpus_rate_of_single_pair_matches_utterance_rate() {
        let v = Vocabulary::text(5).unwrap();
        let r = seq(&v, &[1, 2, 3, 0]);
        let h = seq(&v, &[1, 3, 3]);
        let pairs = vec![(r.clone(), h.clone())];
        assert_eq!(corpus_cer(&pairs).unwrap(), utterance_cer(&r, &h).unwrap());
    }

    #[test]
    fn corpus_rate_of_empty_list_is_undefined() {
        assert!(matches!(
            corpus_cer(&[]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    /// Exhaustive DP-vs-oracle agreement on short pairs; the acceptance suite
    /// extends this to all pairs of length <= 6.
    #[test]
    fn dp_matches_recursive_oracle_exhaustively_short() {
        let mut all: Vec<Vec<TokenId>> = vec![vec![]];
        for len in 1..=4usize {
            let count = 3usize.pow(len as u32);
            for mut code in 0..count {
                let mut s = Vec::with_capacity(len);
                for _ in 0..len {
                    s.push((code % 3) as TokenId);
                    code /= 3;
                }
                all.push(s);
            }
        }
        for a in &all {
            for b in &all {
                assert_eq!(
                    levenshtein(a, b),
                    recursive_oracle(a, b),
                    "mismatch on {a:?} vs {b:?}"
                );
            }
        }
    }

    fn arb_tokens() -> impl Strategy<Value = Vec<TokenId>> {
        proptest::collection::vec(0u32..6, 0..12)
    }

    proptest! {
        #[test]
        fn symmetry(a in arb_tokens(), b in arb_tokens()) {
            prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        }

        #[test]
        fn triangle_inequality(a in arb_tokens(), b in arb_tokens(), c in arb_tokens()) {
            prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        }

        #[test]
        fn identity_and_length_bounds(a in arb_tokens(), b in arb_tokens()) {
            prop_assert_eq!(levenshtein(&a, &a), 0);
            let d = levenshtein(&a, &b);
            prop_assert!(d <= a.len().max(b.len()));
            prop_assert!(d >= a.len().abs_diff(b.len()));
        }
    }
}
