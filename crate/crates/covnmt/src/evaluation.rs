//! Alignment extraction and F1, repeated-phrase counting, corpus BLEU and
//! token accuracy.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

/// Alignment links as (source index, target index), 0-based.
pub type LinkSet = BTreeSet<(usize, usize)>;

/// For each target step take the argmax source position (ties to the lowest
/// index) and keep the link only if its probability strictly exceeds the
/// threshold. The working threshold is 0.2.
pub fn extract_alignment(attention: &[Vec<f64>], threshold: f64) -> LinkSet {
    let mut links = LinkSet::new();
    for (t, row) in attention.iter().enumerate() {
        if row.is_empty() {
            continue;
        }
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-3 {
            eprintln!("warning: attention row {t} sums to {total:.6}, processing anyway");
        }
        let mut best = 0;
        for (j, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = j;
            }
        }
        if row[best] > threshold {
            links.insert((best, t));
        }
    }
    links
}

/// Precision/recall/F1 of predicted links against gold. An empty prediction
/// scores precision 1 against an empty gold set and 0 otherwise; recall uses
/// the symmetric convention. F1 is 0 when P + R = 0.
pub fn alignment_f1(predicted: &LinkSet, gold: &LinkSet) -> (f64, f64, f64) {
    let inter = predicted.intersection(gold).count() as f64;
    let p = if predicted.is_empty() {
        if gold.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        inter / predicted.len() as f64
    };
    let r = if gold.is_empty() {
        if predicted.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        inter / gold.len() as f64
    };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Number of positions whose `min_len`-gram already occurred at an earlier
/// start in the same sentence; each repeated occurrence counts once.
pub fn repetition_count<T: Eq + std::hash::Hash>(tokens: &[T], min_len: usize) -> usize {
    assert!(min_len >= 1, "repetition n-gram length must be at least 1");
    if tokens.len() < min_len {
        return 0;
    }
    let mut seen: HashMap<&[T], usize> = HashMap::new();
    let mut count = 0;
    for start in 0..=tokens.len() - min_len {
        let gram = &tokens[start..start + min_len];
        if seen.contains_key(gram) {
            count += 1;
        } else {
            seen.insert(gram, start);
        }
    }
    count
}

/// Corpus-level BLEU-4: geometric mean of clipped 1..4-gram precisions with
/// a brevity penalty, no smoothing, single reference per candidate.
pub fn bleu4(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::data(format!(
            "bleu: {} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::EmptyInput("bleu corpus"));
    }
    let max_n = 4;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, reference) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += reference.len();
        for n in 1..=max_n {
            if cand.len() < n {
                continue;
            }
            let mut ref_counts: HashMap<&[String], usize> = HashMap::new();
            if reference.len() >= n {
                for gram in reference.windows(n) {
                    *ref_counts.entry(gram).or_insert(0) += 1;
                }
            }
            let mut cand_counts: HashMap<&[String], usize> = HashMap::new();
            for gram in cand.windows(n) {
                *cand_counts.entry(gram).or_insert(0) += 1;
            }
            total[n - 1] += cand.len() - n + 1;
            for (gram, c) in cand_counts {
                let r = ref_counts.get(gram).copied().unwrap_or(0);
                matched[n - 1] += c.min(r);
            }
        }
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        if total[n] == 0 || matched[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
    }
    let gm = (log_sum / max_n as f64).exp();
    let bp = if cand_len >= ref_len {
        1.0
    } else if cand_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * gm)
}

/// Position-wise token accuracy of hypothesis lines against reference lines:
/// matches at aligned positions over the total reference token count.
pub fn token_accuracy(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::data(format!(
            "accuracy: {} hypothesis lines vs {} reference lines",
            hyps.len(),
            refs.len()
        )));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for (h, r) in hyps.iter().zip(refs) {
        total += r.len();
        correct += h.iter().zip(r).filter(|(a, b)| a == b).count();
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(correct as f64 / total as f64)
}

/// Parse one Pharaoh line of space-separated `i-j` pairs.
pub fn parse_pharaoh_line(line: &str, line_no: usize) -> Result<Vec<(usize, usize)>> {
    let mut links = Vec::new();
    for tok in line.split_whitespace() {
        let (i, j) = tok.split_once('-').ok_or_else(|| {
            Error::data(format!("alignment line {line_no}: malformed pair {tok:?}"))
        })?;
        let i = i.parse::<usize>().map_err(|_| {
            Error::data(format!("alignment line {line_no}: bad source index {i:?}"))
        })?;
        let j = j.parse::<usize>().map_err(|_| {
            Error::data(format!("alignment line {line_no}: bad target index {j:?}"))
        })?;
        links.push((i, j));
    }
    Ok(links)
}

/// Render links as a Pharaoh line, sorted.
pub fn format_pharaoh_line(links: &LinkSet) -> String {
    links
        .iter()
        .map(|(i, j)| format!("{i}-{j}"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn links(pairs: &[(usize, usize)]) -> LinkSet {
        pairs.iter().copied().collect()
    }

    #[test]
    fn below_threshold_rows_yield_no_link() {
        let att = vec![vec![0.19, 0.18, 0.17, 0.16, 0.15, 0.15]];
        assert!(extract_alignment(&att, 0.2).is_empty());
    }

    #[test]
    fn one_hot_row_yields_a_certain_link() {
        let att = vec![vec![0.0, 0.0, 1.0]];
        assert_eq!(extract_alignment(&att, 0.2), links(&[(2, 0)]));
    }

    #[test]
    fn ties_resolve_to_the_lowest_source_index() {
        let att = vec![vec![0.5, 0.5], vec![0.1, 0.9]];
        assert_eq!(extract_alignment(&att, 0.2), links(&[(0, 0), (1, 1)]));
    }

    #[test]
    fn threshold_comparison_is_strict() {
        let att = vec![vec![0.2, 0.2, 0.2, 0.2, 0.2]];
        assert!(extract_alignment(&att, 0.2).is_empty());
        let att = vec![vec![0.2000001, 0.1999999, 0.2, 0.2, 0.2]];
        assert_eq!(extract_alignment(&att, 0.2), links(&[(0, 0)]));
    }

    #[test]
    fn each_target_step_contributes_at_most_one_link() {
        let att = vec![vec![0.6, 0.4], vec![0.3, 0.7], vec![0.5, 0.5]];
        let got = extract_alignment(&att, 0.2);
        assert!(got.len() <= att.len());
        assert_eq!(got, links(&[(0, 0), (1, 1), (0, 2)]));
    }

    #[test]
    fn f1_perfect_match() {
        let a = links(&[(1, 1), (2, 2)]);
        assert_eq!(alignment_f1(&a, &a), (1.0, 1.0, 1.0));
    }

    #[test]
    fn f1_half_overlap() {
        let pred = links(&[(1, 1), (2, 2)]);
        let gold = links(&[(1, 1), (2, 3)]);
        assert_eq!(alignment_f1(&pred, &gold), (0.5, 0.5, 0.5));
    }

    #[test]
    fn f1_empty_conventions() {
        let empty = LinkSet::new();
        let some = links(&[(0, 0)]);
        assert_eq!(alignment_f1(&empty, &some), (0.0, 0.0, 0.0));
        assert_eq!(alignment_f1(&empty, &empty), (1.0, 1.0, 1.0));
        let (p, r, f) = alignment_f1(&some, &empty);
        assert_eq!((p, r, f), (0.0, 0.0, 0.0));
    }

    #[test]
    fn f1_is_symmetric() {
        let a = links(&[(0, 0), (1, 2), (3, 1)]);
        let b = links(&[(0, 0), (2, 2)]);
        let fa = alignment_f1(&a, &b).2;
        let fb = alignment_f1(&b, &a).2;
        assert!((fa - fb).abs() < 1e-15);
    }

    #[test]
    fn repetition_simple_cases() {
        let toks = |s: &str| s.split_whitespace().map(|t| t.to_string()).collect::<Vec<_>>();
        assert_eq!(repetition_count(&toks("a b c d e"), 4), 0);
        assert_eq!(repetition_count(&toks("a b c d a b c d"), 4), 1);
        assert_eq!(repetition_count(&toks("a a a a a a a a"), 4), 4);
        assert_eq!(repetition_count(&toks("a b"), 4), 0);
    }

    #[test]
    fn repetition_is_invariant_under_renaming() {
        let a: Vec<u32> = vec![0, 1, 0, 1, 0, 1, 0, 1];
        let b: Vec<u32> = vec![7, 9, 7, 9, 7, 9, 7, 9];
        assert_eq!(repetition_count(&a, 4), repetition_count(&b, 4));
    }

    fn brute_force_repetitions<T: Eq>(tokens: &[T], n: usize) -> usize {
        if tokens.len() < n {
            return 0;
        }
        let mut count = 0;
        for p in 0..=tokens.len() - n {
            for q in 0..p {
                if tokens[p..p + n] == tokens[q..q + n] {
                    count += 1;
                    break;
                }
            }
        }
        count
    }

    #[test]
    fn repetition_matches_brute_force_on_random_sequences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let len = rng.gen_range(0..=20);
            let seq: Vec<u8> = (0..len).map(|_| rng.gen_range(0..3)).collect();
            assert_eq!(
                repetition_count(&seq, 4),
                brute_force_repetitions(&seq, 4),
                "seq {seq:?}"
            );
        }
    }

    fn sent(s: &str) -> Vec<String> {
        s.split_whitespace().map(|t| t.to_string()).collect()
    }

    #[test]
    fn bleu_of_corpus_against_itself_is_exactly_one() {
        let corpus = vec![sent("the cat sat"), sent("a b c d e f")];
        assert_eq!(bleu4(&corpus, &corpus).unwrap(), 1.0);
    }

    #[test]
    fn bleu_without_any_four_gram_match_is_zero() {
        let cand = vec![sent("a b c d")];
        let refs = vec![sent("a b c e")];
        assert_eq!(bleu4(&cand, &refs).unwrap(), 0.0);
    }

    #[test]
    fn bleu_single_pair_hand_computation() {
        // Candidate is the reference minus its last word: all clipped
        // precisions are 1, so BLEU is the brevity penalty exp(1 - 6/5).
        let cand = vec![sent("the cat sat on the")];
        let refs = vec![sent("the cat sat on the mat")];
        let expect = (1.0f64 - 6.0 / 5.0).exp();
        let got = bleu4(&cand, &refs).unwrap();
        assert!((got - expect).abs() < 1e-12, "got {got} expect {expect}");
    }

    #[test]
    fn bleu_empty_corpus_is_an_error() {
        assert!(bleu4(&[], &[]).is_err());
    }

    #[test]
    fn pharaoh_round_trip() {
        let parsed = parse_pharaoh_line("0-0 2-1 1-3", 1).unwrap();
        assert_eq!(parsed, vec![(0, 0), (2, 1), (1, 3)]);
        let set: LinkSet = parsed.into_iter().collect();
        assert_eq!(format_pharaoh_line(&set), "0-0 1-3 2-1");
        assert!(parse_pharaoh_line("nonsense", 4).is_err());
    }

    #[test]
    fn token_accuracy_counts_positionwise_matches() {
        let hyps = vec![sent("a b c"), sent("x y")];
        let refs = vec![sent("a z c"), sent("x y")];
        let acc = token_accuracy(&hyps, &refs).unwrap();
        assert!((acc - 4.0 / 5.0).abs() < 1e-15);
    }
}
