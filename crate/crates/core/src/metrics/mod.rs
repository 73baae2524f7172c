//! Corpus-level BLEU-4, ROUGE-N and ROUGE-L over tokenized sentences, and
//! mean ± std aggregation across training seeds.
//!
//! Everything is micro-averaged: counts are summed over the whole corpus
//! before any ratio is taken, so permuting the sentence pairs never changes
//! a score.

mod report;

pub use report::{aggregate_seeds, format_percent, EvalReport, MetricSummary};

use std::collections::HashMap;
use std::hash::Hash;

use thiserror::Error;

/// Recall weight of the ROUGE-L F-measure.
pub const ROUGE_L_BETA: f64 = 1.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("{hypotheses} hypotheses but {references} references")]
    LengthMismatch { hypotheses: usize, references: usize },
    #[error("{0} is undefined on this corpus")]
    Undefined(String),
    #[error("seed reports disagree on metric names: {0}")]
    Schema(String),
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

fn check_corpus<T>(hyps: &[Vec<T>], refs: &[Vec<T>], metric: &str) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(MetricError::LengthMismatch {
            hypotheses: hyps.len(),
            references: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(MetricError::Undefined(format!("{metric} (empty corpus)")));
    }
    Ok(())
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Hypothesis n-grams matched against the reference, each clipped to its
/// reference count. Returns `(matched, hypothesis total, reference total)`.
fn clipped_overlap<T: Hash + Eq>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, hyp.len().saturating_sub(n - 1), reference.len().saturating_sub(n - 1))
}

/// Corpus BLEU with uniform weights over 1..=4-grams and the corpus-level
/// brevity penalty. Unsmoothed: any zero precision gives 0.
pub fn bleu4<T: Hash + Eq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    bleu(hyps, refs, 4)
}

pub fn bleu<T: Hash + Eq>(hyps: &[Vec<T>], refs: &[Vec<T>], max_n: usize) -> Result<f64> {
    check_corpus(hyps, refs, "BLEU")?;
    let mut log_precision = 0.0;
    for n in 1..=max_n {
        let (mut matched, mut total) = (0, 0);
        for (h, r) in hyps.iter().zip(refs) {
            let (m, t, _) = clipped_overlap(h, r, n);
            matched += m;
            total += t;
        }
        if matched == 0 {
            return Ok(0.0);
        }
        log_precision += (matched as f64 / total as f64).ln() / max_n as f64;
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let brevity = if c > r { 0.0 } else { 1.0 - r as f64 / c as f64 };
    Ok((brevity + log_precision).exp())
}

/// `(matched, hypothesis n-grams, reference n-grams)` summed over the corpus.
fn rouge_counts<T: Hash + Eq>(hyps: &[Vec<T>], refs: &[Vec<T>], n: usize) -> Result<(usize, usize, usize)> {
    check_corpus(hyps, refs, "ROUGE-N")?;
    if n == 0 || refs.iter().all(|r| r.len() < n) {
        return Err(MetricError::Undefined(format!("ROUGE-{n} (every reference is shorter than {n})")));
    }
    Ok(hyps.iter().zip(refs).fold((0, 0, 0), |acc, (h, r)| {
        let (m, th, tr) = clipped_overlap(h, r, n);
        (acc.0 + m, acc.1 + th, acc.2 + tr)
    }))
}

/// Corpus ROUGE-N F1.
pub fn rouge_n<T: Hash + Eq>(hyps: &[Vec<T>], refs: &[Vec<T>], n: usize) -> Result<f64> {
    let (m, th, tr) = rouge_counts(hyps, refs, n)?;
    let p = if th == 0 { 0.0 } else { m as f64 / th as f64 };
    let r = m as f64 / tr as f64;
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

/// Corpus ROUGE-N recall, as reported by older scoring scripts.
pub fn rouge_n_recall<T: Hash + Eq>(hyps: &[Vec<T>], refs: &[Vec<T>], n: usize) -> Result<f64> {
    let (m, _, tr) = rouge_counts(hyps, refs, n)?;
    Ok(m as f64 / tr as f64)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure with LCS lengths summed over the corpus and
/// β = [`ROUGE_L_BETA`].
pub fn rouge_l<T: PartialEq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    check_corpus(hyps, refs, "ROUGE-L")?;
    let lcs: usize = hyps.iter().zip(refs).map(|(h, r)| lcs_len(h, r)).sum();
    let th: usize = hyps.iter().map(Vec::len).sum();
    let tr: usize = refs.iter().map(Vec::len).sum();
    if lcs == 0 {
        return Ok(0.0);
    }
    let p = lcs as f64 / th as f64;
    let r = lcs as f64 / tr as f64;
    let b2 = ROUGE_L_BETA * ROUGE_L_BETA;
    Ok((1.0 + b2) * p * r / (r + b2 * p))
}

/// The three reported scores, keyed `bleu4`, `rouge4`, `rougeL`.
pub fn score_corpus<T: Hash + Eq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<std::collections::BTreeMap<String, f64>> {
    Ok([
        ("bleu4".to_string(), bleu4(hyps, refs)?),
        ("rouge4".to_string(), rouge_n(hyps, refs, 4)?),
        ("rougeL".to_string(), rouge_l(hyps, refs)?),
    ]
    .into_iter()
    .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn perfect_and_disjoint() {
        let c = vec![toks("a b c d e"), toks("f g h i")];
        assert_eq!(bleu4(&c, &c).unwrap(), 1.0);
        assert_eq!(rouge_n(&c, &c, 4).unwrap(), 1.0);
        assert_eq!(rouge_l(&c, &c).unwrap(), 1.0);
        let d = vec![toks("v w x y z"), toks("p q r s")];
        assert_eq!(bleu4(&d, &c).unwrap(), 0.0);
        assert_eq!(rouge_n(&d, &c, 4).unwrap(), 0.0);
    }

    #[test]
    fn cat_on_the_mat() {
        // unigrams 5/6, bigrams 3/5, trigrams 1/4, 4-grams 0/3
        let h = vec![toks("the cat sat on the mat")];
        let r = vec![toks("the cat is on the mat")];
        assert_eq!(bleu4(&h, &r).unwrap(), 0.0);
        let b3 = bleu(&h, &r, 3).unwrap();
        assert!((b3 - (5.0f64 / 6.0 * 3.0 / 5.0 * 1.0 / 4.0).cbrt()).abs() < 1e-15);
    }

    #[test]
    fn brevity_penalty_is_corpus_level() {
        let h = vec![toks("a b c d")];
        let r = vec![toks("a b c d e f g h")];
        assert!((bleu4(&h, &r).unwrap() - (1.0f64 - 2.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn reversal_has_unit_lcs() {
        assert_eq!(lcs_len(&toks("a b c d"), &toks("d c b a")), 1);
        assert_eq!(lcs_len(&toks("a b c b d a b"), &toks("b d c a b a")), 4);
    }

    #[test]
    fn short_references_make_rouge4_undefined() {
        let c = vec![toks("a b c")];
        assert!(matches!(rouge_n(&c, &c, 4), Err(MetricError::Undefined(_))));
        assert!(matches!(bleu4::<&str>(&[], &[]), Err(MetricError::Undefined(_))));
        assert!(matches!(rouge_l(&c, &[]), Err(MetricError::LengthMismatch { .. })));
    }

    #[test]
    fn empty_hypothesis_scores_zero_lcs() {
        let h = vec![vec![], toks("a b")];
        let r = vec![toks("x y"), toks("a b")];
        let p = 2.0 / 2.0;
        let rec = 2.0 / 4.0;
        let b2 = ROUGE_L_BETA * ROUGE_L_BETA;
        let f = (1.0 + b2) * p * rec / (rec + b2 * p);
        assert!((rouge_l(&h, &r).unwrap() - f).abs() < 1e-15);
    }
}
