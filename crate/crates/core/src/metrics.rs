//! Corpus-level automatic metrics over tokenized hypotheses and references.

use alloc::collections::{BTreeMap, BTreeSet};

use crate::math;
use crate::{Error, Result};

fn ngram_counts<T: Ord>(tokens: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut counts = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

fn check_pairs<H, R>(hypotheses: &[H], references: &[R]) -> Result<()> {
    if hypotheses.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Precondition(alloc::format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    Ok(())
}

/// Corpus BLEU-n: geometric mean of clipped k-gram precisions for
/// `k = 1..=n`, pooled over the corpus, times the brevity penalty
/// `min(1, exp(1 - ref_len / hyp_len))`. Unsmoothed: any zero precision
/// gives 0.
pub fn bleu_n<T: Ord, H: AsRef<[T]>, R: AsRef<[T]>>(hypotheses: &[H], references: &[R], n: usize) -> Result<f64> {
    check_pairs(hypotheses, references)?;
    if n == 0 {
        return Err(Error::Precondition("BLEU order must be at least 1".into()));
    }
    let mut log_precision = 0.0;
    for k in 1..=n {
        let (mut matched, mut total) = (0usize, 0usize);
        for (h, r) in hypotheses.iter().zip(references) {
            let hyp = ngram_counts(h.as_ref(), k);
            let reference = ngram_counts(r.as_ref(), k);
            for (gram, &c) in &hyp {
                matched += c.min(reference.get(gram).copied().unwrap_or(0));
                total += c;
            }
        }
        if matched == 0 || total == 0 {
            return Ok(0.0);
        }
        log_precision += math::ln(matched as f64 / total as f64) / n as f64;
    }
    let hyp_len: usize = hypotheses.iter().map(|h| h.as_ref().len()).sum();
    let ref_len: usize = references.iter().map(|r| r.as_ref().len()).sum();
    let bp = if hyp_len > ref_len { 1.0 } else { math::exp(1.0 - ref_len as f64 / hyp_len as f64) };
    Ok(bp * math::exp(log_precision))
}

/// Distinct-n: unique n-grams over total n-grams across all hypotheses.
pub fn distinct_n<T: Ord, H: AsRef<[T]>>(hypotheses: &[H], n: usize) -> Result<f64> {
    let mut unique: BTreeSet<&[T]> = BTreeSet::new();
    let mut total = 0usize;
    for h in hypotheses {
        let h = h.as_ref();
        if n > 0 && h.len() >= n {
            for gram in h.windows(n) {
                unique.insert(gram);
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Empty("n-grams"));
    }
    Ok(unique.len() as f64 / total as f64)
}

/// Micro-averaged unigram F1: multiset overlaps are pooled over the
/// corpus before precision and recall are formed.
pub fn unigram_f1<T: Ord, H: AsRef<[T]>, R: AsRef<[T]>>(hypotheses: &[H], references: &[R]) -> Result<f64> {
    check_pairs(hypotheses, references)?;
    let (mut overlap, mut hyp_total, mut ref_total) = (0usize, 0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let hyp = ngram_counts(h.as_ref(), 1);
        let reference = ngram_counts(r.as_ref(), 1);
        overlap += hyp.iter().map(|(w, &c)| c.min(reference.get(w).copied().unwrap_or(0))).sum::<usize>();
        hyp_total += h.as_ref().len();
        ref_total += r.as_ref().len();
    }
    if overlap == 0 {
        return Ok(0.0);
    }
    let precision = overlap as f64 / hyp_total as f64;
    let recall = overlap as f64 / ref_total as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}
