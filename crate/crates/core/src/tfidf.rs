//! TF-IDF scoring of a knowledge pool against a query.
//!
//! The pool itself is the document collection: `tf` is the raw count,
//! `idf(t) = ln((1 + r) / (1 + df(t))) + 1`, vectors are L2-normalized and
//! scored by cosine similarity.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::math;

pub struct TfIdfIndex<'a, T: Ord> {
    idf: BTreeMap<&'a T, f64>,
    unseen_idf: f64,
    docs: Vec<BTreeMap<&'a T, f64>>,
}

fn counts<'a, T: Ord>(tokens: &'a [T]) -> BTreeMap<&'a T, f64> {
    let mut tf = BTreeMap::new();
    for t in tokens {
        *tf.entry(t).or_insert(0.0) += 1.0;
    }
    tf
}

fn normalize<T: Ord>(v: &mut BTreeMap<&T, f64>) {
    let norm = math::sqrt(v.values().map(|w| w * w).sum::<f64>());
    if norm > 0.0 {
        for w in v.values_mut() {
            *w /= norm;
        }
    }
}

impl<'a, T: Ord> TfIdfIndex<'a, T> {
    pub fn new<D: AsRef<[T]>>(pool: &'a [D]) -> Self {
        let r = pool.len() as f64;
        let mut df: BTreeMap<&'a T, usize> = BTreeMap::new();
        let raw: Vec<BTreeMap<&'a T, f64>> = pool.iter().map(|d| counts(d.as_ref())).collect();
        for doc in &raw {
            for t in doc.keys() {
                *df.entry(*t).or_insert(0) += 1;
            }
        }
        let idf: BTreeMap<&'a T, f64> =
            df.into_iter().map(|(t, n)| (t, math::ln((1.0 + r) / (1.0 + n as f64)) + 1.0)).collect();
        let docs = raw
            .into_iter()
            .map(|mut doc| {
                for (t, w) in doc.iter_mut() {
                    *w *= idf[t];
                }
                normalize(&mut doc);
                doc
            })
            .collect();
        TfIdfIndex { idf, unseen_idf: math::ln(1.0 + r) + 1.0, docs }
    }

    /// Cosine score of every pool document against `query`.
    pub fn scores(&self, query: &[T]) -> Vec<f64> {
        let mut q = counts(query);
        for (t, w) in q.iter_mut() {
            *w *= self.idf.get(t).copied().unwrap_or(self.unseen_idf);
        }
        normalize(&mut q);
        self.docs.iter().map(|doc| q.iter().filter_map(|(t, w)| doc.get(t).map(|d| d * w)).sum()).collect()
    }

    /// Pool positions by descending score, ties to the lowest position.
    pub fn rank(&self, query: &[T]) -> Vec<usize> {
        let scores = self.scores(query);
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b)));
        order
    }
}

/// Weak supervision target: the pool position most TF-IDF-similar to the
/// gold response. All-zero scores fall back to position 0.
pub fn weak_label<T: Ord, D: AsRef<[T]>>(response: &[T], pool: &[D]) -> usize {
    let scores = TfIdfIndex::new(pool).scores(response);
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn only_sharing_document_wins() {
        let pool = vec![toks("a b"), toks("c d")];
        assert_eq!(weak_label(&toks("c d x"), &pool), 1);
    }

    #[test]
    fn hand_computed_scores() {
        // r = 2, every pool term has df = 1: idf = ln(3/2) + 1; "x" unseen: ln 3 + 1.
        let pool = vec![toks("a b"), toks("c d")];
        let s = TfIdfIndex::new(&pool).scores(&toks("c d x"));
        let seen = (1.5f64).ln() + 1.0;
        let unseen = 3f64.ln() + 1.0;
        let q_norm = (2.0 * seen * seen + unseen * unseen).sqrt();
        let expected = 2.0 * seen / q_norm / 2f64.sqrt();
        assert_eq!(s[0], 0.0);
        assert!((s[1] - expected).abs() < 1e-12);
    }

    #[test]
    fn identical_documents_tie_to_first() {
        let pool = vec![toks("a b c"), toks("a b c"), toks("a b c")];
        assert_eq!(weak_label(&toks("b c"), &pool), 0);
    }

    #[test]
    fn no_shared_terms_falls_back_to_first() {
        let pool = vec![toks("a b"), toks("c d")];
        assert_eq!(weak_label(&toks("y z"), &pool), 0);
        assert_eq!(weak_label(&Vec::<&str>::new(), &pool), 0);
    }

    #[test]
    fn rank_orders_by_score() {
        let pool = vec![toks("x y"), toks("a b"), toks("a a b")];
        assert_eq!(TfIdfIndex::new(&pool).rank(&toks("a")), vec![2, 1, 0]);
    }
}
