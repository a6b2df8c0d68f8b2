//! Greedy and length-normalized beam decoding over an abstract scorer.

use alloc::vec::Vec;
use core::cmp::Ordering;

/// Incremental next-token scorer. `State` carries whatever the scorer
/// needs to extend a prefix (for a transformer, its key/value caches).
pub trait StepScorer {
    type State: Clone;

    /// State after the start token and log-probabilities of the first
    /// response token.
    fn start(&self) -> (Self::State, Vec<f64>);

    /// State after appending `token` and log-probabilities of the next one.
    fn advance(&self, state: &Self::State, token: u32) -> (Self::State, Vec<f64>);
}

/// Length normalization exponent.
pub const LENGTH_PENALTY: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Response tokens, terminator excluded.
    pub tokens: Vec<u32>,
    /// Sum of log-probabilities of every scored token (terminator included).
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Number of scored positions.
    pub fn scored_len(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    /// `log_prob / scored_len ^ LENGTH_PENALTY`.
    pub fn score(&self) -> f64 {
        let len = self.scored_len().max(1) as f64;
        self.log_prob / libm::pow(len, LENGTH_PENALTY)
    }
}

fn argmax(log_probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &lp) in log_probs.iter().enumerate() {
        if lp > log_probs[best] {
            best = i;
        }
    }
    best
}

fn better(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score().partial_cmp(&a.score()).unwrap_or(Ordering::Equal).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Argmax token per step, ties to the lowest id, until `eos` or
/// `max_len` response tokens.
pub fn greedy<S: StepScorer>(scorer: &S, eos: u32, max_len: usize) -> Hypothesis {
    let mut hyp = Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false };
    if max_len == 0 {
        return hyp;
    }
    let (mut state, mut lp) = scorer.start();
    loop {
        let tok = argmax(&lp) as u32;
        hyp.log_prob += lp[tok as usize];
        if tok == eos {
            hyp.finished = true;
            return hyp;
        }
        hyp.tokens.push(tok);
        if hyp.tokens.len() == max_len {
            return hyp;
        }
        (state, lp) = scorer.advance(&state, tok);
    }
}

/// Beam search keeping `width` live prefixes ranked by cumulative
/// log-probability. A terminated candidate is kept when it ranks inside
/// the top `width` of its step; search ends once `width` hypotheses have
/// finished or prefixes reach `max_len`. The greedy hypothesis is always a
/// candidate, so the result never scores below greedy. Returns the best
/// length-normalized hypothesis; ties go to the lexicographically lowest
/// token sequence.
pub fn beam_search<S: StepScorer>(scorer: &S, eos: u32, max_len: usize, width: usize) -> Hypothesis {
    let width = width.max(1);
    let greedy_hyp = greedy(scorer, eos, max_len);
    if width == 1 || max_len == 0 {
        return greedy_hyp;
    }
    let mut finished = alloc::vec![greedy_hyp];
    let mut kept = 0usize;
    let (state, lp) = scorer.start();
    let mut beams = alloc::vec![(Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false }, state, lp)];

    while !beams.is_empty() && kept < width {
        let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(beams.len() * beams[0].2.len());
        for (b, (hyp, _, lp)) in beams.iter().enumerate() {
            for (t, &l) in lp.iter().enumerate() {
                cands.push((hyp.log_prob + l, b, t as u32));
            }
        }
        cands.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap_or(Ordering::Equal).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

        let mut next = Vec::with_capacity(width);
        for (rank, &(log_prob, b, t)) in cands.iter().enumerate() {
            if next.len() == width {
                break;
            }
            let parent = &beams[b];
            if t == eos {
                if rank < width {
                    finished.push(Hypothesis { tokens: parent.0.tokens.clone(), log_prob, finished: true });
                    kept += 1;
                }
                continue;
            }
            let mut tokens = parent.0.tokens.clone();
            tokens.push(t);
            next.push((Hypothesis { tokens, log_prob, finished: false }, b, t));
        }

        beams = next
            .into_iter()
            .filter_map(|(hyp, b, t)| {
                if hyp.tokens.len() == max_len {
                    finished.push(hyp);
                    None
                } else {
                    let (state, lp) = scorer.advance(&beams[b].1, t);
                    Some((hyp, state, lp))
                }
            })
            .collect();
    }
    finished.sort_by(better);
    finished.swap_remove(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    const EOS: u32 = 0;

    /// Scorer whose next-token distribution is a function of the prefix.
    struct Table<F: Fn(&[u32]) -> Vec<f64>>(F);

    impl<F: Fn(&[u32]) -> Vec<f64>> StepScorer for Table<F> {
        type State = Vec<u32>;
        fn start(&self) -> (Vec<u32>, Vec<f64>) {
            (Vec::new(), (self.0)(&[]))
        }
        fn advance(&self, state: &Vec<u32>, token: u32) -> (Vec<u32>, Vec<f64>) {
            let mut s = state.clone();
            s.push(token);
            let lp = (self.0)(&s);
            (s, lp)
        }
    }

    fn logs(p: &[f64]) -> Vec<f64> {
        p.iter().map(|x| x.ln()).collect()
    }

    /// Tokens: 0 = EOS, 1 = A, 2 = B.
    fn trap(prefix: &[u32]) -> Vec<f64> {
        match prefix {
            [] => logs(&[1e-9, 0.6, 0.4]),
            [1] => logs(&[0.3, 0.4, 0.3]),
            [2] => logs(&[0.05, 0.05, 0.9]),
            [2, 2] => logs(&[0.95, 0.025, 0.025]),
            _ => logs(&[0.9, 0.05, 0.05]),
        }
    }

    /// Best normalized score over every sequence of at most `max_len` tokens.
    fn brute_force<F: Fn(&[u32]) -> Vec<f64>>(f: &F, vocab: u32, max_len: usize) -> Hypothesis {
        let mut best: Option<Hypothesis> = None;
        let mut stack = vec![(Vec::<u32>::new(), 0.0f64)];
        while let Some((prefix, lp)) = stack.pop() {
            let next = f(&prefix);
            let mut consider = |h: Hypothesis| {
                if best.as_ref().map_or(true, |b| better(&h, b) == Ordering::Less) {
                    best = Some(h);
                }
            };
            consider(Hypothesis { tokens: prefix.clone(), log_prob: lp + next[EOS as usize], finished: true });
            for t in 1..vocab {
                let mut p = prefix.clone();
                p.push(t);
                let l = lp + next[t as usize];
                if p.len() == max_len {
                    consider(Hypothesis { tokens: p, log_prob: l, finished: false });
                } else {
                    stack.push((p, l));
                }
            }
        }
        best.unwrap()
    }

    #[test]
    fn beam_escapes_greedy_trap() {
        let scorer = Table(trap);
        let g = greedy(&scorer, EOS, 3);
        let b = beam_search(&scorer, EOS, 3, 2);
        let oracle = brute_force(&trap, 3, 3);
        assert_eq!(g.tokens, vec![1, 1]);
        assert_eq!(b.tokens, vec![2, 2]);
        assert_eq!(b, oracle);
        assert!((g.log_prob - (0.6f64 * 0.4 * 0.9).ln()).abs() < 1e-12);
        assert!((b.log_prob - (0.4f64 * 0.9 * 0.95).ln()).abs() < 1e-12);
        assert!(b.score() > g.score());
    }

    #[test]
    fn width_one_is_greedy() {
        let scorer = Table(trap);
        assert_eq!(beam_search(&scorer, EOS, 3, 1), greedy(&scorer, EOS, 3));
    }

    #[test]
    fn immediate_eos_gives_empty_body() {
        let scorer = Table(|_: &[u32]| logs(&[1.0 - 2e-9, 1e-9, 1e-9]));
        let g = greedy(&scorer, EOS, 5);
        assert!(g.tokens.is_empty() && g.finished);
        assert!(beam_search(&scorer, EOS, 5, 3).tokens.is_empty());
    }

    #[test]
    fn max_len_truncates() {
        let scorer = Table(|_: &[u32]| logs(&[0.1, 0.9]));
        let g = greedy(&scorer, EOS, 4);
        assert_eq!(g.tokens, vec![1; 4]);
        assert!(!g.finished);
    }

    fn table_from(seed: &[f64], vocab: usize) -> impl Fn(&[u32]) -> Vec<f64> + '_ {
        move |prefix: &[u32]| {
            let mut h: usize = 17;
            for &t in prefix {
                h = h.wrapping_mul(31).wrapping_add(t as usize + 1);
            }
            let raw: Vec<f64> = (0..vocab).map(|i| seed[(h + i * 7) % seed.len()] + 1e-3).collect();
            let z: f64 = raw.iter().sum();
            raw.iter().map(|x| (x / z).ln()).collect()
        }
    }

    proptest! {
        #[test]
        fn beam_never_below_greedy(seed in prop::collection::vec(0.0f64..1.0, 13), width in 1usize..5) {
            let f = table_from(&seed, 4);
            let scorer = Table(&f);
            let g = greedy(&scorer, EOS, 4);
            let b = beam_search(&scorer, EOS, 4, width);
            prop_assert!(b.score() >= g.score());
            let oracle = brute_force(&f, 4, 4);
            prop_assert!(oracle.score() >= b.score() - 1e-12);
        }
    }
}
