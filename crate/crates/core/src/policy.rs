//! Value-level selection policy: bilinear scores, masking, STOP, and the
//! two ways of picking an action from the resulting distribution.
//!
//! Slots `0..r` are pool documents; slot `r` is STOP.

use alloc::vec::Vec;
use rand::{Rng, RngCore};

use crate::math;
use crate::{Error, Result};

/// Additive logit penalty applied to masked slots.
pub const MASK_FILL: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    /// 0-based pool position.
    Select(usize),
    Stop,
}

impl Action {
    pub fn slot(self, pool_size: usize) -> usize {
        match self {
            Action::Select(i) => i,
            Action::Stop => pool_size,
        }
    }

    pub fn from_slot(slot: usize, pool_size: usize) -> Action {
        if slot == pool_size {
            Action::Stop
        } else {
            Action::Select(slot)
        }
    }
}

/// Selectable slots: unselected documents, plus STOP when allowed.
pub fn action_mask(pool_size: usize, selected: &[usize], allow_stop: bool) -> Vec<bool> {
    let mut mask = alloc::vec![true; pool_size + 1];
    for &a in selected {
        if a < pool_size {
            mask[a] = false;
        }
    }
    mask[pool_size] = allow_stop;
    mask
}

/// Probability vector over `r` documents plus STOP.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDistribution {
    probs: Vec<f64>,
    mask: Vec<bool>,
}

impl PolicyDistribution {
    /// Masked softmax of `logits` (length `r + 1`). Masked slots receive
    /// [`MASK_FILL`] and are then zeroed exactly, renormalizing over the
    /// selectable support.
    pub fn from_logits(logits: &[f64], mask: Vec<bool>) -> Result<Self> {
        if logits.len() != mask.len() || logits.len() < 2 {
            return Err(Error::Precondition("logits and mask must cover r documents plus STOP".into()));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyActionSpace);
        }
        let mut probs: Vec<f64> =
            logits.iter().zip(&mask).map(|(&l, &m)| if m { l } else { l + MASK_FILL }).collect();
        math::softmax_in_place(&mut probs);
        let mut total = 0.0;
        for (p, &m) in probs.iter_mut().zip(&mask) {
            if !m {
                *p = 0.0;
            }
            total += *p;
        }
        for p in probs.iter_mut() {
            *p /= total;
        }
        Ok(PolicyDistribution { probs, mask })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn pool_size(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn prob(&self, action: Action) -> f64 {
        self.probs[action.slot(self.pool_size())]
    }

    pub fn log_prob(&self, action: Action) -> f64 {
        math::ln(self.prob(action))
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * math::ln(p)).sum()
    }

    /// Uniform distribution over the selectable slots.
    pub fn uniform(mask: Vec<bool>) -> Result<Self> {
        let zeros = alloc::vec![0.0; mask.len()];
        Self::from_logits(&zeros, mask)
    }
}

/// `v · W · k` for every key row, then for `stop_key`. `w` is `d × d`
/// row-major.
pub fn bilinear_logits(v: &[f64], w: &[f64], keys: &[Vec<f64>], stop_key: &[f64]) -> Vec<f64> {
    let d = v.len();
    assert_eq!(w.len(), d * d, "W must be d x d");
    let mut vw = alloc::vec![0.0; d];
    for (i, &vi) in v.iter().enumerate() {
        for (j, out) in vw.iter_mut().enumerate() {
            *out += vi * w[i * d + j];
        }
    }
    let dot = |k: &[f64]| vw.iter().zip(k).map(|(a, b)| a * b).sum::<f64>();
    keys.iter().map(|k| dot(k)).chain(core::iter::once(dot(stop_key))).collect()
}

/// π(a|s) for state vector `v`, pool summaries `keys`, and the already
/// selected positions.
pub fn policy_distribution(
    v: &[f64],
    w: &[f64],
    keys: &[Vec<f64>],
    stop_key: &[f64],
    selected: &[usize],
    allow_stop: bool,
) -> Result<PolicyDistribution> {
    if keys.is_empty() {
        return Err(Error::Empty("knowledge pool"));
    }
    let logits = bilinear_logits(v, w, keys, stop_key);
    PolicyDistribution::from_logits(&logits, action_mask(keys.len(), selected, allow_stop))
}

/// Standard Gumbel draw `-ln(-ln U)` with `U` uniform on the open interval.
pub fn gumbel<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    let mut u: f64 = rng.gen();
    while u <= 0.0 {
        u = rng.gen();
    }
    -math::ln(-math::ln(u))
}

/// Gumbel-Max sample: `argmax_j log p_j + g_j` over selectable slots.
pub fn sample_action<R: RngCore + ?Sized>(dist: &PolicyDistribution, rng: &mut R) -> Action {
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for (j, (&p, &m)) in dist.probs.iter().zip(&dist.mask).enumerate() {
        if !m {
            continue;
        }
        let g = gumbel(rng);
        if p <= 0.0 {
            continue;
        }
        let score = math::ln(p) + g;
        if score > best.0 || best.1 == usize::MAX {
            best = (score, j);
        }
    }
    Action::from_slot(best.1, dist.pool_size())
}

/// Uniformly random selectable slot.
pub fn random_action<R: RngCore + ?Sized>(mask: &[bool], rng: &mut R) -> Result<Action> {
    let legal: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(j, _)| j).collect();
    if legal.is_empty() {
        return Err(Error::EmptyActionSpace);
    }
    Ok(Action::from_slot(legal[rng.gen_range(0..legal.len())], mask.len() - 1))
}

/// Most probable selectable slot, ties to the lowest slot (so documents
/// beat STOP on ties).
pub fn greedy_action(dist: &PolicyDistribution) -> Action {
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for (j, (&p, &m)) in dist.probs.iter().zip(&dist.mask).enumerate() {
        if m && (p > best.0 || best.1 == usize::MAX) {
            best = (p, j);
        }
    }
    Action::from_slot(best.1, dist.pool_size())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn identity(d: usize) -> Vec<f64> {
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        w
    }

    fn chi_square_p(counts: &[usize], probs: &[f64]) -> f64 {
        let n: usize = counts.iter().sum();
        let stat: f64 = counts
            .iter()
            .zip(probs)
            .filter(|(_, &p)| p > 0.0)
            .map(|(&c, &p)| {
                let e = p * n as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        let dof = probs.iter().filter(|&&p| p > 0.0).count() - 1;
        1.0 - ChiSquared::new(dof as f64).unwrap().cdf(stat)
    }

    #[test]
    fn zero_w_is_uniform_over_unmasked() {
        let keys = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5]];
        let d = policy_distribution(&[1.0, 1.0], &[0.0; 4], &keys, &[1.0, 0.0], &[1], true).unwrap();
        assert_eq!(d.probs()[1], 0.0);
        for j in [0, 2, 3] {
            assert!((d.probs()[j] - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_legal_action_gets_all_mass() {
        let keys = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let d = policy_distribution(&[3.0, -2.0], &identity(2), &keys, &[0.0, 0.0], &[0, 2], false).unwrap();
        assert_eq!(d.probs(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(greedy_action(&d), Action::Select(1));
    }

    #[test]
    fn hand_bilinear_two_way() {
        let keys = vec![vec![2.0, 0.0], vec![0.0, 2.0]];
        let d = policy_distribution(&[1.0, 0.0], &identity(2), &keys, &[0.0, 0.0], &[], false).unwrap();
        let e2 = libm::exp(2.0);
        assert!((d.probs()[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((d.probs()[0] - 0.8808).abs() < 1e-4);
        assert!((d.probs()[1] - 0.1192).abs() < 1e-4);
        assert_eq!(d.probs()[2], 0.0);
        assert_eq!(greedy_action(&d), Action::Select(0));
    }

    #[test]
    fn empty_action_space() {
        let keys = vec![vec![1.0]];
        assert_eq!(policy_distribution(&[1.0], &[1.0], &keys, &[1.0], &[0], false), Err(Error::EmptyActionSpace));
    }

    #[test]
    fn greedy_picks_max_with_low_index_ties() {
        let d = PolicyDistribution::from_logits(&[0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln(), 0.0], vec![true, true, true, false])
            .unwrap();
        assert_eq!(greedy_action(&d), Action::Select(1));
        let tie = PolicyDistribution::from_logits(&[0.0, 0.0, 0.0], vec![true, true, false]).unwrap();
        assert_eq!(greedy_action(&tie), Action::Select(0));
        let stop_tie = PolicyDistribution::from_logits(&[0.0, 0.0], vec![true, true]).unwrap();
        assert_eq!(greedy_action(&stop_tie), Action::Select(0));
    }

    #[test]
    fn degenerate_distribution_always_sampled() {
        let d = PolicyDistribution::from_logits(&[0.0, 5.0, 0.0], vec![false, true, false]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(sample_action(&d, &mut rng), Action::Select(1));
        }
    }

    #[test]
    fn sampling_deterministic_given_seed() {
        let d = PolicyDistribution::from_logits(&[0.1, 0.4, -0.3, 0.2], vec![true; 4]).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_action(&d, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
    }

    #[test]
    fn gumbel_max_matches_two_way_distribution() {
        let d = PolicyDistribution::from_logits(&[0.7f64.ln(), 0.3f64.ln(), 0.0], vec![true, true, false]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 3];
        for _ in 0..100_000 {
            counts[sample_action(&d, &mut rng).slot(2)] += 1;
        }
        assert_eq!(counts[2], 0);
        let p = chi_square_p(&counts, d.probs());
        assert!(p > 0.01, "chi-square p = {p}, counts {counts:?}");
    }

    #[test]
    fn random_action_respects_mask() {
        let mask = vec![true, false, true, false];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let a = random_action(&mask, &mut rng).unwrap();
            assert!(mask[a.slot(3)]);
        }
        assert_eq!(random_action(&[false, false], &mut rng), Err(Error::EmptyActionSpace));
    }

    proptest! {
        #[test]
        fn masked_softmax_contract(
            logits in prop::collection::vec(-30.0f64..30.0, 2..10),
            mask_bits in any::<u16>(),
            seed in any::<u64>(),
        ) {
            let n = logits.len();
            let mut mask: Vec<bool> = (0..n).map(|i| mask_bits >> i & 1 == 1).collect();
            mask[(seed as usize) % n] = true;
            let d = PolicyDistribution::from_logits(&logits, mask.clone()).unwrap();
            let sum: f64 = d.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            for j in 0..n {
                if !mask[j] { prop_assert_eq!(d.probs()[j], 0.0); }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            prop_assert!(mask[sample_action(&d, &mut rng).slot(n - 1)]);
            prop_assert!(mask[greedy_action(&d).slot(n - 1)]);
        }

        #[test]
        fn greedy_invariant_to_positive_state_scaling(
            v in prop::collection::vec(-2.0f64..2.0, 3),
            w in prop::collection::vec(-1.0f64..1.0, 9),
            keys in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..6),
            scale in 0.01f64..50.0,
        ) {
            let stop = [0.3, -0.2, 0.1];
            let a = greedy_action(&policy_distribution(&v, &w, &keys, &stop, &[], true).unwrap());
            let scaled: Vec<f64> = v.iter().map(|x| x * scale).collect();
            let logits = bilinear_logits(&v, &w, &keys, &stop);
            let mut sorted = logits.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            // skip near-ties where rounding of the scaled product can flip the order
            prop_assume!(sorted.len() < 2 || sorted[0] - sorted[1] > 1e-9);
            let b = greedy_action(&policy_distribution(&scaled, &w, &keys, &stop, &[], true).unwrap());
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn gumbel_max_matches_four_way_distribution() {
        let probs = [0.1, 0.2, 0.3, 0.4];
        let logits: Vec<f64> = probs.iter().map(|p: &f64| p.ln()).chain([0.0]).collect();
        let d = PolicyDistribution::from_logits(&logits, vec![true, true, true, true, false]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = [0usize; 5];
        for _ in 0..100_000 {
            counts[sample_action(&d, &mut rng).slot(4)] += 1;
        }
        let p = chi_square_p(&counts, d.probs());
        assert!(p > 0.01, "chi-square p = {p}, counts {counts:?}");
    }
}
