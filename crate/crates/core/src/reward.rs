//! Perplexity-derived rewards, rewards-to-go, and per-stage baselines.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::{Error, Result};

/// Default reward temperature.
pub const DEFAULT_GAMMA: f64 = 10.0;

/// Reward for one stage: `exp(-ppl / gamma)`.
#[inline]
pub fn stage_reward(ppl: f64, gamma: f64) -> f64 {
    math::exp(-ppl / gamma)
}

/// `R_t = sum_{u >= t} exp(-ppls[u] / gamma)`, where `ppls[t]` is the
/// perplexity measured after action `t` was incorporated.
pub fn rewards_to_go(ppls: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if ppls.is_empty() {
        return Err(Error::Empty("perplexities"));
    }
    if !(gamma > 0.0) {
        return Err(Error::Config(alloc::format!("gamma must be positive, got {gamma}")));
    }
    if let Some(bad) = ppls.iter().find(|&&p| !(p >= 1.0)) {
        return Err(Error::Invariant(alloc::format!("perplexity {bad} below 1")));
    }
    let mut out = alloc::vec![0.0; ppls.len()];
    let mut acc = 0.0;
    for t in (0..ppls.len()).rev() {
        acc += stage_reward(ppls[t], gamma);
        out[t] = acc;
    }
    Ok(out)
}

/// Per-stage exponential moving averages of observed rewards-to-go.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineTable {
    values: Vec<f64>,
    decay: f64,
}

impl BaselineTable {
    pub fn new(decay: f64) -> Self {
        BaselineTable { values: Vec::new(), decay }
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    /// Current estimate for `stage`; unseen stages start at 0.
    pub fn get(&self, stage: usize) -> f64 {
        self.values.get(stage).copied().unwrap_or(0.0)
    }

    pub fn update(&mut self, stage: usize, observed: f64) {
        if self.values.len() <= stage {
            self.values.resize(stage + 1, 0.0);
        }
        let b = &mut self.values[stage];
        *b = self.decay * *b + (1.0 - self.decay) * observed;
    }

    /// Folds one episode's rewards-to-go into the table.
    pub fn observe(&mut self, rewards_to_go: &[f64]) {
        for (stage, &r) in rewards_to_go.iter().enumerate() {
            self.update(stage, r);
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// How the reward of each action is credited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CreditRule {
    /// Every action gets the episode total `R_0 - b_0`.
    pub episode_reward: bool,
    pub use_baseline: bool,
}

/// Per-action advantage weights multiplying `-log π(a_c|s_c)` in the
/// policy loss.
pub fn advantages(rewards_to_go: &[f64], baselines: &BaselineTable, rule: CreditRule) -> Vec<f64> {
    let b = |stage: usize| if rule.use_baseline { baselines.get(stage) } else { 0.0 };
    if rule.episode_reward {
        let total = rewards_to_go.first().map_or(0.0, |r0| r0 - b(0));
        alloc::vec![total; rewards_to_go.len()]
    } else {
        rewards_to_go.iter().enumerate().map(|(c, r)| r - b(c)).collect()
    }
}

/// `-sum_c log π(a_c|s_c) * advantage_c`.
pub fn policy_loss_value(log_probs: &[f64], advantages: &[f64]) -> f64 {
    -log_probs.iter().zip(advantages).map(|(l, a)| l * a).sum::<f64>()
}
