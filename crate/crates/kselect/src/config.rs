//! Model, training and decoding configuration. Every struct deserializes
//! from JSON with missing fields taking their defaults.

use kselect_core::reward::DEFAULT_GAMMA;
use kselect_core::LengthLimits;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Vocabulary size; 0 means "take it from the corpus vocabulary".
    pub vocab: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Share the embedding table between the dialogue module and the
    /// knowledge encoder.
    pub tie_knowledge_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            layers: 2,
            heads: 4,
            ffn: 256,
            vocab: 0,
            max_positions: 512,
            dropout: 0.1,
            seed: 0,
            tie_knowledge_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, limits: &LengthLimits) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.layers == 0 || self.ffn == 0 {
            return Err(Error::Config("d, heads, layers and ffn must be positive".into()));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!("d = {} is not divisible by heads = {}", self.d, self.heads)));
        }
        if self.vocab <= kselect_core::vocab::RESERVED.len() {
            return Err(Error::Config(format!("vocab = {} leaves no room beyond the reserved tokens", self.vocab)));
        }
        let longest = limits.max_context.max(limits.max_knowledge + 2).max(limits.max_response + 1);
        if self.max_positions < longest {
            return Err(Error::Config(format!(
                "max_positions = {} is shorter than the longest input ({longest})",
                self.max_positions
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout = {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Per-dataset hyperparameter presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    WizardSeen,
    WizardUnseen,
    Holle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Maximum number of selected knowledge documents.
    pub o: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub baseline_decay: f64,
    pub weight_decay: f64,
    /// Replace policy sampling with uniform random selection and drop L_k.
    pub disable_rl: bool,
    /// Drop the weak-supervision term.
    pub disable_weak: bool,
    /// Alternate generator-only and selector-only updates.
    pub separate_training: bool,
    /// Steps per phase when alternating.
    pub alternate_every: usize,
    /// Credit every action with the episode total reward.
    pub episode_reward: bool,
    pub use_baseline: bool,
    /// Cut the policy loss gradient at the encoder outputs.
    pub detach_policy_inputs: bool,
    pub enable_stop: bool,
    /// Minimum corpus frequency for a token to enter the vocabulary.
    pub min_freq: usize,
    pub seed: u64,
    pub lengths: LengthLimits,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            o: 6,
            gamma: DEFAULT_GAMMA,
            lambda: 0.3,
            learning_rate: 5e-5,
            batch_size: 16,
            epochs: 3,
            baseline_decay: 0.95,
            weight_decay: 0.01,
            disable_rl: false,
            disable_weak: false,
            separate_training: false,
            alternate_every: 1,
            episode_reward: false,
            use_baseline: true,
            detach_policy_inputs: false,
            enable_stop: false,
            min_freq: kselect_core::vocab::DEFAULT_MIN_FREQ,
            seed: 0,
            lengths: LengthLimits::WIZARD,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = TrainConfig::default();
        match preset {
            Preset::WizardSeen => base,
            Preset::WizardUnseen => TrainConfig { o: 3, lambda: 0.7, ..base },
            Preset::Holle => TrainConfig { o: 2, lambda: 0.7, lengths: LengthLimits::HOLLE, ..base },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.o == 0 {
            return bad("o must be at least 1".into());
        }
        if !(self.gamma > 0.0) {
            return bad(format!("gamma = {} must be positive", self.gamma));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda = {} must be non-negative", self.lambda));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate = {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 || self.alternate_every == 0 {
            return bad("batch_size and alternate_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return bad(format!("baseline_decay = {} outside [0, 1)", self.baseline_decay));
        }
        if self.lengths.max_context < 3 || self.lengths.max_knowledge == 0 || self.lengths.max_response == 0 {
            return bad("length limits too small".into());
        }
        Ok(())
    }

    /// Which parameter family is updated at `step` when alternating;
    /// `None` means all of them.
    pub fn phase(&self, step: usize) -> Option<Phase> {
        if !self.separate_training {
            return None;
        }
        Some(if (step / self.alternate_every) % 2 == 0 { Phase::Generator } else { Phase::Selector })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Generator,
    Selector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_width: usize,
    pub max_response_length: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { mode: DecodeMode::Greedy, beam_width: 1, max_response_length: 48 }
    }
}

impl DecodeConfig {
    pub const MAX_BEAM: usize = 5;

    pub fn greedy(max_response_length: usize) -> Self {
        DecodeConfig { mode: DecodeMode::Greedy, beam_width: 1, max_response_length }
    }

    pub fn beam(width: usize, max_response_length: usize) -> Self {
        DecodeConfig { mode: DecodeMode::Beam, beam_width: width, max_response_length }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=Self::MAX_BEAM).contains(&self.beam_width) {
            return Err(Error::Config(format!("beam width {} outside 1..={}", self.beam_width, Self::MAX_BEAM)));
        }
        Ok(())
    }
}
