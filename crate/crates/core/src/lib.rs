//! Pure algorithms behind reward-driven multi-knowledge selection for
//! knowledge-grounded dialogue.
//!
//! Everything here works on plain slices and `alloc` collections: the
//! vocabulary and stage-input construction, the synthetic corpus, the
//! bilinear selection policy (masking, STOP, Gumbel-Max sampling),
//! rewards-to-go and baselines, TF-IDF weak labels, the automatic
//! metrics, and greedy/beam decoding over an abstract step scorer.
//!
//! Pool positions are 0-based throughout this crate. One-based indices
//! only appear at the file and HTTP boundaries of the `kselect` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

mod error;
pub mod math;
pub mod metrics;
pub mod policy;
pub mod reward;
pub mod sample;
pub mod search;
pub mod synthetic;
pub mod tfidf;
pub mod vocab;

pub use error::{Error, Result};
pub use policy::{Action, PolicyDistribution};
pub use sample::{build_stage_input, DialogueSample, LengthLimits, RawSample, Segment, StageInput};
pub use vocab::Vocabulary;
