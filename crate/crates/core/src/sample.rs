//! Dialogue samples and construction of the per-stage encoder input.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::vocab::{Vocabulary, EOS, SEP, SOS};
use crate::{Error, Result};

/// Sequence length limits applied when building model inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LengthLimits {
    pub max_context: usize,
    pub max_knowledge: usize,
    pub max_response: usize,
}

impl Default for LengthLimits {
    fn default() -> Self {
        Self::WIZARD
    }
}

impl LengthLimits {
    pub const WIZARD: LengthLimits = LengthLimits { max_context: 384, max_knowledge: 64, max_response: 48 };
    pub const HOLLE: LengthLimits = LengthLimits { max_context: 256, max_knowledge: 48, max_response: 48 };
}

/// A sample as text, before tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawSample {
    pub history: Vec<String>,
    pub knowledge: Vec<String>,
    pub response: String,
    /// 0-based pool positions of gold knowledge, evaluation only.
    pub gold_knowledge: Option<Vec<usize>>,
}

/// A tokenized dialogue turn with its knowledge pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueSample {
    pub history: Vec<Vec<u32>>,
    pub knowledge: Vec<Vec<u32>>,
    pub response: Vec<u32>,
    /// 0-based pool positions of gold knowledge, evaluation only.
    pub gold_knowledge: Option<Vec<usize>>,
}

impl DialogueSample {
    /// Tokenizes `raw`. Knowledge and response are truncated from the right;
    /// empty history turns are dropped.
    pub fn from_raw(raw: &RawSample, vocab: &Vocabulary, limits: &LengthLimits) -> Result<Self> {
        let history = raw.history.iter().map(|t| vocab.encode(t)).filter(|t| !t.is_empty()).collect();
        let mut knowledge = Vec::with_capacity(raw.knowledge.len());
        for doc in &raw.knowledge {
            let mut ids = vocab.encode(doc);
            ids.truncate(limits.max_knowledge);
            knowledge.push(ids);
        }
        let mut response = vocab.encode(&raw.response);
        response.truncate(limits.max_response);
        let sample = DialogueSample { history, knowledge, response, gold_knowledge: raw.gold_knowledge.clone() };
        sample.validate()?;
        Ok(sample)
    }

    pub fn pool_size(&self) -> usize {
        self.knowledge.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.knowledge.is_empty() {
            return Err(Error::Empty("knowledge pool"));
        }
        if self.knowledge.iter().any(Vec::is_empty) {
            return Err(Error::Empty("knowledge document"));
        }
        if self.response.is_empty() {
            return Err(Error::Empty("response"));
        }
        if let Some(gold) = &self.gold_knowledge {
            if let Some(&bad) = gold.iter().find(|&&g| g >= self.knowledge.len()) {
                return Err(Error::Precondition(alloc::format!(
                    "gold knowledge index {} outside pool of {}",
                    bad + 1,
                    self.knowledge.len()
                )));
            }
        }
        Ok(())
    }
}

/// Half-open token range inside a [`StageInput`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> core::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Encoder input for stage `c`: `SOS · history · (SEP · K)* · EOS`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageInput {
    pub token_ids: Vec<u32>,
    pub history: Segment,
    /// One segment per included knowledge document, in selection order.
    /// Ranges exclude the leading SEP.
    pub knowledge: Vec<Segment>,
    pub stage: usize,
}

impl StageInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn history_tokens(&self) -> &[u32] {
        &self.token_ids[self.history.range()]
    }

    pub fn knowledge_tokens(&self, i: usize) -> &[u32] {
        &self.token_ids[self.knowledge[i].range()]
    }
}

/// Builds the stage input containing the knowledge at `selected`
/// (0-based pool positions, in selection order).
///
/// Knowledge keeps priority over history: each document is truncated from
/// the right to `max_knowledge` (and, if the context is nearly full, to
/// whatever still fits); the flattened history is then truncated from the
/// left so the whole sequence fits in `max_context`.
pub fn build_stage_input(sample: &DialogueSample, selected: &[usize], limits: &LengthLimits) -> Result<StageInput> {
    let r = sample.pool_size();
    for (i, &a) in selected.iter().enumerate() {
        if a >= r {
            return Err(Error::Precondition(alloc::format!("knowledge index {a} outside pool of {r}")));
        }
        if selected[..i].contains(&a) {
            return Err(Error::Precondition(alloc::format!("knowledge index {a} selected twice")));
        }
    }
    if limits.max_context < 2 {
        return Err(Error::Config("max_context must leave room for SOS and EOS".into()));
    }

    let mut budget = limits.max_context - 2;
    let mut takes = Vec::with_capacity(selected.len());
    for &a in selected {
        let doc = &sample.knowledge[a];
        if budget < 2 {
            return Err(Error::Precondition(alloc::format!(
                "{} knowledge documents do not fit in a context of {}",
                selected.len(),
                limits.max_context
            )));
        }
        let take = doc.len().min(limits.max_knowledge).min(budget - 1);
        budget -= take + 1;
        takes.push(take);
    }

    let mut flat: Vec<u32> = Vec::new();
    for (i, turn) in sample.history.iter().enumerate() {
        if i > 0 {
            flat.push(SEP);
        }
        flat.extend_from_slice(turn);
    }
    let drop = flat.len().saturating_sub(budget);
    let history = &flat[drop..];

    let total = 2 + history.len() + takes.iter().map(|t| t + 1).sum::<usize>();
    let mut token_ids = Vec::with_capacity(total);
    token_ids.push(SOS);
    token_ids.extend_from_slice(history);
    let history_seg = Segment { start: 1, len: history.len() };
    let mut knowledge = Vec::with_capacity(selected.len());
    for (&a, &take) in selected.iter().zip(&takes) {
        token_ids.push(SEP);
        knowledge.push(Segment { start: token_ids.len(), len: take });
        token_ids.extend_from_slice(&sample.knowledge[a][..take]);
    }
    token_ids.push(EOS);
    Ok(StageInput { token_ids, history: history_seg, knowledge, stage: selected.len() })
}
