//! Seeded synthetic corpus where selection quality is measurable.
//!
//! Every sample talks about one topic. The `g` gold documents carry that
//! topic word plus payload words drawn from the gold partition, and the
//! response is a template realized from the gold payload. The `r - g`
//! distractors draw topic and payload words from a disjoint partition, so
//! they share nothing with the response.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, RawSample, Result};

/// Word counts of each vocabulary partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partitions {
    pub topics: usize,
    pub payload: usize,
    pub distractor_topics: usize,
    pub distractor_payload: usize,
}

impl Default for Partitions {
    fn default() -> Self {
        Partitions { topics: 16, payload: 48, distractor_topics: 16, distractor_payload: 48 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub pool_size: usize,
    pub gold_count: usize,
    pub samples: usize,
    pub seed: u64,
    /// Payload words per document.
    pub payload_len: usize,
    pub partitions: Partitions,
}

impl SyntheticSpec {
    pub fn new(pool_size: usize, gold_count: usize, samples: usize, seed: u64) -> Self {
        SyntheticSpec { pool_size, gold_count, samples, seed, payload_len: 3, partitions: Partitions::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gold_count == 0 || self.gold_count >= self.pool_size {
            return Err(Error::Config(format!(
                "gold count must satisfy 1 <= g < r, got g={} r={}",
                self.gold_count, self.pool_size
            )));
        }
        let p = &self.partitions;
        if self.payload_len == 0 || p.topics == 0 || p.distractor_topics == 0 {
            return Err(Error::Config("empty synthetic partition".into()));
        }
        if self.gold_count * self.payload_len > p.payload {
            return Err(Error::Config("gold payload partition too small for distinct payloads".into()));
        }
        if self.payload_len > p.distractor_payload {
            return Err(Error::Config("distractor payload partition too small".into()));
        }
        Ok(())
    }
}

const HISTORY_OPENERS: [&str; 4] = ["tell me about", "what do you know about", "i want to hear about", "let us talk about"];

fn join(words: &[String]) -> String {
    words.join(" ")
}

/// Generates `spec.samples` samples. A pure function of `spec`.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<Vec<RawSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let p = spec.partitions;
    let gold_vocab: Vec<String> = (0..p.payload).map(|i| format!("fact{i}")).collect();
    let noise_vocab: Vec<String> = (0..p.distractor_payload).map(|i| format!("noise{i}")).collect();

    let mut out = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let topic = format!("topic{}", rng.gen_range(0..p.topics));
        let opener = HISTORY_OPENERS[rng.gen_range(0..HISTORY_OPENERS.len())];
        let history = alloc::vec![format!("{opener} {topic}")];

        let payload: Vec<String> =
            gold_vocab.choose_multiple(&mut rng, spec.gold_count * spec.payload_len).cloned().collect();
        let mut docs: Vec<(bool, Vec<String>)> = Vec::with_capacity(spec.pool_size);
        for chunk in payload.chunks(spec.payload_len) {
            let mut words = alloc::vec![topic.clone()];
            words.extend_from_slice(chunk);
            docs.push((true, words));
        }
        for _ in spec.gold_count..spec.pool_size {
            let mut words = alloc::vec![format!("other{}", rng.gen_range(0..p.distractor_topics))];
            words.extend(noise_vocab.choose_multiple(&mut rng, spec.payload_len).cloned());
            docs.push((false, words));
        }
        docs.shuffle(&mut rng);

        let gold: Vec<usize> = docs.iter().enumerate().filter(|(_, d)| d.0).map(|(i, _)| i).collect();
        let parts: Vec<String> = gold.iter().map(|&i| join(&docs[i].1[1..])).collect();
        let response = format!("well {}", parts.join(" and "));
        out.push(RawSample {
            history,
            knowledge: docs.into_iter().map(|(_, w)| join(&w)).collect(),
            response,
            gold_knowledge: Some(gold),
        });
    }
    Ok(out)
}
