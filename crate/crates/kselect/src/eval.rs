//! Corpus evaluation: inference episodes, response generation and the
//! automatic metrics, plus the selection baselines and the o-sweep.

use kselect_core::metrics::{bleu_n, distinct_n, unigram_f1};
use kselect_core::tfidf::TfIdfIndex;
use kselect_core::{Action, DialogueSample, Vocabulary};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DecodeConfig, TrainConfig};
use crate::dialogue::{self, GenerationLoss};
use crate::error::Result;
use crate::model::Model;
use crate::trainer::{self, Plan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub o: usize,
    pub samples: usize,
    pub f1: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub div1: f64,
    pub div2: f64,
    /// Token-weighted over teacher-forced final-stage losses; absent when
    /// nothing was scored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ppl: Option<f64>,
    /// Mean over samples carrying gold knowledge.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
}

/// How knowledge is chosen during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Greedy actions of the trained policy.
    #[default]
    Policy,
    /// Top-o pool documents by TF-IDF similarity to the history.
    TfIdf,
    /// o uniformly random documents.
    Random { seed: u64 },
}

/// One answered sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Answer {
    pub response: Vec<u32>,
    pub selected: Vec<usize>,
    pub loss: Option<GenerationLoss>,
}

/// Anything that answers samples; the model path and test stubs.
pub trait Responder {
    fn respond(&self, samples: &[&DialogueSample]) -> Result<Vec<Answer>>;
}

pub struct ModelResponder<'a> {
    pub model: &'a Model,
    /// Supplies `o`, STOP and the length limits.
    pub cfg: TrainConfig,
    pub decode: DecodeConfig,
    pub selection: Selection,
}

impl ModelResponder<'_> {
    fn plans(&self, samples: &[&DialogueSample], offset: usize) -> Option<Vec<Plan>> {
        let o = self.cfg.o;
        match self.selection {
            Selection::Policy => None,
            Selection::TfIdf => Some(
                samples
                    .iter()
                    .map(|s| {
                        let query: Vec<u32> = s.history.concat();
                        let ranked = TfIdfIndex::new(&s.knowledge).rank(&query);
                        Plan::forced(ranked.into_iter().take(o.min(s.pool_size())).map(Action::Select).collect())
                    })
                    .collect(),
            ),
            Selection::Random { seed } => Some(
                samples
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        // one stream per corpus position, independent of batching
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        rng.set_stream((offset + i) as u64);
                        let k = o.min(s.pool_size());
                        Plan::forced(sample_indices(&mut rng, s.pool_size(), k).into_iter().map(Action::Select).collect())
                    })
                    .collect(),
            ),
        }
    }

    pub fn respond_from(&self, samples: &[&DialogueSample], offset: usize) -> Result<Vec<Answer>> {
        let plans = self.plans(samples, offset);
        let traces = trainer::infer(self.model, samples, &self.cfg, plans.as_deref())?;
        traces
            .into_iter()
            .map(|t| {
                let memory = t.final_memory.as_ref().expect("inference keeps the final memory");
                Ok(Answer {
                    response: dialogue::generate(self.model, memory, &self.decode)?,
                    loss: t.final_loss(),
                    selected: t.selected,
                })
            })
            .collect()
    }
}

const CHUNK: usize = 32;

impl Responder for ModelResponder<'_> {
    fn respond(&self, samples: &[&DialogueSample]) -> Result<Vec<Answer>> {
        let mut out = Vec::with_capacity(samples.len());
        for (k, chunk) in samples.chunks(CHUNK).enumerate() {
            out.extend(self.respond_from(chunk, k * CHUNK)?);
        }
        Ok(out)
    }
}

fn or_zero(r: kselect_core::Result<f64>) -> Result<f64> {
    match r {
        Err(kselect_core::Error::Empty("n-grams")) => Ok(0.0),
        other => Ok(other?),
    }
}

/// Scores answers against gold responses in word space (reserved tokens
/// removed).
pub fn score(samples: &[&DialogueSample], answers: &[Answer], vocab: &Vocabulary, o: usize) -> Result<EvalReport> {
    assert_eq!(samples.len(), answers.len());
    let hyps: Vec<Vec<String>> = answers.iter().map(|a| vocab.decode_words(&a.response)).collect();
    let refs: Vec<Vec<String>> = samples.iter().map(|s| vocab.decode_words(&s.response)).collect();
    let (mut nll, mut tokens) = (0.0, 0usize);
    for l in answers.iter().filter_map(|a| a.loss) {
        nll += l.nll * l.tokens as f64;
        tokens += l.tokens;
    }
    let gold: Vec<(&Vec<usize>, &Answer)> =
        samples.iter().zip(answers).filter_map(|(s, a)| s.gold_knowledge.as_ref().map(|g| (g, a))).collect();
    let mean = |f: fn(&[usize], &[usize]) -> f64| {
        (!gold.is_empty()).then(|| gold.iter().map(|(g, a)| f(&a.selected, g)).sum::<f64>() / gold.len() as f64)
    };
    Ok(EvalReport {
        o,
        samples: samples.len(),
        f1: unigram_f1(&hyps, &refs)?,
        bleu1: bleu_n(&hyps, &refs, 1)?,
        bleu2: bleu_n(&hyps, &refs, 2)?,
        bleu3: bleu_n(&hyps, &refs, 3)?,
        div1: or_zero(distinct_n(&hyps, 1))?,
        div2: or_zero(distinct_n(&hyps, 2))?,
        ppl: (tokens > 0).then(|| (nll / tokens as f64).exp()),
        recall: mean(trainer::recall),
        precision: mean(trainer::precision),
    })
}

pub fn evaluate_with(responder: &dyn Responder, samples: &[DialogueSample], vocab: &Vocabulary, o: usize) -> Result<EvalReport> {
    let refs: Vec<&DialogueSample> = samples.iter().collect();
    let answers = responder.respond(&refs)?;
    score(&refs, &answers, vocab, o)
}

/// Evaluates with `cfg.o` selections.
pub fn evaluate(
    model: &Model,
    samples: &[DialogueSample],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    decode: &DecodeConfig,
    selection: Selection,
) -> Result<EvalReport> {
    let responder = ModelResponder { model, cfg: cfg.clone(), decode: *decode, selection };
    evaluate_with(&responder, samples, vocab, cfg.o)
}

/// One report per `o` in `range`.
pub fn sweep_o(
    model: &Model,
    samples: &[DialogueSample],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    decode: &DecodeConfig,
    range: std::ops::RangeInclusive<usize>,
    mut on_report: impl FnMut(&EvalReport),
) -> Result<Vec<EvalReport>> {
    let mut out = Vec::new();
    for o in range {
        let c = TrainConfig { o, ..cfg.clone() };
        let report = evaluate(model, samples, vocab, &c, decode, Selection::Policy)?;
        on_report(&report);
        out.push(report);
    }
    Ok(out)
}
