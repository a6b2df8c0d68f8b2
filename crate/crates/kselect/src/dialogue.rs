//! Context encoding, teacher-forced generation loss and response decoding.

use kselect_core::search;
use kselect_core::vocab::{EOS, SOS};
use kselect_core::StageInput;
use serde::{Deserialize, Serialize};

use crate::config::{DecodeConfig, DecodeMode};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::incremental::IncrementalDecoder;
use crate::model::{EncoderOutput, Model, Packed, SeqLayout, Stack};
use crate::tensor::{self, Matrix};

/// Mean per-token negative log-likelihood of a gold response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationLoss {
    pub nll: f64,
    pub ppl: f64,
    /// Scored positions, terminator included.
    pub tokens: usize,
}

impl GenerationLoss {
    pub fn from_nll(nll: f64, tokens: usize) -> Self {
        GenerationLoss { nll, ppl: nll.exp(), tokens }
    }
}

/// Decoder input `SOS · Y` and targets `Y · EOS`.
pub fn teacher_forcing(gold: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut input = Vec::with_capacity(gold.len() + 1);
    input.push(SOS);
    input.extend_from_slice(gold);
    let mut targets = gold.to_vec();
    targets.push(EOS);
    (input, targets)
}

/// Loss of `targets` under row-wise softmax of `logits`.
pub fn sequence_nll(logits: &Matrix, targets: &[u32]) -> GenerationLoss {
    assert_eq!(logits.rows(), targets.len());
    let logp = tensor::log_softmax_rows(logits);
    let nll = -targets.iter().enumerate().map(|(t, &y)| logp.get(t, y as usize)).sum::<f64>() / targets.len() as f64;
    GenerationLoss::from_nll(nll, targets.len())
}

/// Encoded stage inputs inside one graph.
pub struct EncodedBatch {
    pub states: Var,
    pub seqs: Vec<SeqLayout>,
}

impl EncodedBatch {
    /// `v_c` of sequence `i`: the state at its start-token position.
    pub fn first_token_state(&self, g: &mut Graph, i: usize) -> Var {
        g.rows(self.states, self.seqs[i].first_row(), 1)
    }
}

pub fn encode_stages(g: &mut Graph, model: &Model, stages: &[&StageInput]) -> Result<EncodedBatch> {
    let mut packed = Packed::new();
    for s in stages {
        packed.push(&s.token_ids);
    }
    let states = model.encode(g, Stack::Dialogue, &packed)?;
    Ok(EncodedBatch { states, seqs: packed.seqs })
}

/// One mean-NLL node per gold response; response `i` is decoded against
/// memory sequence `memory_index[i]`.
pub fn generation_loss_nodes(
    g: &mut Graph,
    model: &Model,
    memory: &EncodedBatch,
    memory_index: &[usize],
    golds: &[&[u32]],
) -> Result<Vec<Var>> {
    assert_eq!(memory_index.len(), golds.len());
    let mut packed = Packed::new();
    let mut targets = Vec::with_capacity(golds.len());
    for gold in golds {
        if gold.is_empty() {
            return Err(kselect_core::Error::Empty("gold response").into());
        }
        let (input, target) = teacher_forcing(gold);
        packed.push(&input);
        targets.push(target);
    }
    let mem_seqs: Vec<SeqLayout> = memory_index.iter().map(|&i| memory.seqs[i]).collect();
    let h = model.decode(g, memory.states, &mem_seqs, &packed)?;
    let logits = model.output_logits(g, h);
    Ok(packed
        .seqs
        .iter()
        .zip(&targets)
        .map(|(s, t)| {
            let rows = g.rows(logits, s.start, s.len);
            g.cross_entropy(rows, t)
        })
        .collect())
}

/// `X_c` states and `v_c`.
pub fn encode_context(model: &Model, stage: &StageInput) -> Result<EncoderOutput> {
    let mut g = Graph::new(&model.store);
    let enc = encode_stages(&mut g, model, &[stage])?;
    Ok(EncoderOutput { states: g.value(enc.states).clone() })
}

pub fn generation_loss(model: &Model, memory: &EncoderOutput, gold: &[u32]) -> Result<GenerationLoss> {
    let mut g = Graph::new(&model.store);
    let states = g.input(memory.states.clone());
    let enc = EncodedBatch { states, seqs: vec![SeqLayout { start: 0, len: memory.len(), valid: memory.len() }] };
    let node = generation_loss_nodes(&mut g, model, &enc, &[0], &[gold])?[0];
    Ok(GenerationLoss::from_nll(g.scalar(node), gold.len() + 1))
}

/// Greedy or beam decoding; the result excludes the terminator.
pub fn generate(model: &Model, memory: &EncoderOutput, cfg: &DecodeConfig) -> Result<Vec<u32>> {
    cfg.validate()?;
    let max_len = cfg.max_response_length.min(model.config.max_positions.saturating_sub(1));
    let dec = IncrementalDecoder::new(model, memory);
    let hyp = match cfg.mode {
        DecodeMode::Greedy => search::greedy(&dec, EOS, max_len),
        DecodeMode::Beam => search::beam_search(&dec, EOS, max_len, cfg.beam_width),
    };
    Ok(hyp.tokens)
}
