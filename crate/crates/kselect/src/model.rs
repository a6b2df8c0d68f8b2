//! Transformer parameters and graph-level encoder/decoder stacks.
//!
//! Several sequences are processed at once by stacking their rows into one
//! matrix ([`Packed`]); attention is restricted to each sequence's own rows
//! (and its valid, non-pad keys) through [`AttnBlock`]s, so packing never
//! changes per-sequence results.

use kselect_core::vocab::PAD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Group, Init, ParamId, ParamStore};
use crate::tensor::{self, AttnBlock, Matrix};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
pub struct AttnIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub attn: AttnIds,
    pub ln1: NormIds,
    pub ffn: FfnIds,
    pub ln2: NormIds,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayer {
    pub self_attn: AttnIds,
    pub ln1: NormIds,
    pub cross_attn: AttnIds,
    pub ln2: NormIds,
    pub ffn: FfnIds,
    pub ln3: NormIds,
}

/// Which encoder stack to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stack {
    Dialogue,
    Knowledge,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    d: usize,
    ffn: usize,
}

impl Builder<'_> {
    fn add(&mut self, group: Group, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
        self.store.add(group, name, rows, cols, init, self.rng)
    }

    fn attn(&mut self, group: Group, prefix: &str) -> AttnIds {
        let d = self.d;
        let pair = |b: &mut Self, n: &str| {
            (
                b.add(group, &format!("{prefix}.w{n}"), d, d, Init::Normal(INIT_STD)),
                b.add(group, &format!("{prefix}.b{n}"), 1, d, Init::Zeros),
            )
        };
        let (wq, bq) = pair(self, "q");
        let (wk, bk) = pair(self, "k");
        let (wv, bv) = pair(self, "v");
        let (wo, bo) = pair(self, "o");
        AttnIds { wq, bq, wk, bk, wv, bv, wo, bo }
    }

    fn norm(&mut self, group: Group, prefix: &str) -> NormIds {
        NormIds {
            gamma: self.add(group, &format!("{prefix}.gamma"), 1, self.d, Init::Ones),
            beta: self.add(group, &format!("{prefix}.beta"), 1, self.d, Init::Zeros),
        }
    }

    fn ffn(&mut self, group: Group, prefix: &str) -> FfnIds {
        let (d, f) = (self.d, self.ffn);
        FfnIds {
            w1: self.add(group, &format!("{prefix}.w1"), d, f, Init::Normal(INIT_STD)),
            b1: self.add(group, &format!("{prefix}.b1"), 1, f, Init::Zeros),
            w2: self.add(group, &format!("{prefix}.w2"), f, d, Init::Normal(INIT_STD)),
            b2: self.add(group, &format!("{prefix}.b2"), 1, d, Init::Zeros),
        }
    }

    fn encoder_layer(&mut self, group: Group, i: usize) -> EncoderLayer {
        let p = format!("layer{i}");
        EncoderLayer {
            attn: self.attn(group, &format!("{p}.attn")),
            ln1: self.norm(group, &format!("{p}.ln1")),
            ffn: self.ffn(group, &format!("{p}.ffn")),
            ln2: self.norm(group, &format!("{p}.ln2")),
        }
    }

    fn decoder_layer(&mut self, i: usize) -> DecoderLayer {
        let g = Group::Decoder;
        let p = format!("layer{i}");
        DecoderLayer {
            self_attn: self.attn(g, &format!("{p}.self_attn")),
            ln1: self.norm(g, &format!("{p}.ln1")),
            cross_attn: self.attn(g, &format!("{p}.cross_attn")),
            ln2: self.norm(g, &format!("{p}.ln2")),
            ffn: self.ffn(g, &format!("{p}.ffn")),
            ln3: self.norm(g, &format!("{p}.ln3")),
        }
    }
}

/// Sequence layout inside a packed batch: rows `start..start + len`, of
/// which the first `valid` are real tokens and the rest padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqLayout {
    pub start: usize,
    pub len: usize,
    pub valid: usize,
}

impl SeqLayout {
    pub fn first_row(&self) -> usize {
        self.start
    }
}

/// Several token sequences stacked row-wise.
#[derive(Debug, Clone, Default)]
pub struct Packed {
    pub tokens: Vec<u32>,
    pub seqs: Vec<SeqLayout>,
}

impl Packed {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(tokens: &[u32]) -> Self {
        let mut p = Packed::new();
        p.push(tokens);
        p
    }

    pub fn push(&mut self, tokens: &[u32]) -> SeqLayout {
        self.push_padded(tokens, tokens.len())
    }

    /// Appends `tokens` right-padded with PAD to `len`.
    pub fn push_padded(&mut self, tokens: &[u32], len: usize) -> SeqLayout {
        assert!(len >= tokens.len());
        let layout = SeqLayout { start: self.tokens.len(), len, valid: tokens.len() };
        self.tokens.extend_from_slice(tokens);
        self.tokens.resize(self.tokens.len() + len - tokens.len(), PAD);
        self.seqs.push(layout);
        layout
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    fn positions(&self) -> Vec<usize> {
        let mut pos = Vec::with_capacity(self.tokens.len());
        for s in &self.seqs {
            pos.extend(0..s.len);
        }
        pos
    }
}

/// The full parameter set with typed handles into the store.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    /// Embedding table `M`, also the output projection.
    pub embed: ParamId,
    /// Knowledge encoder embeddings; equal to `embed` when tied.
    pub knowledge_embed: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub knowledge: Vec<EncoderLayer>,
    /// Bilinear selection matrix.
    pub w: ParamId,
    /// STOP pseudo-knowledge vector (`1 × d`).
    pub k_stop: ParamId,
    positions: Matrix,
}

impl Model {
    /// Fresh randomly initialized model. `config.vocab` must be set.
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.d == 0 || config.heads == 0 || config.d % config.heads != 0 {
            return Err(Error::Config(format!("d = {} is not divisible by heads = {}", config.d, config.heads)));
        }
        if config.vocab <= kselect_core::vocab::RESERVED.len() {
            return Err(Error::Config(format!("vocab = {} is too small", config.vocab)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, rng: &mut rng, d: config.d, ffn: config.ffn };
        // unit-scale token inputs after the sqrt(d) factor, on par with the positions
        let embed_std = 1.0 / (config.d as f64).sqrt();
        let embed = b.add(Group::Embedding, "embed", config.vocab, config.d, Init::Normal(embed_std));
        let encoder = (0..config.layers).map(|i| b.encoder_layer(Group::DialogueEncoder, i)).collect();
        let decoder = (0..config.layers).map(|i| b.decoder_layer(i)).collect();
        let knowledge_embed = if config.tie_knowledge_embeddings {
            embed
        } else {
            b.add(Group::KnowledgeEncoder, "embed", config.vocab, config.d, Init::Normal(embed_std))
        };
        let knowledge = (0..config.layers).map(|i| b.encoder_layer(Group::KnowledgeEncoder, i)).collect();
        let w = b.add(Group::Policy, "bilinear", config.d, config.d, Init::Normal(INIT_STD));
        let k_stop = b.add(Group::Policy, "k_stop", 1, config.d, Init::Normal(INIT_STD));
        let positions = tensor::sinusoidal_positions(config.max_positions, config.d);
        Ok(Model { config, store, embed, knowledge_embed, encoder, decoder, knowledge, w, k_stop, positions })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab
    }

    pub fn positions(&self) -> &Matrix {
        &self.positions
    }

    fn check(&self, packed: &Packed) -> Result<()> {
        for s in &packed.seqs {
            if s.len > self.config.max_positions {
                return Err(Error::Overlength { len: s.len, max: self.config.max_positions });
            }
            if s.valid == 0 {
                return Err(Error::Core(kselect_core::Error::Empty("sequence")));
            }
        }
        if let Some(&t) = packed.tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::Config(format!("token id {t} outside the vocabulary")));
        }
        Ok(())
    }

    /// `sqrt(d) * table[token] + position`, then dropout.
    fn embed_packed(&self, g: &mut Graph, table: ParamId, packed: &Packed) -> Var {
        let d = self.config.d;
        let t = g.param(table);
        let e = g.gather(t, &packed.tokens);
        let e = g.scale(e, (d as f64).sqrt());
        let mut pe = Matrix::zeros(packed.rows(), d);
        for (r, p) in packed.positions().into_iter().enumerate() {
            pe.row_mut(r).copy_from_slice(self.positions.row(p));
        }
        let pe = g.input(pe);
        let x = g.add(e, pe);
        g.dropout(x, self.config.dropout)
    }

    fn attn_sublayer(&self, g: &mut Graph, ids: &AttnIds, xq: Var, xkv: Var, blocks: Vec<AttnBlock>) -> Var {
        let p = |g: &mut Graph, id| g.param(id);
        let (wq, bq, wk, bk) = (p(g, ids.wq), p(g, ids.bq), p(g, ids.wk), p(g, ids.bk));
        let (wv, bv, wo, bo) = (p(g, ids.wv), p(g, ids.bv), p(g, ids.wo), p(g, ids.bo));
        let q = g.linear(xq, wq, bq);
        let k = g.linear(xkv, wk, bk);
        let v = g.linear(xkv, wv, bv);
        let a = g.attention(q, k, v, self.config.heads, blocks);
        g.linear(a, wo, bo)
    }

    fn ffn_sublayer(&self, g: &mut Graph, ids: &FfnIds, x: Var) -> Var {
        let (w1, b1, w2, b2) = (g.param(ids.w1), g.param(ids.b1), g.param(ids.w2), g.param(ids.b2));
        let h = g.linear(x, w1, b1);
        let h = g.gelu(h);
        g.linear(h, w2, b2)
    }

    /// Post-norm residual: `LN(x + dropout(f))`.
    fn residual(&self, g: &mut Graph, x: Var, f: Var, ln: &NormIds) -> Var {
        let f = g.dropout(f, self.config.dropout);
        let s = g.add(x, f);
        let (gamma, beta) = (g.param(ln.gamma), g.param(ln.beta));
        g.layer_norm(s, gamma, beta)
    }

    /// Bidirectional encoder over every packed sequence; returns the
    /// per-token states (`rows × d`).
    pub fn encode(&self, g: &mut Graph, stack: Stack, packed: &Packed) -> Result<Var> {
        self.check(packed)?;
        let (table, layers) = match stack {
            Stack::Dialogue => (self.embed, &self.encoder),
            Stack::Knowledge => (self.knowledge_embed, &self.knowledge),
        };
        let blocks: Vec<AttnBlock> = packed.seqs.iter().map(|s| AttnBlock::full(s.start, s.len, s.start, s.valid)).collect();
        let mut x = self.embed_packed(g, table, packed);
        for layer in layers {
            let a = self.attn_sublayer(g, &layer.attn, x, x, blocks.clone());
            x = self.residual(g, x, a, &layer.ln1);
            let f = self.ffn_sublayer(g, &layer.ffn, x);
            x = self.residual(g, x, f, &layer.ln2);
        }
        Ok(x)
    }

    /// Causal decoder: target sequence `i` attends to its own prefix and to
    /// memory sequence `memory_seqs[i]` inside `memory`.
    pub fn decode(&self, g: &mut Graph, memory: Var, memory_seqs: &[SeqLayout], targets: &Packed) -> Result<Var> {
        self.check(targets)?;
        assert_eq!(memory_seqs.len(), targets.seqs.len(), "one memory per target sequence");
        let self_blocks: Vec<AttnBlock> = targets
            .seqs
            .iter()
            .map(|s| AttnBlock { q_start: s.start, q_len: s.len, k_start: s.start, k_len: s.valid, causal: true })
            .collect();
        let cross_blocks: Vec<AttnBlock> = targets
            .seqs
            .iter()
            .zip(memory_seqs)
            .map(|(t, m)| AttnBlock::full(t.start, t.len, m.start, m.valid))
            .collect();
        let mut y = self.embed_packed(g, self.embed, targets);
        for layer in &self.decoder {
            let a = self.attn_sublayer(g, &layer.self_attn, y, y, self_blocks.clone());
            y = self.residual(g, y, a, &layer.ln1);
            let c = self.attn_sublayer(g, &layer.cross_attn, y, memory, cross_blocks.clone());
            y = self.residual(g, y, c, &layer.ln2);
            let f = self.ffn_sublayer(g, &layer.ffn, y);
            y = self.residual(g, y, f, &layer.ln3);
        }
        Ok(y)
    }

    /// Tied output scores `h · Mᵀ`, no bias.
    pub fn output_logits(&self, g: &mut Graph, h: Var) -> Var {
        let m = g.param(self.embed);
        g.matmul_t(h, m)
    }
}

/// Encoder states of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `len × d`.
    pub states: Matrix,
}

impl EncoderOutput {
    /// State at the start-token position.
    pub fn first_token_state(&self) -> &[f64] {
        self.states.row(0)
    }

    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows() == 0
    }
}

/// Evaluation-mode encoder pass over one sequence whose trailing
/// `pad_len` positions are padding. Pad rows are computed but never
/// attended to; the returned states cover the full input.
pub fn encoder_forward(model: &Model, stack: Stack, tokens: &[u32], pad_len: usize) -> Result<EncoderOutput> {
    let valid = tokens.len().checked_sub(pad_len).filter(|&v| v > 0).ok_or(kselect_core::Error::Empty("sequence"))?;
    let mut packed = Packed::new();
    packed.tokens.extend_from_slice(tokens);
    packed.seqs.push(SeqLayout { start: 0, len: tokens.len(), valid });
    let mut g = Graph::new(&model.store);
    let x = model.encode(&mut g, stack, &packed)?;
    Ok(EncoderOutput { states: g.value(x).clone() })
}

/// Evaluation-mode decoder states for `prefix` (starting with SOS) against
/// `memory`.
pub fn decoder_forward(model: &Model, memory: &EncoderOutput, prefix: &[u32]) -> Result<Matrix> {
    let mut g = Graph::new(&model.store);
    let mem = g.input(memory.states.clone());
    let layout = SeqLayout { start: 0, len: memory.len(), valid: memory.len() };
    let h = model.decode(&mut g, mem, &[layout], &Packed::single(prefix))?;
    Ok(g.value(h).clone())
}

/// Tied output scores for a single hidden state.
pub fn output_logits(model: &Model, h: &[f64]) -> Vec<f64> {
    let m = model.store.value(model.embed);
    (0..m.rows()).map(|y| m.row(y).iter().zip(h).map(|(a, b)| a * b).sum()).collect()
}
