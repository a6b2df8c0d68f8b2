//! Token-at-a-time decoding with per-layer key/value caches.

use kselect_core::search::StepScorer;
use kselect_core::vocab::SOS;

use crate::model::{AttnIds, EncoderOutput, FfnIds, Model, NormIds};
use crate::tensor::{self, AttnBlock, Matrix};

/// Self-attention caches after some prefix.
#[derive(Debug, Clone)]
pub struct DecodeState {
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
}

impl DecodeState {
    /// Number of prefix tokens consumed.
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, Matrix::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Decoder bound to one memory; cross-attention keys and values are
/// projected once up front.
pub struct IncrementalDecoder<'m> {
    model: &'m Model,
    cross: Vec<(Matrix, Matrix)>,
}

impl<'m> IncrementalDecoder<'m> {
    pub fn new(model: &'m Model, memory: &EncoderOutput) -> Self {
        let s = &model.store;
        let cross = model
            .decoder
            .iter()
            .map(|l| {
                let a = &l.cross_attn;
                (
                    tensor::linear(&memory.states, s.value(a.wk), s.value(a.bk)),
                    tensor::linear(&memory.states, s.value(a.wv), s.value(a.bv)),
                )
            })
            .collect();
        IncrementalDecoder { model, cross }
    }

    pub fn empty_state(&self) -> DecodeState {
        let d = self.model.d();
        let n = self.model.decoder.len();
        DecodeState { keys: vec![Matrix::zeros(0, d); n], values: vec![Matrix::zeros(0, d); n] }
    }

    fn project_out(&self, ids: &AttnIds, q: &Matrix, k: &Matrix, v: &Matrix) -> Matrix {
        let s = &self.model.store;
        let (a, _) = tensor::attention(q, k, v, self.model.config.heads, &[AttnBlock::full(0, 1, 0, k.rows())]);
        tensor::linear(&a, s.value(ids.wo), s.value(ids.bo))
    }

    fn norm(&self, x: &Matrix, f: &Matrix, ids: &NormIds) -> Matrix {
        let mut sum = x.clone();
        sum.add_assign(f);
        tensor::layer_norm(&sum, self.model.store.value(ids.gamma), self.model.store.value(ids.beta)).0
    }

    fn ffn(&self, ids: &FfnIds, x: &Matrix) -> Matrix {
        let s = &self.model.store;
        let h = tensor::gelu_matrix(&tensor::linear(x, s.value(ids.w1), s.value(ids.b1)));
        tensor::linear(&h, s.value(ids.w2), s.value(ids.b2))
    }

    /// Feeds `token` at the next position; returns the new state and the
    /// top-layer hidden state for that position.
    pub fn step(&self, state: &DecodeState, token: u32) -> (DecodeState, Vec<f64>) {
        let m = self.model;
        let s = &m.store;
        let d = m.d();
        let pos = state.len();
        let scale = (d as f64).sqrt();
        let emb = s.value(m.embed).row(token as usize);
        let pe = m.positions().row(pos);
        let mut x = Matrix::row_vector(emb.iter().zip(pe).map(|(e, p)| e * scale + p).collect());
        let mut next = state.clone();
        for (l, layer) in m.decoder.iter().enumerate() {
            let a = &layer.self_attn;
            let q = tensor::linear(&x, s.value(a.wq), s.value(a.bq));
            next.keys[l].push_row(tensor::linear(&x, s.value(a.wk), s.value(a.bk)).row(0));
            next.values[l].push_row(tensor::linear(&x, s.value(a.wv), s.value(a.bv)).row(0));
            let o = self.project_out(a, &q, &next.keys[l], &next.values[l]);
            x = self.norm(&x, &o, &layer.ln1);
            let c = &layer.cross_attn;
            let q = tensor::linear(&x, s.value(c.wq), s.value(c.bq));
            let (ck, cv) = &self.cross[l];
            let o = self.project_out(c, &q, ck, cv);
            x = self.norm(&x, &o, &layer.ln2);
            let f = self.ffn(&layer.ffn, &x);
            x = self.norm(&x, &f, &layer.ln3);
        }
        (next, x.into_vec())
    }

    /// Hidden states for every position of `prefix`, one step at a time.
    pub fn hidden_states(&self, prefix: &[u32]) -> Matrix {
        let mut state = self.empty_state();
        let mut out = Matrix::zeros(0, self.model.d());
        for &t in prefix {
            let (next, h) = self.step(&state, t);
            out.push_row(&h);
            state = next;
        }
        out
    }

    fn log_probs(&self, h: &[f64]) -> Vec<f64> {
        let mut l = crate::model::output_logits(self.model, h);
        kselect_core::math::log_softmax_in_place(&mut l);
        l
    }
}

impl StepScorer for IncrementalDecoder<'_> {
    type State = DecodeState;

    fn start(&self) -> (DecodeState, Vec<f64>) {
        let (state, h) = self.step(&self.empty_state(), SOS);
        (state, self.log_probs(&h))
    }

    fn advance(&self, state: &DecodeState, token: u32) -> (DecodeState, Vec<f64>) {
        let (state, h) = self.step(state, token);
        (state, self.log_probs(&h))
    }
}
