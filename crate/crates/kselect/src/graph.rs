//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records operations in creation order, which is already a
//! topological order, so `backward` is a single reverse sweep. Parameters
//! are read straight from the borrowed [`ParamStore`]; each tensor gets at
//! most one node per graph, so every use of a tied table accumulates into
//! the same gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{self, AttnBlock, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, tb: bool },
    Add(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, blocks: Vec<AttnBlock>, probs: Vec<f64> },
    Gather { table: Var, ids: Vec<u32> },
    ConcatRows(Vec<Var>),
    Rows { x: Var, start: usize },
    Dropout { x: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<u32>, probs: Matrix },
    LogSoftmaxPick { logits: Var, slot: usize, probs: Vec<f64> },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    op: Op,
    value: Option<Matrix>,
    needs_grad: bool,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'a> Graph<'a> {
    /// Evaluation graph: dropout disabled.
    pub fn new(store: &'a ParamStore) -> Self {
        Graph { store, nodes: Vec::new(), param_nodes: vec![None; store.len()], dropout_rng: None }
    }

    /// Training graph: dropout masks drawn from `rng`.
    pub fn training(store: &'a ParamStore, rng: ChaCha8Rng) -> Self {
        Graph { dropout_rng: Some(rng), ..Self::new(store) }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value: Some(value), needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.store.value(*id),
            _ => self.nodes[v.0].value.as_ref().expect("node value"),
        }
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m.data()[0]
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(Op::Input, value, false)
    }

    /// Same value as `x` with the gradient path cut.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.input(value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node { op: Op::Param(id), value: None, needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = tensor::matmul(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul { a, b, tb: false }, value, ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = tensor::matmul_t(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul { a, b, tb: true }, value, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), value, ng)
    }

    /// Adds the `1 × n` row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let mut value = self.value(x).clone();
        tensor::add_row_in_place(&mut value, self.value(bias));
        let ng = self.needs(x) || self.needs(bias);
        self.push(Op::AddRow { x, bias }, value, ng)
    }

    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, bias)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut value = self.value(x).clone();
        value.scale_assign(s);
        let ng = self.needs(x);
        self.push(Op::Scale(x, s), value, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = tensor::gelu_matrix(self.value(x));
        let ng = self.needs(x);
        self.push(Op::Gelu(x), value, ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (value, xhat, rstd) = tensor::layer_norm(self.value(x), self.value(gamma), self.value(beta));
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(Op::LayerNorm { x, gamma, beta, xhat, rstd }, value, ng)
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, blocks: Vec<AttnBlock>) -> Var {
        let (value, probs) = tensor::attention(self.value(q), self.value(k), self.value(v), heads, &blocks);
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(Op::Attention { q, k, v, heads, blocks, probs }, value, ng)
    }

    /// Rows of `table` at `ids`.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = self.value(table);
        let mut value = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(t.row(id as usize));
        }
        let ng = self.needs(table);
        self.push(Op::Gather { table, ids: ids.to_vec() }, value, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut value = Matrix::zeros(0, cols);
        for &p in parts {
            let m = self.value(p);
            for r in 0..m.rows() {
                value.push_row(m.row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatRows(parts.to_vec()), value, ng)
    }

    /// Rows `start..start + len` of `x`.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice_rows(start, len);
        let ng = self.needs(x);
        self.push(Op::Rows { x, start }, value, ng)
    }

    /// Inverted dropout; identity on evaluation graphs.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if self.dropout_rng.is_none() || p <= 0.0 {
            return x;
        }
        let mut value = self.value(x).clone();
        let rng = self.dropout_rng.as_mut().expect("training graph");
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..value.data().len()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        for (v, m) in value.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let ng = self.needs(x);
        self.push(Op::Dropout { x, mask }, value, ng)
    }

    /// Mean token negative log-likelihood of `targets` under row-wise
    /// softmax of `logits`; a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows(), targets.len());
        let logp = tensor::log_softmax_rows(l);
        let nll = -targets.iter().enumerate().map(|(t, &y)| logp.get(t, y as usize)).sum::<f64>() / targets.len() as f64;
        let mut probs = logp;
        probs.data_mut().iter_mut().for_each(|x| *x = x.exp());
        let ng = self.needs(logits);
        self.push(Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, Matrix::row_vector(vec![nll]), ng)
    }

    /// `log softmax(logits)[slot]` of a `1 × n` row restricted to the
    /// entries where `mask` is true. Masked entries get exactly zero
    /// probability and zero gradient.
    pub fn log_softmax_pick_masked(&mut self, logits: Var, mask: &[bool], slot: usize) -> Var {
        let l = self.value(logits);
        assert_eq!(l.shape(), (1, mask.len()));
        assert!(mask[slot], "picked slot is masked");
        let max = l.data().iter().zip(mask).filter(|(_, &m)| m).map(|(&x, _)| x).fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = l.data().iter().zip(mask).map(|(&x, &m)| if m { (x - max).exp() } else { 0.0 }).collect();
        let z: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= z);
        let value = Matrix::row_vector(vec![l.data()[slot] - max - z.ln()]);
        let ng = self.needs(logits);
        self.push(Op::LogSoftmaxPick { logits, slot, probs }, value, ng)
    }

    /// `sum_i w_i * x_i` over `1 × 1` nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum::<f64>();
        let ng = terms.iter().any(|&(v, _)| self.needs(v));
        self.push(Op::WeightedSum(terms.to_vec()), Matrix::row_vector(vec![total]), ng)
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::row_vector(vec![1.0]));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Param(_) = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        let mut out = vec![None; self.store.len()];
        for (pid, node) in self.param_nodes.iter().enumerate() {
            if let Some(v) = node {
                out[pid] = grads[v.0].take();
            }
        }
        Gradients::from_vec(out)
    }

    fn backprop_node(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let accum = |grads: &mut [Option<Matrix>], v: Var, m: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&m),
                slot @ None => *slot = Some(m),
            }
        };
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul { a, b, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    // dA = G · op(B)ᵀ
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    tensor::gemm(1.0, g, false, bv, !*tb, 0.0, &mut da);
                    accum(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    if *tb {
                        // B is n × k, C = A Bᵀ: dB = Gᵀ A
                        tensor::gemm(1.0, g, true, av, false, 0.0, &mut db);
                    } else {
                        tensor::gemm(1.0, av, true, g, false, 0.0, &mut db);
                    }
                    accum(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                accum(grads, *a, g.clone());
                accum(grads, *b, g.clone());
            }
            Op::AddRow { x, bias } => {
                if self.needs(*bias) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accum(grads, *bias, db);
                }
                accum(grads, *x, g.clone());
            }
            Op::Scale(x, s) => {
                let mut dx = g.clone();
                dx.scale_assign(*s);
                accum(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = g.data().iter().zip(xv.data()).map(|(gv, &xx)| gv * tensor::gelu_grad(xx)).collect();
                accum(grads, *x, Matrix::from_vec(g.rows(), g.cols(), data));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gam = self.value(*gamma);
                let d = g.cols();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = Matrix::zeros(1, d);
                    let mut db = Matrix::zeros(1, d);
                    for r in 0..g.rows() {
                        for j in 0..d {
                            dg.data_mut()[j] += g.get(r, j) * xhat.get(r, j);
                            db.data_mut()[j] += g.get(r, j);
                        }
                    }
                    accum(grads, *gamma, dg);
                    accum(grads, *beta, db);
                }
                if self.needs(*x) {
                    let mut dx = Matrix::zeros(g.rows(), d);
                    for r in 0..g.rows() {
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = g.get(r, j) * gam.data()[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat.get(r, j);
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        let row = dx.row_mut(r);
                        for j in 0..d {
                            let dxh = g.get(r, j) * gam.data()[j];
                            row[j] = rstd[r] * (dxh - mean_dxh - xhat.get(r, j) * mean_dxh_xh);
                        }
                    }
                    accum(grads, *x, dx);
                }
            }
            Op::Attention { q, k, v, heads, blocks, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Matrix::zeros(qv.rows(), d);
                let mut dk = Matrix::zeros(kv.rows(), d);
                let mut dv = Matrix::zeros(vv.rows(), d);
                let mut dp = Vec::new();
                let mut off = 0;
                for b in blocks {
                    for h in 0..*heads {
                        let cols = h * dh..(h + 1) * dh;
                        for i in 0..b.q_len {
                            let n = b.visible(i);
                            let p = &probs[off..off + n];
                            let go = &g.row(b.q_start + i)[cols.clone()];
                            dp.clear();
                            let mut dot = 0.0;
                            for (j, &pj) in p.iter().enumerate() {
                                let vj = &vv.row(b.k_start + j)[cols.clone()];
                                let s: f64 = go.iter().zip(vj).map(|(a, c)| a * c).sum();
                                dp.push(s);
                                dot += pj * s;
                                let dvj = &mut dv.row_mut(b.k_start + j)[cols.clone()];
                                for (t, gg) in dvj.iter_mut().zip(go) {
                                    *t += pj * gg;
                                }
                            }
                            let qi = qv.row(b.q_start + i)[cols.clone()].to_vec();
                            for (j, &pj) in p.iter().enumerate() {
                                let ds = pj * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kv.row(b.k_start + j)[cols.clone()];
                                let dqi = &mut dq.row_mut(b.q_start + i)[cols.clone()];
                                for (t, kk) in dqi.iter_mut().zip(kj) {
                                    *t += ds * kk;
                                }
                                let dkj = &mut dk.row_mut(b.k_start + j)[cols.clone()];
                                for (t, qq) in dkj.iter_mut().zip(&qi) {
                                    *t += ds * qq;
                                }
                            }
                            off += b.k_len;
                        }
                    }
                }
                accum(grads, *q, dq);
                accum(grads, *k, dk);
                accum(grads, *v, dv);
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut dt = Matrix::zeros(t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (d, v) in dt.row_mut(id as usize).iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                accum(grads, *table, dt);
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for &p in parts {
                    let n = self.value(p).rows();
                    accum(grads, p, g.slice_rows(row, n));
                    row += n;
                }
            }
            Op::Rows { x, start } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    dx.row_mut(start + r).copy_from_slice(g.row(r));
                }
                accum(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                accum(grads, *x, Matrix::from_vec(g.rows(), g.cols(), data));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let scale = g.data()[0] / targets.len() as f64;
                let mut dl = probs.clone();
                for (t, &y) in targets.iter().enumerate() {
                    dl.row_mut(t)[y as usize] -= 1.0;
                }
                dl.scale_assign(scale);
                accum(grads, *logits, dl);
            }
            Op::LogSoftmaxPick { logits, slot, probs } => {
                let gs = g.data()[0];
                let data = probs.iter().enumerate().map(|(j, &p)| gs * (f64::from(u8::from(j == *slot)) - p)).collect();
                accum(grads, *logits, Matrix::row_vector(data));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    accum(grads, v, Matrix::row_vector(vec![g.data()[0] * w]));
                }
            }
        }
    }
}
