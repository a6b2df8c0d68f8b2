//! Named, grouped trainable tensors.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

/// Which part of the model a tensor belongs to. The tags partition the
/// parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    /// Dialogue encoder.
    DialogueEncoder,
    /// Response decoder.
    Decoder,
    /// Knowledge encoder, including its embedding table when untied.
    KnowledgeEncoder,
    /// Bilinear selection matrix and the STOP key.
    Policy,
    /// Shared token embedding table, also the output projection.
    Embedding,
}

impl Group {
    pub const ALL: [Group; 5] =
        [Group::DialogueEncoder, Group::Decoder, Group::KnowledgeEncoder, Group::Policy, Group::Embedding];

    /// Name prefix used in checkpoints.
    pub fn tag(self) -> &'static str {
        match self {
            Group::DialogueEncoder => "theta_e",
            Group::Decoder => "theta_d",
            Group::KnowledgeEncoder => "theta_k",
            Group::Policy => "w",
            Group::Embedding => "m",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.tag() == tag)
    }

    /// Groups updated on generator steps of alternating training.
    pub fn is_generator(self) -> bool {
        matches!(self, Group::DialogueEncoder | Group::Decoder | Group::Embedding)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Matrix,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor named `<group tag>.<local>`.
    pub fn add<R: Rng>(&mut self, group: Group, local: &str, rows: usize, cols: usize, init: Init, rng: &mut R) -> ParamId {
        let name = format!("{}.{}", group.tag(), local);
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let mut value = Matrix::zeros(rows, cols);
        match init {
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).expect("valid std");
                value.data_mut().iter_mut().for_each(|x| *x = normal.sample(rng));
            }
            Init::Zeros => {}
            Init::Ones => value.fill(1.0),
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, group, value });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, group: Group) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }

    /// Sets every tensor to `value`.
    pub fn fill(&mut self, value: f64) {
        self.params.iter_mut().for_each(|p| p.value.fill(value));
    }
}

/// Gradients indexed like the store; `None` means the loss did not
/// depend on that tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn empty(n: usize) -> Self {
        Gradients { grads: vec![None; n] }
    }

    pub(crate) fn from_vec(grads: Vec<Option<Matrix>>) -> Self {
        Gradients { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    /// `self += scale * other`.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => {
                        for (a, b) in m.data_mut().iter_mut().zip(t.data()) {
                            *a += scale * b;
                        }
                    }
                    None => {
                        let mut c = t.clone();
                        c.scale_assign(scale);
                        *mine = Some(c);
                    }
                }
            }
        }
    }

    /// Squared L2 norm of the gradient restricted to `group`.
    pub fn group_norm_sq(&self, store: &ParamStore, group: Group) -> f64 {
        store
            .iter()
            .filter(|(_, p)| p.group == group)
            .filter_map(|(id, _)| self.get(id))
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Matrix::is_finite)
    }
}
