//! Independent encoding of pool documents into summary vectors.

use kselect_core::vocab::{EOS, SOS};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::model::{Model, Packed, Stack};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeEmbedding {
    /// 0-based pool position.
    pub index: usize,
    /// Start-token state, width `d`.
    pub summary: Vec<f64>,
    /// Document tokens, wrappers excluded.
    pub length: usize,
}

/// `SOS · doc · EOS`.
pub fn knowledge_input(doc: &[u32]) -> Vec<u32> {
    let mut ids = Vec::with_capacity(doc.len() + 2);
    ids.push(SOS);
    ids.extend_from_slice(doc);
    ids.push(EOS);
    ids
}

/// Encodes every document of every pool in one padded batch. Returns one
/// `r × d` summary matrix node per pool.
pub fn encode_pools(g: &mut Graph, model: &Model, pools: &[&[Vec<u32>]]) -> Result<Vec<Var>> {
    let mut packed = Packed::new();
    for pool in pools {
        if pool.is_empty() {
            return Err(kselect_core::Error::Empty("knowledge pool").into());
        }
        let width = pool.iter().map(|d| d.len() + 2).max().unwrap_or(2);
        for doc in pool.iter() {
            if doc.is_empty() {
                return Err(kselect_core::Error::Empty("knowledge document").into());
            }
            packed.push_padded(&knowledge_input(doc), width);
        }
    }
    let states = model.encode(g, Stack::Knowledge, &packed)?;
    let mut out = Vec::with_capacity(pools.len());
    let mut seq = 0;
    for pool in pools {
        let rows: Vec<u32> = packed.seqs[seq..seq + pool.len()].iter().map(|s| s.first_row() as u32).collect();
        out.push(g.gather(states, &rows));
        seq += pool.len();
    }
    Ok(out)
}

pub fn encode_pool(model: &Model, pool: &[Vec<u32>]) -> Result<Vec<KnowledgeEmbedding>> {
    let mut g = Graph::new(&model.store);
    let summaries = encode_pools(&mut g, model, &[pool])?[0];
    let m = g.value(summaries);
    Ok(pool
        .iter()
        .enumerate()
        .map(|(i, doc)| KnowledgeEmbedding { index: i, summary: m.row(i).to_vec(), length: doc.len() })
        .collect())
}

pub fn encode_knowledge(model: &Model, doc: &[u32]) -> Result<KnowledgeEmbedding> {
    Ok(encode_pool(model, std::slice::from_ref(&doc.to_vec()))?.remove(0))
}
