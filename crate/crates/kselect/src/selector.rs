//! Bilinear selection policy over pool summaries plus the STOP key.

use kselect_core::policy;
use kselect_core::PolicyDistribution;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::knowledge::KnowledgeEmbedding;
use crate::model::Model;

/// `[keys; k_stop]` as an `(r + 1) × d` node.
pub fn keys_with_stop(g: &mut Graph, model: &Model, keys: Var) -> Var {
    let stop = g.param(model.k_stop);
    g.concat_rows(&[keys, stop])
}

/// `1 × (r + 1)` logits `v · W · k` for every key row.
pub fn policy_logits(g: &mut Graph, model: &Model, v: Var, keys_stop: Var) -> Var {
    let w = g.param(model.w);
    let vw = g.matmul(v, w);
    g.matmul_t(vw, keys_stop)
}

/// π(a|s) from plain vectors.
pub fn policy_distribution(
    model: &Model,
    v: &[f64],
    pool: &[KnowledgeEmbedding],
    selected: &[usize],
    allow_stop: bool,
) -> Result<PolicyDistribution> {
    let keys: Vec<Vec<f64>> = pool.iter().map(|k| k.summary.clone()).collect();
    Ok(policy::policy_distribution(
        v,
        model.store.value(model.w).data(),
        &keys,
        model.store.value(model.k_stop).data(),
        selected,
        allow_stop,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::tensor::Matrix;
    use kselect_core::Action;

    #[test]
    fn graph_logits_match_core_bilinear() {
        let m = Model::new(ModelConfig { d: 8, heads: 2, layers: 1, ffn: 8, vocab: 10, max_positions: 16, seed: 4, ..Default::default() })
            .unwrap();
        let v: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let keys: Vec<Vec<f64>> = (0..3).map(|j| (0..8).map(|i| ((i + j) % 5) as f64 - 2.0).collect()).collect();
        let mut g = Graph::new(&m.store);
        let vn = g.input(Matrix::row_vector(v.clone()));
        let kn = g.input(Matrix::from_vec(3, 8, keys.concat()));
        let ks = keys_with_stop(&mut g, &m, kn);
        let l = policy_logits(&mut g, &m, vn, ks);
        let expect = policy::bilinear_logits(&v, m.store.value(m.w).data(), &keys, m.store.value(m.k_stop).data());
        for (a, b) in g.value(l).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let pool: Vec<KnowledgeEmbedding> =
            keys.iter().enumerate().map(|(i, k)| KnowledgeEmbedding { index: i, summary: k.clone(), length: 1 }).collect();
        let dist = policy_distribution(&m, &v, &pool, &[0, 2], false).unwrap();
        assert_eq!(dist.probs(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(policy::greedy_action(&dist), Action::Select(1));
        assert!(matches!(
            policy_distribution(&m, &v, &pool, &[0, 1, 2], false),
            Err(crate::Error::Core(kselect_core::Error::EmptyActionSpace))
        ));
    }
}
