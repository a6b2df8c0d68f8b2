//! Staged selection episodes, the combined loss and the training loop.
//!
//! Stage `c` encodes the history plus the first `c` selected documents.
//! An episode with `o` actions runs stages `0..=o`; in training every stage
//! is decoded against the gold response, at inference only the last one.
//! The action taken at stage `c` is credited with the reward of stage
//! `c + 1` plus everything after it. A STOP at stage `c` adds no document,
//! ends the episode, and is credited with the reward of stage `c` itself.
//!
//! Episodes of a mini-batch advance stage by stage together, so every
//! stage is one packed encoder pass and one packed decoder pass.

use kselect_core::policy::{action_mask, greedy_action, random_action, sample_action};
use kselect_core::reward::{self, BaselineTable, CreditRule};
use kselect_core::{build_stage_input, tfidf, Action, DialogueSample, PolicyDistribution, StageInput};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Phase, TrainConfig};
use crate::dialogue::{self, GenerationLoss};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::knowledge;
use crate::model::{EncoderOutput, Model};
use crate::optim::AdamW;
use crate::params::Gradients;
use crate::selector;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Overrides for one episode: forced actions and, for training, fixed
/// advantages (both used to freeze an episode for gradient checks and
/// counterfactual queries).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Plan {
    pub actions: Option<Vec<Action>>,
    pub advantages: Option<Vec<f64>>,
}

impl Plan {
    pub fn forced(actions: Vec<Action>) -> Self {
        Plan { actions: Some(actions), advantages: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub stage: usize,
    pub selected_before: Vec<usize>,
    /// `v_c`.
    pub state: Vec<f64>,
    pub distribution: PolicyDistribution,
    pub action: Action,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeRecord {
    pub stage: usize,
    /// Teacher-forced loss; absent when the sample has no gold response.
    pub loss: Option<GenerationLoss>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeTrace {
    pub stages: Vec<StageRecord>,
    pub decodes: Vec<DecodeRecord>,
    /// Per-action rewards `exp(-PPL / gamma)` (training only).
    pub rewards: Vec<f64>,
    pub rewards_to_go: Vec<f64>,
    pub advantages: Vec<f64>,
    pub stopped_early: bool,
    /// 0-based positions in selection order.
    pub selected: Vec<usize>,
    pub weak_label: Option<usize>,
    /// Encoder states of the last stage (inference only).
    pub final_memory: Option<EncoderOutput>,
}

impl EpisodeTrace {
    pub fn num_decodes(&self) -> usize {
        self.decodes.len()
    }

    pub fn policy_evaluations(&self) -> usize {
        self.stages.len()
    }

    pub fn final_loss(&self) -> Option<GenerationLoss> {
        self.decodes.last().and_then(|d| d.loss)
    }

    pub fn mean_entropy(&self) -> Option<f64> {
        if self.stages.is_empty() {
            None
        } else {
            Some(self.stages.iter().map(|s| s.distribution.entropy()).sum::<f64>() / self.stages.len() as f64)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    /// Sum of stage NLLs.
    pub loss_u: f64,
    pub loss_k: f64,
    pub loss_s: f64,
    pub num_decodes: usize,
    pub total: f64,
}

impl LossBundle {
    /// `L_u′ / numDecodes + L_k + λ L_s`, with disabled terms zeroed.
    pub fn combine(loss_u: f64, loss_k: f64, loss_s: f64, num_decodes: usize, cfg: &TrainConfig) -> Self {
        let loss_k = if cfg.disable_rl { 0.0 } else { loss_k };
        let loss_s = if cfg.disable_weak { 0.0 } else { loss_s };
        let total = loss_u / num_decodes as f64 + loss_k + cfg.lambda * loss_s;
        LossBundle { loss_u, loss_k, loss_s, num_decodes, total }
    }
}

pub struct BatchOutput {
    pub traces: Vec<EpisodeTrace>,
    /// Training only.
    pub bundles: Vec<LossBundle>,
    /// Mean of the per-episode totals (training only).
    pub loss: Option<Var>,
}

struct Episode<'s> {
    sample: &'s DialogueSample,
    plan: Option<&'s Plan>,
    actions: usize,
    keys: Var,
    done: bool,
    trace: EpisodeTrace,
    nll: Vec<Var>,
    log_probs: Vec<Var>,
    weak: Option<Var>,
}

fn action_budget(sample: &DialogueSample, cfg: &TrainConfig, mode: Mode, plan: Option<&Plan>) -> Result<usize> {
    if let Some(actions) = plan.and_then(|p| p.actions.as_ref()) {
        return Ok(actions.len());
    }
    let r = sample.pool_size();
    match mode {
        Mode::Train if cfg.o > r && !cfg.enable_stop => {
            Err(Error::Config(format!("o = {} exceeds the pool size {r} and STOP is disabled", cfg.o)))
        }
        Mode::Infer if !cfg.enable_stop => Ok(cfg.o.min(r)),
        _ => Ok(cfg.o),
    }
}

/// Runs one episode per sample inside `g`. In training mode the returned
/// `loss` node is the batch mean of the per-episode totals; baselines are
/// read but not updated.
#[allow(clippy::too_many_arguments)]
pub fn run_batch<'s>(
    g: &mut Graph,
    model: &Model,
    samples: &[&'s DialogueSample],
    cfg: &TrainConfig,
    mode: Mode,
    baselines: &BaselineTable,
    rng: &mut ChaCha8Rng,
    plans: Option<&'s [Plan]>,
) -> Result<BatchOutput> {
    if let Some(p) = plans {
        assert_eq!(p.len(), samples.len(), "one plan per sample");
    }
    let train = mode == Mode::Train;
    for s in samples {
        match s.validate() {
            // inference on a live turn has no gold response to score
            Err(kselect_core::Error::Empty("response")) if !train => {}
            r => r?,
        }
    }
    let pools: Vec<&[Vec<u32>]> = samples.iter().map(|s| s.knowledge.as_slice()).collect();
    let summaries = knowledge::encode_pools(g, model, &pools)?;
    let mut eps = Vec::with_capacity(samples.len());
    for (i, (sample, keys)) in samples.iter().zip(summaries).enumerate() {
        let plan = plans.map(|p| &p[i]);
        let keys = if cfg.detach_policy_inputs { g.detach(keys) } else { keys };
        let keys = selector::keys_with_stop(g, model, keys);
        eps.push(Episode {
            sample,
            plan,
            actions: action_budget(sample, cfg, mode, plan)?,
            keys,
            done: false,
            trace: EpisodeTrace::default(),
            nll: Vec::new(),
            log_probs: Vec::new(),
            weak: None,
        });
    }

    let mut c = 0;
    loop {
        let active: Vec<usize> = (0..eps.len()).filter(|&i| !eps[i].done).collect();
        if active.is_empty() {
            break;
        }
        let inputs: Vec<StageInput> = active
            .iter()
            .map(|&i| build_stage_input(eps[i].sample, &eps[i].trace.selected, &cfg.lengths))
            .collect::<kselect_core::Result<_>>()?;
        let refs: Vec<&StageInput> = inputs.iter().collect();
        let enc = dialogue::encode_stages(g, model, &refs)?;
        let mut decode_now = Vec::new();
        for (j, &i) in active.iter().enumerate() {
            let ep = &mut eps[i];
            if c < ep.actions {
                let r = ep.sample.pool_size();
                let v = enc.first_token_state(g, j);
                let v_in = if cfg.detach_policy_inputs { g.detach(v) } else { v };
                let logits = selector::policy_logits(g, model, v_in, ep.keys);
                let mask = action_mask(r, &ep.trace.selected, cfg.enable_stop && c > 0);
                let dist = PolicyDistribution::from_logits(g.value(logits).data(), mask.clone())?;
                let action = match ep.plan.and_then(|p| p.actions.as_ref()) {
                    Some(forced) => {
                        let a = forced[c];
                        if !mask[a.slot(r)] {
                            return Err(kselect_core::Error::Precondition(format!("forced action {a:?} is not selectable")).into());
                        }
                        a
                    }
                    None if !train => greedy_action(&dist),
                    None if cfg.disable_rl => random_action(&mask, rng)?,
                    None => sample_action(&dist, rng),
                };
                if train && c == 0 && !cfg.disable_weak {
                    let label = tfidf::weak_label(&ep.sample.response, &ep.sample.knowledge);
                    ep.trace.weak_label = Some(label);
                    ep.weak = Some(g.log_softmax_pick_masked(logits, &mask, label));
                }
                if train && !cfg.disable_rl {
                    ep.log_probs.push(g.log_softmax_pick_masked(logits, &mask, action.slot(r)));
                }
                ep.trace.stages.push(StageRecord {
                    stage: c,
                    selected_before: ep.trace.selected.clone(),
                    state: g.value(v).data().to_vec(),
                    log_prob: dist.log_prob(action),
                    distribution: dist,
                    action,
                });
                match action {
                    Action::Select(a) => ep.trace.selected.push(a),
                    Action::Stop => ep.trace.stopped_early = true,
                }
            }
            let finishing = c >= ep.actions || ep.trace.stopped_early;
            if train || finishing {
                decode_now.push(j);
            }
            if finishing {
                ep.done = true;
                if !train {
                    let s = enc.seqs[j];
                    ep.trace.final_memory = Some(EncoderOutput { states: g.value(enc.states).slice_rows(s.start, s.len) });
                }
            }
        }
        let scored: Vec<usize> = decode_now.iter().copied().filter(|&j| !eps[active[j]].sample.response.is_empty()).collect();
        let golds: Vec<&[u32]> = scored.iter().map(|&j| eps[active[j]].sample.response.as_slice()).collect();
        let nodes = if scored.is_empty() { Vec::new() } else { dialogue::generation_loss_nodes(g, model, &enc, &scored, &golds)? };
        let mut nodes = scored.iter().zip(nodes).peekable();
        for &j in &decode_now {
            let ep = &mut eps[active[j]];
            let loss = match nodes.peek() {
                Some(&(&sj, node)) if sj == j => {
                    nodes.next();
                    ep.nll.push(node);
                    Some(GenerationLoss::from_nll(g.scalar(node), ep.sample.response.len() + 1))
                }
                _ => None,
            };
            ep.trace.decodes.push(DecodeRecord { stage: c, loss });
        }
        c += 1;
    }

    if !train {
        return Ok(BatchOutput { traces: eps.into_iter().map(|e| e.trace).collect(), bundles: Vec::new(), loss: None });
    }

    let batch = eps.len() as f64;
    let rule = CreditRule { episode_reward: cfg.episode_reward, use_baseline: cfg.use_baseline };
    let mut terms = Vec::new();
    let mut bundles = Vec::with_capacity(eps.len());
    for ep in &mut eps {
        let ppl_at = |stage: usize| ep.trace.decodes.iter().find(|d| d.stage == stage).and_then(|d| d.loss).map(|l| l.ppl);
        let ppls: Vec<f64> = ep
            .trace
            .stages
            .iter()
            .map(|s| match s.action {
                Action::Select(_) => ppl_at(s.stage + 1),
                Action::Stop => ppl_at(s.stage),
            })
            .collect::<Option<_>>()
            .ok_or_else(|| Error::Diverged { step: 0 })?;
        if ppls.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { step: 0 });
        }
        let trace = &mut ep.trace;
        trace.rewards = ppls.iter().map(|&p| reward::stage_reward(p, cfg.gamma)).collect();
        trace.rewards_to_go = reward::rewards_to_go(&ppls, cfg.gamma)?;
        trace.advantages = match ep.plan.and_then(|p| p.advantages.clone()) {
            Some(a) => a,
            None => reward::advantages(&trace.rewards_to_go, baselines, rule),
        };
        let nd = ep.nll.len();
        let loss_u: f64 = ep.nll.iter().map(|&n| g.scalar(n)).sum();
        let log_probs: Vec<f64> = ep.log_probs.iter().map(|&n| g.scalar(n)).collect();
        let loss_k = reward::policy_loss_value(&log_probs, &trace.advantages);
        let loss_s = ep.weak.map_or(0.0, |w| -g.scalar(w));
        bundles.push(LossBundle::combine(loss_u, loss_k, loss_s, nd, cfg));
        terms.extend(ep.nll.iter().map(|&n| (n, 1.0 / (nd as f64 * batch))));
        terms.extend(ep.log_probs.iter().zip(&trace.advantages).map(|(&n, a)| (n, -a / batch)));
        if let Some(w) = ep.weak {
            terms.push((w, -cfg.lambda / batch));
        }
    }
    let loss = g.weighted_sum(&terms);
    Ok(BatchOutput { traces: eps.into_iter().map(|e| e.trace).collect(), bundles, loss: Some(loss) })
}

/// Inference episodes (greedy selection, single final decode).
pub fn infer(model: &Model, samples: &[&DialogueSample], cfg: &TrainConfig, plans: Option<&[Plan]>) -> Result<Vec<EpisodeTrace>> {
    let mut g = Graph::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(run_batch(&mut g, model, samples, cfg, Mode::Infer, &BaselineTable::new(cfg.baseline_decay), &mut rng, plans)?.traces)
}

/// Loss and gradients of one training batch without updating anything.
/// `dropout_seed` of `None` disables dropout.
pub fn batch_gradients(
    model: &Model,
    samples: &[&DialogueSample],
    cfg: &TrainConfig,
    baselines: &BaselineTable,
    rng: &mut ChaCha8Rng,
    plans: Option<&[Plan]>,
    dropout_seed: Option<u64>,
) -> Result<(f64, Gradients, Vec<EpisodeTrace>, Vec<LossBundle>)> {
    let mut g = match dropout_seed {
        Some(seed) => Graph::training(&model.store, ChaCha8Rng::seed_from_u64(seed)),
        None => Graph::new(&model.store),
    };
    let out = run_batch(&mut g, model, samples, cfg, Mode::Train, baselines, rng, plans)?;
    let loss = out.loss.expect("training loss");
    let value = g.scalar(loss);
    let grads = g.backward(loss);
    Ok((value, grads, out.traces, out.bundles))
}

/// Per-epoch training summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss_u: f64,
    pub loss_k: f64,
    pub loss_s: f64,
    pub mean_reward: f64,
    pub selection_entropy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub selection_recall: Option<f64>,
}

/// Fraction of gold positions among `selected`.
pub fn recall(selected: &[usize], gold: &[usize]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    gold.iter().filter(|g| selected.contains(g)).count() as f64 / gold.len() as f64
}

/// Fraction of `selected` that is gold.
pub fn precision(selected: &[usize], gold: &[usize]) -> f64 {
    if selected.is_empty() {
        return 0.0;
    }
    selected.iter().filter(|s| gold.contains(s)).count() as f64 / selected.len() as f64
}

#[derive(Default)]
struct EpochStats {
    n: usize,
    loss_u: f64,
    loss_k: f64,
    loss_s: f64,
    reward: f64,
    entropy: f64,
    entropy_n: usize,
    recall: f64,
    recall_n: usize,
}

impl EpochStats {
    fn add(&mut self, sample: &DialogueSample, trace: &EpisodeTrace, bundle: &LossBundle) {
        self.n += 1;
        self.loss_u += bundle.loss_u;
        self.loss_k += bundle.loss_k;
        self.loss_s += bundle.loss_s;
        self.reward += trace.rewards_to_go.first().copied().unwrap_or(0.0);
        for s in &trace.stages {
            self.entropy += s.distribution.entropy();
            self.entropy_n += 1;
        }
        if let Some(gold) = &sample.gold_knowledge {
            self.recall += recall(&trace.selected, gold);
            self.recall_n += 1;
        }
    }

    fn report(&self, epoch: usize) -> EpochReport {
        let n = self.n.max(1) as f64;
        EpochReport {
            epoch,
            loss_u: self.loss_u / n,
            loss_k: self.loss_k / n,
            loss_s: self.loss_s / n,
            mean_reward: self.reward / n,
            selection_entropy: self.entropy / self.entropy_n.max(1) as f64,
            selection_recall: (self.recall_n > 0).then(|| self.recall / self.recall_n as f64),
        }
    }
}

/// Optimizer, baselines and random streams around a model.
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub baselines: BaselineTable,
    optimizer: AdamW,
    step: usize,
    shuffle_rng: ChaCha8Rng,
    action_rng: ChaCha8Rng,
}

/// What one optimization step produced.
pub struct StepOutcome {
    pub loss: f64,
    pub traces: Vec<EpisodeTrace>,
    pub bundles: Vec<LossBundle>,
    pub phase: Option<Phase>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(1);
        let mut action_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        action_rng.set_stream(2);
        Ok(Trainer {
            optimizer: AdamW::new(cfg.learning_rate, cfg.weight_decay),
            baselines: BaselineTable::new(cfg.baseline_decay),
            model,
            cfg,
            step: 0,
            shuffle_rng,
            action_rng,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One update on `batch`: forward all episodes, average their totals,
    /// backpropagate, apply AdamW to the parameter groups active in this
    /// step's phase, then fold the episodes into the baselines.
    pub fn optimization_step(&mut self, batch: &[&DialogueSample]) -> Result<StepOutcome> {
        let phase = self.cfg.phase(self.step);
        let dropout_seed = self.cfg.seed ^ (self.step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let step = self.step;
        let (loss, grads, traces, bundles) =
            batch_gradients(&self.model, batch, &self.cfg, &self.baselines, &mut self.action_rng, None, Some(dropout_seed))
                .map_err(|e| match e {
                    Error::Diverged { .. } => Error::Diverged { step },
                    other => other,
                })?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged { step });
        }
        self.optimizer.step(&mut self.model.store, &grads, |group| match phase {
            None => true,
            Some(Phase::Generator) => group.is_generator(),
            Some(Phase::Selector) => !group.is_generator(),
        });
        for t in &traces {
            self.baselines.observe(&t.rewards_to_go);
        }
        self.step += 1;
        Ok(StepOutcome { loss, traces, bundles, phase })
    }

    /// One pass over `corpus` in a seeded shuffled order.
    pub fn train_epoch(&mut self, corpus: &[DialogueSample], epoch: usize) -> Result<EpochReport> {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let mut stats = EpochStats::default();
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&DialogueSample> = chunk.iter().map(|&i| &corpus[i]).collect();
            let out = self.optimization_step(&batch)?;
            for ((s, t), b) in batch.iter().zip(&out.traces).zip(&out.bundles) {
                stats.add(s, t, b);
            }
        }
        Ok(stats.report(epoch))
    }
}

/// Trains for `cfg.epochs` epochs, calling `on_epoch` after each.
pub fn train(
    model: Model,
    corpus: &[DialogueSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<(Model, Vec<EpochReport>)> {
    if corpus.is_empty() {
        return Err(kselect_core::Error::Empty("training corpus").into());
    }
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let report = trainer.train_epoch(corpus, epoch)?;
        on_epoch(&report);
        reports.push(report);
    }
    Ok((trainer.model, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::params::Group;
    use crate::tensor::Matrix;

    fn cfg(o: usize) -> TrainConfig {
        TrainConfig {
            o,
            model: ModelConfig { d: 16, layers: 2, heads: 4, ffn: 32, vocab: 40, max_positions: 128, dropout: 0.0, seed: 3, ..Default::default() },
            learning_rate: 1e-3,
            batch_size: 2,
            ..Default::default()
        }
    }

    fn samples() -> Vec<DialogueSample> {
        (0..4u32)
            .map(|k| DialogueSample {
                history: vec![vec![5 + k, 6]],
                knowledge: vec![vec![10, 11 + k], vec![20, 21], vec![30, 31, 32], vec![12 + k, 13]],
                response: vec![7, 11 + k, 13],
                gold_knowledge: Some(vec![0, 3]),
            })
            .collect()
    }

    fn model(c: &TrainConfig) -> Model {
        Model::new(c.model.clone()).unwrap()
    }

    fn grads(m: &Model, c: &TrainConfig, s: &[&DialogueSample], plans: Option<&[Plan]>) -> (f64, Gradients, Vec<EpisodeTrace>, Vec<LossBundle>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        batch_gradients(m, s, c, &BaselineTable::new(0.95), &mut rng, plans, None).unwrap()
    }

    fn group_norm(m: &Model, g: &Gradients, group: Group) -> f64 {
        g.group_norm_sq(&m.store, group)
    }

    #[test]
    fn single_action_episode() {
        let c = cfg(1);
        let m = model(&c);
        let data = samples();
        let (_, _, traces, bundles) = grads(&m, &c, &[&data[0]], None);
        let t = &traces[0];
        assert_eq!(t.policy_evaluations(), 1);
        assert_eq!(t.num_decodes(), 2);
        assert_eq!(bundles[0].num_decodes, 2);
        let ppl1 = t.decodes[1].loss.unwrap().ppl;
        assert!((t.rewards_to_go[0] - (-ppl1 / 10.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn inference_decodes_once() {
        let c = cfg(3);
        let m = model(&c);
        let data = samples();
        let refs: Vec<&DialogueSample> = data.iter().collect();
        for t in infer(&m, &refs, &c, None).unwrap() {
            assert_eq!(t.policy_evaluations(), 3);
            assert_eq!(t.num_decodes(), 1);
            assert_eq!(t.decodes[0].stage, 3);
            assert!(t.final_memory.is_some());
            let mut sel = t.selected.clone();
            sel.sort();
            sel.dedup();
            assert_eq!(sel.len(), 3);
        }
        // inference clamps o to the pool size
        let t = &infer(&m, &refs[..1], &cfg(9), None).unwrap()[0];
        assert_eq!(t.policy_evaluations(), 4);
        // training refuses it without STOP
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(batch_gradients(&m, &refs[..1], &cfg(9), &BaselineTable::new(0.9), &mut rng, None, None).is_err());
    }

    #[test]
    fn combined_loss_arithmetic() {
        let c = TrainConfig { lambda: 0.3, ..Default::default() };
        let b = LossBundle::combine(4.2, 0.15, 0.693147, 3, &c);
        assert!((b.total - 1.75794).abs() < 1e-5);
        let b0 = LossBundle::combine(4.2, 0.15, 0.693147, 3, &TrainConfig { lambda: 0.0, ..Default::default() });
        assert_eq!(b0.total, 4.2 / 3.0 + 0.15);
    }

    #[test]
    fn bundles_match_graph_loss() {
        let c = cfg(2);
        let m = model(&c);
        let data = samples();
        let refs: Vec<&DialogueSample> = data.iter().collect();
        let (loss, _, traces, bundles) = grads(&m, &c, &refs, None);
        let mean = bundles.iter().map(|b| b.total).sum::<f64>() / bundles.len() as f64;
        assert!((loss - mean).abs() < 1e-12);
        for (t, b) in traces.iter().zip(&bundles) {
            assert_eq!(t.num_decodes(), 3);
            assert_eq!(b.num_decodes, 3);
            for w in t.rewards_to_go.windows(2) {
                assert!(w[0] >= w[1]);
            }
            assert!(t.rewards.iter().all(|&r| r > 0.0 && r <= (-0.1f64).exp()));
        }
    }

    #[test]
    fn disable_rl_leaves_policy_without_gradient() {
        let data = samples();
        let refs: Vec<&DialogueSample> = data.iter().collect();
        let c = TrainConfig { disable_rl: true, disable_weak: true, ..cfg(2) };
        let m = model(&c);
        let (_, g, _, b) = grads(&m, &c, &refs, None);
        assert_eq!(group_norm(&m, &g, Group::Policy), 0.0);
        assert!(b.iter().all(|b| b.loss_k == 0.0 && b.loss_s == 0.0));
        let c = TrainConfig { disable_rl: true, ..cfg(2) };
        let (_, g, _, _) = grads(&m, &c, &refs, None);
        assert!(group_norm(&m, &g, Group::Policy) > 0.0);
    }

    #[test]
    fn policy_loss_reaches_knowledge_encoder() {
        let data = samples();
        let refs: Vec<&DialogueSample> = data.iter().collect();
        let c = TrainConfig { disable_weak: true, ..cfg(2) };
        let m = model(&c);
        let (_, g, traces, _) = grads(&m, &c, &refs, None);
        assert!(traces.iter().any(|t| t.advantages.iter().any(|&a| a != 0.0)));
        assert!(group_norm(&m, &g, Group::KnowledgeEncoder) > 0.0);
        assert!(group_norm(&m, &g, Group::Policy) > 0.0);
        // detached inputs: the knowledge encoder hears nothing from L_k
        let c = TrainConfig { detach_policy_inputs: true, ..c };
        let (_, g, _, _) = grads(&m, &c, &refs, None);
        assert_eq!(group_norm(&m, &g, Group::KnowledgeEncoder), 0.0);
    }

    #[test]
    fn zero_advantages_zero_policy_gradient() {
        let data = samples();
        let c = TrainConfig { disable_weak: true, ..cfg(2) };
        let m = model(&c);
        let plans = [Plan { actions: Some(vec![Action::Select(1), Action::Select(0)]), advantages: Some(vec![0.0, 0.0]) }];
        let (_, g, _, b) = grads(&m, &c, &[&data[0]], Some(&plans));
        assert_eq!(b[0].loss_k, 0.0);
        assert!(group_norm(&m, &g, Group::Policy) == 0.0);
    }

    #[test]
    fn episode_reward_matches_per_action_at_one_step() {
        let data = samples();
        let refs: Vec<&DialogueSample> = data.iter().collect();
        let m = model(&cfg(1));
        let (_, _, _, a) = grads(&m, &cfg(1), &refs, None);
        let (_, _, _, b) = grads(&m, &TrainConfig { episode_reward: true, ..cfg(1) }, &refs, None);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.loss_k, y.loss_k);
        }
    }

    #[test]
    fn weak_loss_uses_stage_zero() {
        let data = samples();
        let c = TrainConfig { disable_rl: true, ..cfg(2) };
        let m = model(&c);
        let (_, _, t, b) = grads(&m, &c, &[&data[1]], None);
        let label = t[0].weak_label.unwrap();
        assert_eq!(label, tfidf::weak_label(&data[1].response, &data[1].knowledge));
        let p = t[0].stages[0].distribution.probs()[label];
        assert!((b[0].loss_s + p.ln()).abs() < 1e-12);
    }

    #[test]
    fn separate_training_freezes_inactive_groups() {
        let data = samples();
        let refs: Vec<&DialogueSample> = data.iter().collect();
        let c = TrainConfig { separate_training: true, ..cfg(2) };
        let mut trainer = Trainer::new(model(&c), c).unwrap();
        for expected in [Phase::Generator, Phase::Selector, Phase::Generator] {
            let before = trainer.model.store.clone();
            let out = trainer.optimization_step(&refs[..2]).unwrap();
            assert_eq!(out.phase, Some(expected));
            for (id, p) in trainer.model.store.iter() {
                let old = before.value(id);
                let active = p.group.is_generator() == (expected == Phase::Generator);
                if active {
                    assert_ne!(&p.value, old, "{} should move", p.name);
                } else {
                    assert_eq!(&p.value, old, "{} should be frozen", p.name);
                }
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = samples();
        let c = TrainConfig { epochs: 2, model: ModelConfig { dropout: 0.1, ..cfg(2).model }, ..cfg(2) };
        let (a, ra) = train(model(&c), &data, &c, |_| {}).unwrap();
        let (b, rb) = train(model(&c), &data, &c, |_| {}).unwrap();
        assert_eq!(a.store, b.store);
        assert_eq!(ra, rb);
        assert_ne!(a.store, model(&c).store);
        assert_eq!(ra.len(), 2);
        assert!(ra[0].selection_recall.is_some());
    }

    #[test]
    fn stop_ends_the_episode() {
        let data = samples();
        let c = TrainConfig { enable_stop: true, ..cfg(3) };
        let m = model(&c);
        let plans = [Plan::forced(vec![Action::Select(2), Action::Stop])];
        let (_, _, t, b) = grads(&m, &c, &[&data[0]], Some(&plans));
        let t = &t[0];
        assert!(t.stopped_early);
        assert_eq!(t.selected, vec![2]);
        assert_eq!(t.num_decodes(), 2);
        assert_eq!(b[0].num_decodes, 2);
        let ppl1 = t.decodes[1].loss.unwrap().ppl;
        assert_eq!(t.rewards.len(), 2);
        assert!(t.rewards.iter().all(|r| (r - (-ppl1 / 10.0).exp()).abs() < 1e-15));
        // STOP is never offered at the first stage
        let plans = [Plan::forced(vec![Action::Stop])];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(batch_gradients(&m, &[&data[0]], &c, &BaselineTable::new(0.9), &mut rng, Some(&plans), None).is_err());
    }

    #[test]
    fn full_loss_gradient_matches_differences() {
        let data = samples();
        let c = TrainConfig { enable_stop: true, lambda: 0.5, ..cfg(2) };
        let mut m = model(&c);
        let plans = [Plan { actions: Some(vec![Action::Select(3), Action::Stop]), advantages: Some(vec![0.3, -0.2]) }];
        let (_, g, _, _) = grads(&m, &c, &[&data[2]], Some(&plans));
        let ids: Vec<_> = m.store.iter().map(|(id, _)| id).collect();
        let mut checked = 0;
        for (n, id) in ids.into_iter().enumerate() {
            let k = (n * 31) % m.store.value(id).data().len();
            let orig = m.store.value(id).data()[k];
            let eval = |m: &mut Model, x: f64| {
                m.store.value_mut(id).data_mut()[k] = x;
                grads(m, &c, &[&data[2]], Some(&plans)).0
            };
            let eps = 1e-3;
            let fd = (eval(&mut m, orig + eps) - eval(&mut m, orig - eps)) / (2.0 * eps);
            m.store.value_mut(id).data_mut()[k] = orig;
            let a = g.get(id).map_or(0.0, |x| x.data()[k]);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-3 || (a - fd).abs() < 1e-9, "{}: {a} vs {fd}", m.store.param(id).name);
            checked += 1;
        }
        assert!(checked > 50);
    }

    #[test]
    fn baseline_keeps_gradient_unbiased() {
        // frozen four-way policy; compare per-draw gradients wrt the logits
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = crate::params::ParamStore::new();
        let id = store.add(Group::Policy, "logits", 1, 4, crate::params::Init::Zeros, &mut rng);
        store.value_mut(id).data_mut().copy_from_slice(&[0.2, -0.4, 0.9, 0.0]);
        let dist = PolicyDistribution::from_logits(store.value(id).data(), vec![true; 4]).unwrap();
        let reward = [0.5, 0.1, 0.3, 0.8];
        let b = 0.4;
        let n = 10_000;
        let mut diffs = vec![Vec::with_capacity(n); 4];
        let mut plain_mean = [0.0; 4];
        for _ in 0..n {
            let a = sample_action(&dist, &mut rng).slot(3);
            let grad = |adv: f64| {
                let mut g = Graph::new(&store);
                let l = g.param(id);
                let lp = g.log_softmax_pick_masked(l, &[true; 4], a);
                let loss = g.weighted_sum(&[(lp, -adv)]);
                g.backward(loss).get(id).unwrap().clone()
            };
            let plain: Matrix = grad(reward[a]);
            let based = grad(reward[a] - b);
            for j in 0..4 {
                plain_mean[j] += plain.data()[j] / n as f64;
                diffs[j].push(based.data()[j] - plain.data()[j]);
            }
        }
        for d in &diffs {
            let mean = d.iter().sum::<f64>() / n as f64;
            let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
        }
        assert!(plain_mean.iter().any(|x| x.abs() > 1e-3));
    }
}
