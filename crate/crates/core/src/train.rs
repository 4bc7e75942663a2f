//! Per-expert training stages (mid-training, SFT with anchor mixing, RLVR),
//! AdamW and learning-rate schedules.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::{Checkpoint, StageRecord};
use crate::config::{names, MoeModelConfig, ParamKind};
use crate::cost::{CostAction, CostEvent};
use crate::domains::{DomainSpec, Example, Vocab};
use crate::error::{Error, Result};
use crate::model::{self, Routing};
use crate::params::{apply_freeze, stage_mask, FreezeMask, ParamStore, StageKind};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Schedule {
    Constant,
    Cosine { warmup_steps: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stage: StageKind,
    pub steps: usize,
    pub batch_size: usize,
    /// Sequence length of mid-training corpus windows.
    pub seq_len: usize,
    pub lr: f64,
    pub schedule: Schedule,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Probability that an SFT example is drawn from anchor data.
    #[serde(default)]
    pub mix_ratio: f64,
    /// Multiplies `lr` for embeddings, attention, norms and LM head.
    #[serde(default = "one")]
    pub shared_lr_scale: f64,
    #[serde(default = "default_group")]
    pub rl_group_size: usize,
    #[serde(default = "default_temperature")]
    pub rl_temperature: f64,
    #[serde(default = "default_max_new")]
    pub max_new_tokens: usize,
    pub seed: u64,
}

fn default_group() -> usize {
    8
}

fn default_temperature() -> f64 {
    1.0
}

fn one() -> f64 {
    1.0
}

fn default_max_new() -> usize {
    12
}

impl StagePlan {
    pub fn new(stage: StageKind, steps: usize, batch_size: usize, lr: f64, seed: u64) -> Self {
        Self {
            stage,
            steps,
            batch_size,
            seq_len: 24,
            lr,
            schedule: Schedule::Constant,
            weight_decay: 0.0,
            grad_clip: Some(1.0),
            mix_ratio: 0.0,
            shared_lr_scale: 1.0,
            rl_group_size: default_group(),
            rl_temperature: default_temperature(),
            max_new_tokens: default_max_new(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Schedule::Cosine { warmup_steps } = self.schedule {
            if warmup_steps > self.steps {
                return Err(Error::Config(format!(
                    "warmup {warmup_steps} exceeds steps {}",
                    self.steps
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::Config(format!("mix_ratio {} outside [0, 1]", self.mix_ratio)));
        }
        if self.rl_group_size < 2 {
            return Err(Error::Config("rl_group_size must be at least 2".into()));
        }
        if self.batch_size == 0 || self.seq_len < 2 {
            return Err(Error::Config("batch_size and seq_len must be positive".into()));
        }
        if !(self.shared_lr_scale >= 0.0 && self.shared_lr_scale.is_finite()) {
            return Err(Error::Config("shared_lr_scale must be finite and non-negative".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.rl_temperature <= 0.0 {
            return Err(Error::Config("lr must be finite and temperature positive".into()));
        }
        Ok(())
    }
}

/// Learning rate for 0-based update `step`. Cosine warms up linearly to
/// the base rate at `step == warmup_steps`, then decays to zero at
/// `step == steps`.
pub fn lr_at(plan: &StagePlan, step: usize) -> f64 {
    match plan.schedule {
        Schedule::Constant => plan.lr,
        Schedule::Cosine { warmup_steps } => {
            if step < warmup_steps {
                return plan.lr * (step + 1) as f64 / (warmup_steps + 1) as f64;
            }
            let span = (plan.steps - warmup_steps).max(1) as f64;
            let progress = ((step - warmup_steps) as f64 / span).min(1.0);
            plan.lr * 0.5 * (1.0 + (PI * progress).cos())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier for shared parameters.
    pub shared_lr_scale: f64,
    /// Token ids from here on were registered by a domain; their embedding
    /// rows and LM-head columns belong to that domain alone and skip
    /// `shared_lr_scale`.
    pub registered_from: Option<usize>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay,
            shared_lr_scale: 1.0,
            registered_from: None,
        }
    }
}

/// Moment buffers; entries exist only for parameters that were trainable
/// when stepped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn has_moments(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    pub fn n_tracked(&self) -> usize {
        self.moments.len()
    }
}

/// One AdamW update of every unfrozen parameter. Missing gradients count
/// as zero; decay applies only to matrix weights.
pub fn optimizer_step(
    store: &mut ParamStore,
    state: &mut OptimizerState,
    grads: &BTreeMap<String, Vec<f64>>,
    lr: f64,
    hp: &AdamW,
) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (name, p) in store.iter_mut() {
        if p.frozen {
            continue;
        }
        let n = p.tensor.len();
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let decay = if ParamKind::of(name).decays() {
            hp.weight_decay
        } else {
            0.0
        };
        let scaled = if ParamKind::of(name).is_shared() { lr * hp.shared_lr_scale } else { lr };
        let shape = p.tensor.shape().to_vec();
        let registered = |i: usize| match (hp.registered_from, name.as_str()) {
            (Some(from), names::TOK_EMBED) => i / shape[1] >= from,
            (Some(from), names::LM_HEAD) => i % shape[1] >= from,
            _ => false,
        };
        let g = grads.get(name);
        for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let lr = if registered(i) { lr } else { scaled };
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * gi;
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * gi * gi;
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + hp.eps);
            *w -= lr * (update + decay * *w);
        }
    }
}

/// One sequence of a batch: next-token targets with per-position loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
}

impl BatchItem {
    /// Shifts `seq` by one; positions whose target index is below
    /// `first_target` get weight 0, the rest `weight`.
    pub fn from_sequence(seq: &[usize], first_target: usize, weight: f64) -> Self {
        let inputs = seq[..seq.len() - 1].to_vec();
        let targets = seq[1..].to_vec();
        let weights = (1..seq.len())
            .map(|i| if i >= first_target { weight } else { 0.0 })
            .collect();
        Self {
            inputs,
            targets,
            weights,
        }
    }

    pub fn n_targets(&self) -> usize {
        self.weights.iter().filter(|&&w| w != 0.0).count()
    }
}

/// `sum_i weighted_nll(item_i)` and its gradient for every trainable parameter.
pub fn loss_and_grads(
    store: &ParamStore,
    config: &MoeModelConfig,
    routing: Routing,
    items: &[BatchItem],
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars = model::bind_params(&mut tape, store, true);
    let mut total = None;
    for item in items {
        let (logits, _) = model::forward_bound(&mut tape, &vars, config, &item.inputs, routing)?;
        let l = tape.weighted_nll(logits, &item.targets, &item.weights)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::Empty("batch".into()))?;
    let loss = tape.value(total).data()[0];
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("loss is {loss}")));
    }
    let mut g = tape.backward(total);
    let mut grads = BTreeMap::new();
    for (name, v) in vars {
        if let Some(gv) = g.take(v) {
            if gv.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient for {name}")));
            }
            grads.insert(name, gv);
        }
    }
    Ok((loss, grads))
}

fn sq_norm(grads: &BTreeMap<String, Vec<f64>>, select: impl Fn(&str) -> bool) -> f64 {
    grads
        .iter()
        .filter(|(n, _)| select(n))
        .flat_map(|(_, g)| g.iter())
        .map(|x| x * x)
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetric {
    pub step: usize,
    pub stage: String,
    pub loss_or_reward: f64,
    pub lr: f64,
    #[serde(skip)]
    pub shared_grad_norm: f64,
    #[serde(skip)]
    pub expert_grad_norm: f64,
}

pub fn write_metrics_csv(metrics: &[StepMetric], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}

pub struct StageOutput {
    pub model: Checkpoint,
    pub events: Vec<CostEvent>,
    pub metrics: Vec<StepMetric>,
    /// Tokens forwarded through the model by this stage.
    pub tokens: u64,
}

impl StageOutput {
    pub fn values(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.loss_or_reward).collect()
    }
}

/// Routing used while training a single expert: a 2-expert MoE with an
/// anchor sends every token to the domain slot; anything else uses its router
/// (or the dense path).
pub fn stage_routing(config: &MoeModelConfig) -> Routing {
    match (config.n_experts, config.anchor_index) {
        (2, Some(a)) => Routing::Override(1 - a),
        _ => Routing::Learned,
    }
}

fn prepare(model: &mut Checkpoint, plan: &StagePlan, expected: StageKind, mask: Option<&FreezeMask>) -> Result<()> {
    plan.validate()?;
    if plan.stage != expected {
        return Err(Error::Config(format!(
            "plan is for stage {}, expected {expected}",
            plan.stage
        )));
    }
    let mask = match mask {
        Some(m) => m.clone(),
        None => stage_mask(expected, &model.config)?,
    };
    apply_freeze(&mut model.params, &mask)
}

struct StepBatch {
    items: Vec<BatchItem>,
    tokens: u64,
    reward: Option<f64>,
}

fn run_steps(
    model: &mut Checkpoint,
    plan: &StagePlan,
    routing: Routing,
    mut make_batch: impl FnMut(usize, &mut ChaCha8Rng, &ParamStore) -> Result<StepBatch>,
) -> Result<(Vec<StepMetric>, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut opt = OptimizerState::default();
    let hp = AdamW {
        shared_lr_scale: plan.shared_lr_scale,
        registered_from: Some(Vocab::base().len()),
        ..AdamW::new(plan.weight_decay)
    };
    let mut metrics = Vec::with_capacity(plan.steps);
    let mut tokens = 0u64;
    for step in 0..plan.steps {
        let lr = lr_at(plan, step);
        let batch = make_batch(step, &mut rng, &model.params)?;
        tokens += batch.tokens;
        let active = batch.items.iter().any(|i| i.n_targets() > 0);
        let (loss, shared, expert) = if active {
            let (loss, mut grads) = loss_and_grads(&model.params, &model.config, routing, &batch.items)?;
            let shared = sq_norm(&grads, crate::params::is_shared).sqrt();
            let expert = sq_norm(&grads, |n| matches!(ParamKind::of(n), ParamKind::ExpertFfn(_))).sqrt();
            if let Some(clip) = plan.grad_clip {
                let norm = sq_norm(&grads, |_| true).sqrt();
                if norm > clip {
                    let s = clip / norm;
                    grads.values_mut().flatten().for_each(|x| *x *= s);
                }
            }
            optimizer_step(&mut model.params, &mut opt, &grads, lr, &hp);
            (loss, shared, expert)
        } else {
            (0.0, 0.0, 0.0)
        };
        metrics.push(StepMetric {
            step,
            stage: plan.stage.to_string(),
            loss_or_reward: batch.reward.unwrap_or(loss),
            lr,
            shared_grad_norm: shared,
            expert_grad_norm: expert,
        });
    }
    Ok((metrics, tokens))
}

fn finish(
    mut model: Checkpoint,
    plan: &StagePlan,
    action: CostAction,
    domain: &str,
    metrics: Vec<StepMetric>,
    tokens: u64,
) -> StageOutput {
    model.history.push(StageRecord::new(
        plan.stage.to_string(),
        domain,
        plan.steps as u64,
        tokens,
        plan.seed,
    ));
    StageOutput {
        model,
        events: vec![CostEvent::new(action, domain, tokens)],
        metrics,
        tokens,
    }
}

/// Next-token training on the domain corpus.
///
/// `mask == None` applies the stage's own freeze mask, which requires a
/// 2-expert MoE with an anchor slot.
pub fn midtrain(
    mut model: Checkpoint,
    domain: &DomainSpec,
    vocab: &Vocab,
    plan: &StagePlan,
    mask: Option<&FreezeMask>,
) -> Result<StageOutput> {
    if !domain.has_corpus() {
        return Err(Error::Empty(format!("{} has no corpus", domain.name)));
    }
    if mask.is_none() && model.config.is_dense() {
        return Err(Error::Config("midtrain needs a 2-expert MoE with an anchor".into()));
    }
    prepare(&mut model, plan, StageKind::Midtrain, mask)?;
    let routing = stage_routing(&model.config);
    let pad = vocab.pad();
    let base = plan.seed << 32;
    let (metrics, tokens) = run_steps(&mut model, plan, routing, |step, _, _| {
        let mut items = Vec::with_capacity(plan.batch_size);
        let mut n = 0usize;
        for b in 0..plan.batch_size {
            let idx = base + (step * plan.batch_size + b) as u64;
            let seq = domain.corpus_sequence(vocab, idx, plan.seq_len);
            let mut item = BatchItem::from_sequence(&seq, 1, 1.0);
            for (w, &t) in item.weights.iter_mut().zip(&item.targets) {
                if t == pad {
                    *w = 0.0;
                }
            }
            n += item.n_targets();
            items.push(item);
        }
        let scale = 1.0 / n.max(1) as f64;
        items.iter_mut().flat_map(|i| i.weights.iter_mut()).for_each(|w| *w *= scale);
        let tokens = items.iter().map(|i| i.inputs.len() as u64).sum();
        Ok(StepBatch {
            items,
            tokens,
            reward: None,
        })
    })?;
    Ok(finish(model, plan, CostAction::Midtrain, &domain.name, metrics, tokens))
}

/// Draws SFT examples: anchor with probability `mix_ratio`, else domain.
#[derive(Clone, Debug)]
pub struct MixSampler {
    mix_ratio: f64,
    n_domain: usize,
    n_anchor: usize,
}

impl MixSampler {
    pub fn new(mix_ratio: f64, n_domain: usize, n_anchor: usize) -> Result<Self> {
        if mix_ratio < 1.0 && n_domain == 0 {
            return Err(Error::Empty("domain pairs".into()));
        }
        if mix_ratio > 0.0 && n_anchor == 0 {
            return Err(Error::Empty("anchor pairs".into()));
        }
        Ok(Self {
            mix_ratio,
            n_domain,
            n_anchor,
        })
    }

    /// `(from_anchor, index)`.
    pub fn draw(&self, rng: &mut impl Rng) -> (bool, usize) {
        let anchor = self.mix_ratio > 0.0 && rng.gen::<f64>() < self.mix_ratio;
        if anchor {
            (true, rng.gen_range(0..self.n_anchor))
        } else {
            (false, rng.gen_range(0..self.n_domain))
        }
    }
}

/// Supervised training on prompt/response pairs with loss on response
/// tokens only, averaged over the batch's response tokens.
#[allow(clippy::too_many_arguments)]
pub fn supervised(
    mut model: Checkpoint,
    label: &str,
    domain_pairs: &[Example],
    anchor_pairs: &[Example],
    vocab: &Vocab,
    plan: &StagePlan,
    mask: Option<&FreezeMask>,
    routing: Option<Routing>,
) -> Result<StageOutput> {
    let expected = plan.stage;
    if !matches!(expected, StageKind::Sft | StageKind::Router) {
        return Err(Error::Config(format!("stage {expected} is not supervised")));
    }
    prepare(&mut model, plan, expected, mask)?;
    let sampler = MixSampler::new(plan.mix_ratio, domain_pairs.len(), anchor_pairs.len())?;
    let routing = routing.unwrap_or_else(|| stage_routing(&model.config));
    let (metrics, tokens) = run_steps(&mut model, plan, routing, |_, rng, _| {
        let mut items = Vec::with_capacity(plan.batch_size);
        for _ in 0..plan.batch_size {
            let (anchor, idx) = sampler.draw(rng);
            let ex = if anchor { &anchor_pairs[idx] } else { &domain_pairs[idx] };
            let (seq, start) = ex.full_sequence(vocab);
            let mut item = BatchItem::from_sequence(&seq, start, 1.0);
            // Mean over each response, then over the batch, so short
            // answers weigh as much as long ones.
            let scale = 1.0 / (item.n_targets().max(1) * plan.batch_size) as f64;
            item.weights.iter_mut().for_each(|w| *w *= scale);
            items.push(item);
        }
        let tokens = items.iter().map(|i| i.inputs.len() as u64).sum();
        Ok(StepBatch {
            items,
            tokens,
            reward: None,
        })
    })?;
    let action = if expected == StageKind::Router {
        CostAction::Router
    } else {
        CostAction::Sft
    };
    Ok(finish(model, plan, action, label, metrics, tokens))
}

/// Domain SFT mixed with anchor pairs at rate `plan.mix_ratio`.
pub fn sft(
    model: Checkpoint,
    domain: &str,
    domain_pairs: &[Example],
    anchor_pairs: &[Example],
    vocab: &Vocab,
    plan: &StagePlan,
    mask: Option<&FreezeMask>,
) -> Result<StageOutput> {
    supervised(model, domain, domain_pairs, anchor_pairs, vocab, plan, mask, None)
}

pub const ADVANTAGE_EPS: f64 = 1e-6;

/// `(r - mean) / (population std + eps)` within one group.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + ADVANTAGE_EPS;
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

/// Group-relative policy gradient with binary verifier rewards.
///
/// Each step samples `rl_group_size` completions for each of `batch_size`
/// prompts. Steps whose advantages are all zero leave the parameters and the
/// optimizer state untouched.
pub fn rlvr(
    mut model: Checkpoint,
    domain: &DomainSpec,
    prompts: &[Example],
    vocab: &Vocab,
    plan: &StagePlan,
    mask: Option<&FreezeMask>,
) -> Result<StageOutput> {
    if prompts.is_empty() {
        return Err(Error::Empty("rl prompts".into()));
    }
    prepare(&mut model, plan, StageKind::Rlvr, mask)?;
    let routing = stage_routing(&model.config);
    let eos = vocab.eos();
    let config = model.config.clone();
    let (metrics, tokens) = run_steps(&mut model, plan, routing, |_, rng, params| {
        let mut items = Vec::new();
        let mut reward_sum = 0.0;
        let mut n_samples = 0usize;
        let mut sampled_tokens = 0usize;
        let mut tokens = 0u64;
        for _ in 0..plan.batch_size {
            let pi = rng.gen_range(0..prompts.len());
            let ex = &prompts[pi];
            let context = ex.prompt_tokens(vocab);
            let mut seqs = Vec::with_capacity(plan.rl_group_size);
            let mut rewards = Vec::with_capacity(plan.rl_group_size);
            for _ in 0..plan.rl_group_size {
                let c = model::generate(
                    params,
                    &config,
                    &context,
                    routing,
                    eos,
                    plan.max_new_tokens,
                    Some(plan.rl_temperature),
                    rng,
                )?;
                let r = if c.terminated {
                    domain.verify(vocab, &ex.prompt, &c.tokens).map_err(|e| match e {
                        Error::Verifier { prompt_id, reason } => Error::Verifier {
                            prompt_id: format!("#{pi} {prompt_id}"),
                            reason,
                        },
                        other => other,
                    })?
                } else {
                    0.0
                };
                let mut seq = context.clone();
                seq.extend_from_slice(&c.tokens);
                if c.terminated {
                    seq.push(eos);
                }
                tokens += seq.len() as u64;
                sampled_tokens += seq.len() - context.len();
                seqs.push(seq);
                rewards.push(r);
            }
            reward_sum += rewards.iter().sum::<f64>();
            n_samples += rewards.len();
            for (seq, a) in seqs.iter().zip(group_advantages(&rewards)) {
                if seq.len() > context.len() {
                    items.push(BatchItem::from_sequence(seq, context.len(), a));
                }
            }
        }
        let scale = 1.0 / sampled_tokens.max(1) as f64;
        items.iter_mut().flat_map(|i| i.weights.iter_mut()).for_each(|w| *w *= scale);
        Ok(StepBatch {
            items,
            tokens,
            reward: Some(reward_sum / n_samples as f64),
        })
    })?;
    Ok(finish(model, plan, CostAction::Rlvr, &domain.name, metrics, tokens))
}
