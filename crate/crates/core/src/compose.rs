//! Composition of independently trained experts into one MoE, the modular
//! add/swap lifecycle, and the parameter-space baselines.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{names, MoeModelConfig};
use crate::cost::CostEvent;
use crate::domains::{DomainSpec, Example, Vocab};
use crate::error::{Error, Result};
use crate::model;
use crate::params::{is_shared, FreezeMask, ParamStore, StageKind};
use crate::tensor::Tensor;
use crate::train::{self, StagePlan};

/// Seed of the noise added to rows of tokens registered after pre-training.
/// Fixed so that every expert and the composer extend identically.
pub const VOCAB_EXTENSION_SEED: u64 = 0x5EED_70C5;

/// Which experts enter the average of a shared parameter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeMode {
    /// Only experts in which the parameter diverged from the initial model.
    #[default]
    Diverged,
    /// Every expert, diverged or not.
    All,
}

/// Unit at which divergence is decided when averaging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// A whole tensor is in or out of the average.
    #[default]
    Tensor,
    /// Each scalar is averaged over the experts where that scalar moved.
    Element,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MergeOptions {
    pub mode: MergeMode,
    pub granularity: Granularity,
    /// Differences at or below this are not divergence.
    pub tolerance: f64,
}

impl FromStr for MergeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diverged" => Ok(MergeMode::Diverged),
            "all" => Ok(MergeMode::All),
            other => Err(Error::Config(format!("unknown merge mode {other}"))),
        }
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tensor" => Ok(Granularity::Tensor),
            "element" => Ok(Granularity::Element),
            other => Err(Error::Config(format!("unknown merge granularity {other}"))),
        }
    }
}

/// A trained expert model together with the shared parameters it changed.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertPackage {
    pub domain: String,
    pub checkpoint: Checkpoint,
    /// Shared ParamIds whose values differ from the initial model.
    pub diverged: BTreeSet<String>,
}

impl ExpertPackage {
    /// Packages `checkpoint` (a 2-expert MoE with anchor, or a dense model)
    /// and computes its divergence set against `initial`.
    pub fn new(domain: impl Into<String>, checkpoint: Checkpoint, initial: &Checkpoint, tolerance: f64) -> Result<Self> {
        let domain = domain.into();
        check_arch(&initial.config, &checkpoint.config, &domain)?;
        let aligned_m = aligned_initial(initial, checkpoint.config.vocab_size)?;
        let mut diverged = BTreeSet::new();
        for (name, p) in checkpoint.params.iter() {
            if !is_shared(name) {
                continue;
            }
            let m = aligned_m.params.tensor(name)?;
            if differs(&p.tensor, m, tolerance) {
                diverged.insert(name.clone());
            }
        }
        if let Some(a) = checkpoint.config.anchor_index {
            for l in 0..initial.config.n_layers {
                for (mine, theirs) in [
                    (names::ffn_in(l, a), names::ffn_in(l, 0)),
                    (names::ffn_out(l, a), names::ffn_out(l, 0)),
                ] {
                    if checkpoint.params.tensor(&mine)? != initial.params.tensor(&theirs)? {
                        return Err(Error::Incompatible(format!(
                            "{domain}: anchor FFN {mine} was modified"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            domain,
            checkpoint,
            diverged,
        })
    }

    /// Expert slot holding this package's domain FFN.
    pub fn domain_slot(&self) -> usize {
        match (self.checkpoint.config.n_experts, self.checkpoint.config.anchor_index) {
            (2, Some(a)) => 1 - a,
            _ => 0,
        }
    }
}

fn differs(a: &Tensor, b: &Tensor, tolerance: f64) -> bool {
    a.data().iter().zip(b.data()).any(|(x, y)| (x - y).abs() > tolerance)
}

fn check_arch(m: &MoeModelConfig, other: &MoeModelConfig, what: &str) -> Result<()> {
    let same = m.n_layers == other.n_layers
        && m.d_model == other.d_model
        && m.n_heads == other.n_heads
        && m.d_ff == other.d_ff
        && m.max_seq_len == other.max_seq_len
        && other.vocab_size >= m.vocab_size;
    if same {
        Ok(())
    } else {
        Err(Error::Incompatible(format!("{what}: architecture differs from the initial model")))
    }
}

/// The initial model with its vocabulary extended to `vocab`.
pub fn aligned_initial(initial: &Checkpoint, vocab: usize) -> Result<Checkpoint> {
    let mut m = initial.clone();
    model::extend_vocab(&mut m.params, &mut m.config, vocab, VOCAB_EXTENSION_SEED)?;
    Ok(m)
}

/// Widens `store`'s embedding and LM head to `target.vocab_size`, copying the
/// missing rows and columns from `target` so they count as untouched.
pub fn pad_vocab(store: &mut ParamStore, vocab: usize, target: &Checkpoint) -> Result<()> {
    let new_v = target.config.vocab_size;
    if vocab == new_v {
        return Ok(());
    }
    let d = target.config.d_model;
    let emb = store.tensor(names::TOK_EMBED)?;
    let mut data = emb.data().to_vec();
    let src = target.params.tensor(names::TOK_EMBED)?;
    for r in vocab..new_v {
        data.extend_from_slice(src.row(r));
    }
    let frozen = store.get(names::TOK_EMBED).is_some_and(|p| p.frozen);
    store.insert(names::TOK_EMBED, Tensor::new(vec![new_v, d], data)?);
    store.get_mut(names::TOK_EMBED).expect("inserted").frozen = frozen;

    let head = store.tensor(names::LM_HEAD)?;
    let src = target.params.tensor(names::LM_HEAD)?;
    let mut data = Vec::with_capacity(d * new_v);
    for r in 0..d {
        data.extend_from_slice(head.row(r));
        data.extend_from_slice(&src.row(r)[vocab..]);
    }
    let frozen = store.get(names::LM_HEAD).is_some_and(|p| p.frozen);
    store.insert(names::LM_HEAD, Tensor::new(vec![d, new_v], data)?);
    store.get_mut(names::LM_HEAD).expect("inserted").frozen = frozen;
    Ok(())
}

/// Order-independent mean that returns a shared value exactly: the smallest
/// value plus the mean offset from it.
pub fn exact_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let base = values[0];
    let offset: f64 = values.iter().map(|v| v - base).sum::<f64>() / values.len() as f64;
    base + offset
}

/// Where a parameter of a composed model came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Provenance {
    KeptFromInitial,
    Averaged { over: Vec<String>, elementwise: bool },
    ExpertSlot(String),
    RouterInit,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::KeptFromInitial => f.write_str("kept-from-M"),
            Provenance::Averaged { over, elementwise } => {
                let unit = if *elementwise { "elementwise-" } else { "" };
                write!(f, "{unit}averaged-over-[{}]", over.join(","))
            }
            Provenance::ExpertSlot(d) => write!(f, "expert-slot:{d}"),
            Provenance::RouterInit => f.write_str("router-zero-init"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MergeReport {
    pub entries: BTreeMap<String, Provenance>,
}

impl MergeReport {
    /// One `name<TAB>provenance` line per parameter.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(n, p)| format!("{n}\t{p}\n"))
            .collect()
    }
}

pub struct Composed {
    pub checkpoint: Checkpoint,
    pub report: MergeReport,
}

fn check_unique(domains: impl IntoIterator<Item = String>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for d in domains {
        if d == "anchor" || !seen.insert(d.clone()) {
            return Err(Error::DuplicateDomain(d));
        }
    }
    Ok(())
}

/// Builds the `(k + 1)`-expert model: anchor FFN from `initial` in slot 0,
/// package `i`'s domain FFN in slot `i + 1`, shared parameters averaged per
/// `opts`, routers at zero.
pub fn compose(initial: &Checkpoint, experts: &[ExpertPackage], opts: MergeOptions) -> Result<Composed> {
    if experts.is_empty() {
        return Err(Error::Empty("expert list".into()));
    }
    if !initial.config.is_dense() {
        return Err(Error::Incompatible("initial model must be dense".into()));
    }
    check_unique(experts.iter().map(|e| e.domain.clone()))?;
    for e in experts {
        check_arch(&initial.config, &e.checkpoint.config, &e.domain)?;
    }
    let vocab = experts
        .iter()
        .map(|e| e.checkpoint.config.vocab_size)
        .max()
        .expect("nonempty");
    let m = aligned_initial(initial, vocab)?;
    let padded: Vec<ParamStore> = experts
        .iter()
        .map(|e| {
            let mut s = e.checkpoint.params.clone();
            pad_vocab(&mut s, e.checkpoint.config.vocab_size, &m)?;
            Ok(s)
        })
        .collect::<Result<_>>()?;

    let config = m.config.with_experts(experts.len() + 1);
    let mut out = ParamStore::new();
    let mut report = MergeReport::default();
    for (name, p) in m.params.iter() {
        if !is_shared(name) {
            continue;
        }
        let (tensor, prov) = merge_shared(name, &p.tensor, experts, &padded, opts)?;
        out.insert(name.clone(), tensor);
        report.entries.insert(name.clone(), prov);
    }
    model::copy_ffn(&m.params, 0, &mut out, 0, config.n_layers)?;
    for l in 0..config.n_layers {
        for n in [names::ffn_in(l, 0), names::ffn_out(l, 0)] {
            report.entries.insert(n, Provenance::ExpertSlot("anchor".into()));
        }
    }
    for (i, (e, s)) in experts.iter().zip(&padded).enumerate() {
        model::copy_ffn(s, e.domain_slot(), &mut out, i + 1, config.n_layers)?;
        for l in 0..config.n_layers {
            for n in [names::ffn_in(l, i + 1), names::ffn_out(l, i + 1)] {
                report.entries.insert(n, Provenance::ExpertSlot(e.domain.clone()));
            }
        }
    }
    for l in 0..config.n_layers {
        out.insert(names::router(l), Tensor::zeros(&[config.d_model, config.n_experts]));
        report.entries.insert(names::router(l), Provenance::RouterInit);
    }
    for (name, p) in out.iter_mut() {
        p.frozen = name.contains(".expert.0.");
    }
    out.check_against(&config)?;
    let mut slots = vec!["anchor".to_string()];
    slots.extend(experts.iter().map(|e| e.domain.clone()));
    let mut checkpoint = Checkpoint::new(config, out, slots);
    checkpoint.history = initial.history.clone();
    Ok(Composed { checkpoint, report })
}

fn merge_shared(
    name: &str,
    m: &Tensor,
    experts: &[ExpertPackage],
    padded: &[ParamStore],
    opts: MergeOptions,
) -> Result<(Tensor, Provenance)> {
    let members: Vec<usize> = match opts.mode {
        MergeMode::All => (0..experts.len()).collect(),
        MergeMode::Diverged => (0..experts.len())
            .filter(|&i| experts[i].diverged.contains(name))
            .collect(),
    };
    if members.is_empty() {
        return Ok((m.clone(), Provenance::KeptFromInitial));
    }
    let values: Vec<&Tensor> = members
        .iter()
        .map(|&i| padded[i].tensor(name))
        .collect::<Result<_>>()?;
    let elementwise = opts.mode == MergeMode::Diverged && opts.granularity == Granularity::Element;
    let mut data = Vec::with_capacity(m.len());
    let mut buf = Vec::with_capacity(values.len());
    for (j, &base) in m.data().iter().enumerate() {
        buf.clear();
        for t in &values {
            let v = t.data()[j];
            if !elementwise || (v - base).abs() > opts.tolerance {
                buf.push(v);
            }
        }
        data.push(if buf.is_empty() { base } else { exact_mean(&mut buf) });
    }
    let over = members.iter().map(|&i| experts[i].domain.clone()).collect();
    Ok((
        Tensor::new(m.shape().to_vec(), data)?,
        Provenance::Averaged { over, elementwise },
    ))
}

/// Adds one expert to a composed model. Existing expert slots are carried
/// over byte for byte; shared parameters are re-averaged over the enlarged
/// package list and routers reset to zero.
pub fn add_expert(
    composed: &Checkpoint,
    initial: &Checkpoint,
    existing: &[ExpertPackage],
    new_pkg: ExpertPackage,
    opts: MergeOptions,
) -> Result<Composed> {
    check_slots(composed, existing)?;
    if composed.slot_of(&new_pkg.domain).is_some() {
        return Err(Error::DuplicateDomain(new_pkg.domain));
    }
    let mut all = existing.to_vec();
    all.push(new_pkg);
    let mut out = compose(initial, &all, opts)?;
    carry_slots(composed, &mut out.checkpoint, |_| true)?;
    Ok(out)
}

/// Replaces the expert for `domain`; every other slot is carried over byte
/// for byte and the shared average uses the new package's divergence set.
pub fn swap_expert(
    composed: &Checkpoint,
    initial: &Checkpoint,
    existing: &[ExpertPackage],
    domain: &str,
    mut new_pkg: ExpertPackage,
    opts: MergeOptions,
) -> Result<Composed> {
    check_slots(composed, existing)?;
    let idx = existing
        .iter()
        .position(|e| e.domain == domain)
        .ok_or_else(|| Error::UnknownDomain(domain.to_string()))?;
    new_pkg.domain = domain.to_string();
    let mut all = existing.to_vec();
    all[idx] = new_pkg;
    let mut out = compose(initial, &all, opts)?;
    carry_slots(composed, &mut out.checkpoint, |d| d != domain)?;
    Ok(out)
}

fn check_slots(composed: &Checkpoint, existing: &[ExpertPackage]) -> Result<()> {
    let want: Vec<&str> = std::iter::once("anchor")
        .chain(existing.iter().map(|e| e.domain.as_str()))
        .collect();
    if composed.slots.iter().map(String::as_str).ne(want.iter().copied()) {
        return Err(Error::Incompatible(format!(
            "composed slots {:?} do not match packages {want:?}",
            composed.slots
        )));
    }
    Ok(())
}

fn carry_slots(from: &Checkpoint, to: &mut Checkpoint, keep: impl Fn(&str) -> bool) -> Result<()> {
    for (slot, label) in from.slots.iter().enumerate() {
        if !keep(label) {
            continue;
        }
        let dst = to
            .slot_of(label)
            .ok_or_else(|| Error::Incompatible(format!("slot {label} vanished")))?;
        let frozen = slot == 0;
        model::copy_ffn(&from.params, slot, &mut to.params, dst, from.config.n_layers)?;
        for l in 0..from.config.n_layers {
            for n in [names::ffn_in(l, dst), names::ffn_out(l, dst)] {
                to.params.get_mut(&n).expect("copied").frozen = frozen;
            }
        }
    }
    Ok(())
}

/// Uniform mean of every parameter of identically shaped dense models.
pub fn soup_merge(models: &[Checkpoint]) -> Result<Checkpoint> {
    let first = models.first().ok_or_else(|| Error::Empty("soup inputs".into()))?;
    if !first.config.is_dense() {
        return Err(Error::Incompatible("soup inputs must be dense".into()));
    }
    for m in &models[1..] {
        if m.config != first.config {
            return Err(Error::Incompatible("soup inputs differ in architecture".into()));
        }
    }
    let mut out = ParamStore::new();
    let mut buf = Vec::with_capacity(models.len());
    for (name, p) in first.params.iter() {
        let tensors: Vec<&Tensor> = models
            .iter()
            .map(|m| m.params.tensor(name))
            .collect::<Result<_>>()?;
        let data = (0..p.tensor.len())
            .map(|j| {
                buf.clear();
                buf.extend(tensors.iter().map(|t| t.data()[j]));
                exact_mean(&mut buf)
            })
            .collect();
        out.insert(name.clone(), Tensor::new(p.tensor.shape().to_vec(), data)?);
    }
    Ok(Checkpoint::new(first.config.clone(), out, vec![]))
}

/// BTX-style composition: the anchor slot from `initial`, one slot per dense
/// expert, shared parameters the uniform mean over the dense experts.
pub fn btx_compose(initial: &Checkpoint, dense_experts: &[(String, Checkpoint)]) -> Result<Checkpoint> {
    if dense_experts.is_empty() {
        return Err(Error::Empty("expert list".into()));
    }
    check_unique(dense_experts.iter().map(|(d, _)| d.clone()))?;
    let vocab = dense_experts
        .iter()
        .map(|(_, c)| c.config.vocab_size)
        .max()
        .expect("nonempty");
    let m = aligned_initial(initial, vocab)?;
    let mut aligned = Vec::with_capacity(dense_experts.len());
    for (d, c) in dense_experts {
        if !c.config.is_dense() {
            return Err(Error::Incompatible(format!("{d}: BTX experts must be dense")));
        }
        check_arch(&initial.config, &c.config, d)?;
        let mut s = c.params.clone();
        pad_vocab(&mut s, c.config.vocab_size, &m)?;
        aligned.push(Checkpoint::new(m.config.clone(), s, vec![]));
    }
    let soup = soup_merge(&aligned)?;
    let refs: Vec<&ParamStore> = aligned.iter().map(|c| &c.params).collect();
    let (mut params, config) = model::graft_to_moe(&soup.params, &m.params, &refs, &m.config)?;
    for (name, p) in params.iter_mut() {
        p.frozen = name.contains(".expert.0.");
    }
    let mut slots = vec!["anchor".to_string()];
    slots.extend(dense_experts.iter().map(|(d, _)| d.clone()));
    Ok(Checkpoint::new(config, params, slots))
}

/// One labelled snapshot of the continual baseline.
pub struct ContinualPhase {
    pub label: String,
    pub checkpoint: Checkpoint,
}

/// Sequential full-parameter training of the dense initial model: SFT on each
/// domain in order, then RLVR on each RL domain in order. Returns the model
/// after every phase.
pub fn continual_posttrain(
    initial: &Checkpoint,
    sft_data: &[(DomainSpec, Vec<Example>)],
    anchor_pairs: &[Example],
    rl_data: &[(DomainSpec, Vec<Example>)],
    vocab: &Vocab,
    plan_for: &dyn Fn(StageKind, &str) -> StagePlan,
) -> Result<(Vec<ContinualPhase>, Vec<CostEvent>)> {
    if !initial.config.is_dense() {
        return Err(Error::Incompatible("continual baseline needs a dense model".into()));
    }
    let mut model = aligned_initial(initial, vocab.len())?;
    let all = FreezeMask::only_trainable(["*"]);
    let mut phases = Vec::new();
    let mut events = Vec::new();
    for (d, pairs) in sft_data {
        let out = train::sft(model, &d.name, pairs, anchor_pairs, vocab, &plan_for(StageKind::Sft, &d.name), Some(&all))?;
        model = out.model;
        events.extend(out.events);
        phases.push(ContinualPhase {
            label: format!("sft:{}", d.name),
            checkpoint: model.clone(),
        });
    }
    for (d, prompts) in rl_data {
        let out = train::rlvr(model, d, prompts, vocab, &plan_for(StageKind::Rlvr, &d.name), Some(&all))?;
        model = out.model;
        events.extend(out.events);
        phases.push(ContinualPhase {
            label: format!("rlvr:{}", d.name),
            checkpoint: model.clone(),
        });
    }
    Ok((phases, events))
}
