//! End-to-end protocol: base model, per-domain expert pipelines,
//! composition with router training, the lifecycle and ablation experiments,
//! and the baselines.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::compose::{self, ContinualPhase, ExpertPackage, Granularity, MergeOptions};
use crate::config::{names, MoeModelConfig};
use crate::cost::{CostAction, CostEvent, CostLedger};
use crate::domains::{self, CodeVersion, DomainSpec, Example, Split, Vocab};
use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions, EvalReport, InterferenceMatrix};
use crate::model;
use crate::params::{FreezeMask, StageKind};
use crate::router::{self, RoutingStats};
use crate::train::{self, StageOutput, StagePlan, StepMetric};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Training pairs per domain.
    pub n_train: usize,
    /// Eval examples per domain.
    pub n_eval: usize,
    /// Share of every domain's SFT pairs used for router training.
    pub router_fraction: f64,
    /// Share of every domain's SFT pairs reserved for routing statistics.
    pub heldout_fraction: f64,
    pub max_new_tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlans {
    pub pretrain: StagePlan,
    pub anchor_sft: StagePlan,
    pub midtrain: StagePlan,
    pub sft: StagePlan,
    pub rlvr: StagePlan,
    pub router: StagePlan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub model: ModelShape,
    pub data: DataConfig,
    pub merge: MergeOptions,
    pub stages: StagePlans,
    /// Stages each domain's expert runs, in order.
    pub recipes: BTreeMap<String, Vec<StageKind>>,
}

fn plan(stage: StageKind, steps: usize, batch: usize, lr: f64, salt: u64) -> StagePlan {
    StagePlan {
        schedule: train::Schedule::Cosine {
            warmup_steps: steps / 20,
        },
        ..StagePlan::new(stage, steps, batch, lr, salt)
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let shared = 0.02;
        let sft = StagePlan {
            mix_ratio: 0.25,
            shared_lr_scale: shared,
            ..plan(StageKind::Sft, 1500, 16, 2e-3, 3)
        };
        let rlvr = StagePlan {
            shared_lr_scale: shared,
            ..plan(StageKind::Rlvr, 600, 8, 5e-4, 5)
        };
        let router = StagePlan {
            schedule: train::Schedule::Cosine { warmup_steps: 100 },
            ..plan(StageKind::Router, 2000, 16, 1e-2, 6)
        };
        let full = vec![StageKind::Midtrain, StageKind::Sft, StageKind::Rlvr];
        let recipes = [
            ("math", full.clone()),
            ("code", full.clone()),
            ("code-v2", full),
            ("tool", vec![StageKind::Sft]),
            ("safety", vec![StageKind::Sft]),
        ]
        .into_iter()
        .map(|(d, s)| (d.to_string(), s))
        .collect();
        Self {
            seed: 0,
            model: ModelShape {
                n_layers: 2,
                d_model: 64,
                n_heads: 4,
                d_ff: 128,
                max_seq_len: 24,
            },
            data: DataConfig {
                n_train: 8000,
                n_eval: 100,
                router_fraction: 0.05,
                heldout_fraction: 0.1,
                max_new_tokens: 12,
            },
            merge: MergeOptions {
                granularity: Granularity::Element,
                ..MergeOptions::default()
            },
            stages: StagePlans {
                pretrain: plan(StageKind::Midtrain, 1500, 16, 3e-3, 1),
                anchor_sft: plan(StageKind::Sft, 600, 16, 2e-3, 2),
                midtrain: plan(StageKind::Midtrain, 400, 16, 2e-3, 4),
                sft,
                rlvr,
                router,
            },
            recipes,
        }
    }
}

fn mix_seed(seed: u64, salt: u64, label: &str) -> u64 {
    let mut h = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for b in label.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01B3);
    }
    h
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.dense_config(1).validate()?;
        let s = &self.stages;
        for (name, p, want) in [
            ("pretrain", &s.pretrain, StageKind::Midtrain),
            ("anchor_sft", &s.anchor_sft, StageKind::Sft),
            ("midtrain", &s.midtrain, StageKind::Midtrain),
            ("sft", &s.sft, StageKind::Sft),
            ("rlvr", &s.rlvr, StageKind::Rlvr),
            ("router", &s.router, StageKind::Router),
        ] {
            p.validate()?;
            if p.stage != want {
                return Err(Error::Config(format!("stages.{name}.stage must be {want}")));
            }
            if p.seq_len > self.model.max_seq_len {
                return Err(Error::Config(format!("stages.{name}.seq_len exceeds max_seq_len")));
            }
        }
        if self.data.n_train == 0 || self.data.n_eval == 0 {
            return Err(Error::Config("n_train and n_eval must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.data.heldout_fraction) {
            return Err(Error::Config("heldout_fraction must be in [0, 1)".into()));
        }
        for (d, stages) in &self.recipes {
            domains::domain_by_name(d, 0)?;
            if stages.contains(&StageKind::Router) {
                return Err(Error::Config(format!("recipe {d} cannot contain the router stage")));
            }
        }
        Ok(())
    }

    pub fn dense_config(&self, vocab: usize) -> MoeModelConfig {
        let m = &self.model;
        MoeModelConfig::dense(m.n_layers, m.d_model, m.n_heads, m.d_ff, vocab, m.max_seq_len)
    }

    /// The configured plan for `stage`, seeded for `label`.
    pub fn plan_for(&self, stage: StageKind, label: &str) -> StagePlan {
        let base = match stage {
            StageKind::Midtrain => &self.stages.midtrain,
            StageKind::Sft => &self.stages.sft,
            StageKind::Rlvr => &self.stages.rlvr,
            StageKind::Router => &self.stages.router,
        };
        self.seeded(base, label)
    }

    pub fn seeded(&self, plan: &StagePlan, label: &str) -> StagePlan {
        StagePlan {
            seed: mix_seed(self.seed, plan.seed, label),
            ..plan.clone()
        }
    }

    pub fn recipe(&self, domain: &str) -> Result<&[StageKind]> {
        self.recipes
            .get(domain)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownDomain(domain.to_string()))
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            n_examples: self.data.n_eval,
            max_new_tokens: self.data.max_new_tokens,
            ..Default::default()
        }
    }
}

/// Domains of the main suite, in registration order.
pub fn suite(seed: u64) -> Vec<DomainSpec> {
    vec![
        domains::make_anchor_domain(seed),
        domains::make_math_domain(seed),
        domains::make_code_domain(CodeVersion::V1, seed),
        domains::make_tool_domain(seed),
        domains::make_safety_domain(seed),
    ]
}

/// Domain added in the order experts join the composed model.
pub const ADD_ORDER: [&str; 4] = ["math", "code", "tool", "safety"];

/// The `code-v2` domain renamed for slot lookups in the composed model.
pub fn code_v2(seed: u64) -> DomainSpec {
    DomainSpec {
        name: "code-v2".into(),
        ..domains::make_code_domain(CodeVersion::V2, seed)
    }
}

/// Fixed data for one run.
pub struct Workspace {
    pub cfg: PipelineConfig,
    pub vocab: Vocab,
    pub suite: Vec<DomainSpec>,
    pub train: BTreeMap<String, Vec<Example>>,
}

impl Workspace {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let mut all = suite(cfg.seed);
        all.push(code_v2(cfg.seed));
        let vocab = Vocab::for_suite(&all);
        let train = all
            .iter()
            .map(|d| (d.name.clone(), d.examples(&vocab, Split::Train, cfg.data.n_train)))
            .collect();
        Ok(Self {
            suite: suite(cfg.seed),
            vocab,
            train,
            cfg,
        })
    }

    pub fn domain(&self, name: &str) -> Result<DomainSpec> {
        if name == "code-v2" {
            return Ok(code_v2(self.cfg.seed));
        }
        self.suite
            .iter()
            .find(|d| d.name == name)
            .cloned()
            .ok_or_else(|| Error::UnknownDomain(name.to_string()))
    }

    pub fn pairs(&self, name: &str) -> Result<&[Example]> {
        self.train
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownDomain(name.to_string()))
    }

    pub fn eval(&self, model: &Checkpoint, id: &str, domains: &[DomainSpec]) -> Result<EvalReport> {
        eval::evaluate(model, id, domains, &self.vocab, &self.cfg.eval_options())
    }

    pub fn eval_suite(&self, model: &Checkpoint, id: &str) -> Result<EvalReport> {
        self.eval(model, id, &self.suite)
    }
}

pub struct BaseModels {
    pub m_pre: Checkpoint,
    pub m: Checkpoint,
    pub events: Vec<CostEvent>,
    pub metrics: Vec<StepMetric>,
}

/// Pre-trains a dense model on the anchor corpus, then post-trains it with
/// anchor SFT to obtain the initial model M.
pub fn init_base(ws: &Workspace) -> Result<BaseModels> {
    let cfg = &ws.cfg;
    let base_vocab = Vocab::base().len();
    let dense = cfg.dense_config(base_vocab);
    let init = model::init_params(&dense, mix_seed(cfg.seed, 0, "init"));
    let anchor = ws.domain("anchor")?;
    let all = FreezeMask::only_trainable(["*"]);
    let ck = Checkpoint::new(dense, init, vec!["anchor".into()]);
    log::info!("pretraining base model");
    let mut pre = train::midtrain(ck, &anchor, &ws.vocab, &cfg.seeded(&cfg.stages.pretrain, "pretrain"), Some(&all))?;
    pre.model.quantize_in_place();
    for e in &mut pre.events {
        e.action = CostAction::Pretrain;
    }
    if let Some(h) = pre.model.history.last_mut() {
        h.stage = "pretrain".into();
    }
    log::info!("anchor post-training");
    let plan = cfg.seeded(&cfg.stages.anchor_sft, "anchor");
    let mut post = train::sft(pre.model.clone(), "anchor", ws.pairs("anchor")?, &[], &ws.vocab, &plan, Some(&all))?;
    post.model.quantize_in_place();
    let mut events = pre.events;
    events.extend(post.events);
    let mut metrics = pre.metrics;
    metrics.extend(post.metrics);
    Ok(BaseModels {
        m_pre: pre.model,
        m: post.model,
        events,
        metrics,
    })
}

/// 2-expert MoE for `domain`: shared layers and frozen anchor FFN from M,
/// domain FFN from the pre-trained model, vocabulary extended with the
/// domain's new tokens.
pub fn branch(base: &BaseModels, domain: &DomainSpec) -> Result<Checkpoint> {
    let (mut params, mut config) = model::graft_to_moe(&base.m.params, &base.m.params, &[&base.m_pre.params], &base.m.config)?;
    if !domain.new_tokens().is_empty() {
        let mut v = Vocab::base();
        for t in domain.new_tokens() {
            v.register(t);
        }
        model::extend_vocab(&mut params, &mut config, v.len(), compose::VOCAB_EXTENSION_SEED)?;
    }
    let mut ck = Checkpoint::new(config, params, vec!["anchor".into(), domain.name.clone()]);
    ck.history = base.m.history.clone();
    Ok(ck)
}

/// Freeze-mask overrides for ablations; `None` keeps each stage's own mask.
#[derive(Clone, Debug, Default)]
pub struct MaskOverrides {
    pub midtrain: Option<FreezeMask>,
    pub sft: Option<FreezeMask>,
    pub rlvr: Option<FreezeMask>,
}

pub struct ExpertRun {
    pub domain: String,
    pub checkpoint: Checkpoint,
    /// Model after each completed stage.
    pub stages: Vec<(StageKind, Checkpoint)>,
    pub events: Vec<CostEvent>,
    pub metrics: Vec<StepMetric>,
    pub tokens: u64,
}

/// Runs one stage on `model` for `domain`.
pub fn run_stage(
    ws: &Workspace,
    model: Checkpoint,
    domain: &DomainSpec,
    stage: StageKind,
    plan: &StagePlan,
    mask: Option<&FreezeMask>,
) -> Result<StageOutput> {
    let mut out = match stage {
        StageKind::Midtrain => train::midtrain(model, domain, &ws.vocab, plan, mask)?,
        StageKind::Sft => train::sft(model, &domain.name, ws.pairs(&domain.name)?, ws.pairs("anchor")?, &ws.vocab, plan, mask)?,
        StageKind::Rlvr => train::rlvr(model, domain, ws.pairs(&domain.name)?, &ws.vocab, plan, mask)?,
        StageKind::Router => return Err(Error::Config("router stage runs on composed models".into())),
    };
    out.model.quantize_in_place();
    Ok(out)
}

/// Branches and trains one expert through its recipe.
pub fn train_expert(ws: &Workspace, base: &BaseModels, name: &str, masks: &MaskOverrides) -> Result<ExpertRun> {
    let domain = ws.domain(name)?;
    let mut model = branch(base, &domain)?;
    let mut run = ExpertRun {
        domain: name.to_string(),
        checkpoint: model.clone(),
        stages: Vec::new(),
        events: Vec::new(),
        metrics: Vec::new(),
        tokens: 0,
    };
    for &stage in ws.cfg.recipe(name)? {
        log::info!("{name}: {stage}");
        let mask = match stage {
            StageKind::Midtrain => masks.midtrain.as_ref(),
            StageKind::Sft => masks.sft.as_ref(),
            StageKind::Rlvr => masks.rlvr.as_ref(),
            StageKind::Router => None,
        };
        let out = run_stage(ws, model, &domain, stage, &ws.cfg.plan_for(stage, name), mask)?;
        model = out.model;
        run.tokens += out.tokens;
        run.events.extend(out.events);
        run.metrics.extend(out.metrics);
        run.stages.push((stage, model.clone()));
    }
    run.checkpoint = model;
    Ok(run)
}

/// SFT pairs for every slot of a composed model. `sources` maps a slot label
/// to the domain whose data trained it when the two differ.
pub fn router_sets(ws: &Workspace, slots: &[String], sources: &BTreeMap<String, String>) -> Result<BTreeMap<String, Vec<Example>>> {
    slots
        .iter()
        .map(|s| {
            let src = sources.get(s).unwrap_or(s);
            Ok((src.clone(), ws.pairs(src)?.to_vec()))
        })
        .collect()
}

/// Trains the router of `composed` on a stratified sample of the SFT data of
/// every slot's domain.
pub fn route(ws: &Workspace, composed: Checkpoint, label: &str) -> Result<(Checkpoint, RoutingStats, StageOutputSummary)> {
    route_sourced(ws, composed, label, &BTreeMap::new())
}

/// [`route`] with slot data taken from `sources`.
pub fn route_sourced(
    ws: &Workspace,
    composed: Checkpoint,
    label: &str,
    sources: &BTreeMap<String, String>,
) -> Result<(Checkpoint, RoutingStats, StageOutputSummary)> {
    let sets = router_sets(ws, &composed.slots, sources)?;
    let (train_sets, heldout) = router::reserve_heldout(&sets, ws.cfg.data.heldout_fraction);
    let plan = ws.cfg.plan_for(StageKind::Router, label);
    let sample = router::stratified_sample(&train_sets, ws.cfg.data.router_fraction, plan.seed)?;
    log::info!("router training for {label} on {} pairs", sample.len());
    let (mut out, stats) = router::train_router(composed, &sample, &heldout, &ws.vocab, &plan)?;
    out.model.quantize_in_place();
    let summary = StageOutputSummary {
        events: out.events,
        metrics: out.metrics,
        tokens: out.tokens,
    };
    Ok((out.model, stats, summary))
}

pub struct StageOutputSummary {
    pub events: Vec<CostEvent>,
    pub metrics: Vec<StepMetric>,
    pub tokens: u64,
}

pub fn package(ws: &Workspace, base: &BaseModels, name: &str, ck: &Checkpoint) -> Result<ExpertPackage> {
    ExpertPackage::new(name, ck.clone(), &base.m, ws.cfg.merge.tolerance)
}

/// One row of the incremental build.
pub struct Addition {
    pub label: String,
    pub model: Checkpoint,
    pub routing: Option<RoutingStats>,
}

/// Everything a full protocol run produces.
pub struct Reproduction {
    pub base: BaseModels,
    pub experts: BTreeMap<String, ExpertRun>,
    pub additions: Vec<Addition>,
    pub matrix: InterferenceMatrix,
    pub upgraded: Checkpoint,
    pub upgrade_before: EvalReport,
    pub upgrade_after: EvalReport,
    pub sweep: Vec<EvalReport>,
    pub ledger: CostLedger,
}

impl Reproduction {
    pub fn final_model(&self) -> &Checkpoint {
        &self.additions.last().expect("nonempty").model
    }
}

fn tag(events: Vec<CostEvent>, addition: usize) -> Vec<CostEvent> {
    events.into_iter().map(|e| e.tagged(addition)).collect()
}

/// Trains every expert, builds M -> +math -> +code -> +tool -> +safety with a
/// router retrain after each addition, upgrades code v1 -> v2, and sweeps the
/// number of active experts.
pub fn reproduce(ws: &Workspace) -> Result<Reproduction> {
    let base = init_base(ws)?;
    let mut ledger = CostLedger::new();
    ledger.extend(base.events.clone());

    let mut experts = BTreeMap::new();
    for name in ADD_ORDER.iter().copied().chain(["code-v2"]) {
        let run = train_expert(ws, &base, name, &MaskOverrides::default())?;
        experts.insert(name.to_string(), run);
    }
    ledger.extend(experts["code-v2"].events.clone());

    let mut additions = vec![Addition {
        label: "M".into(),
        model: base.m.clone(),
        routing: None,
    }];
    let mut packages: Vec<ExpertPackage> = Vec::new();
    for (i, name) in ADD_ORDER.iter().enumerate() {
        let run = &experts[*name];
        ledger.extend(tag(run.events.clone(), i + 1));
        let pkg = package(ws, &base, name, &run.checkpoint)?;
        let composed = if packages.is_empty() {
            compose::compose(&base.m, std::slice::from_ref(&pkg), ws.cfg.merge)?
        } else {
            let prev = &additions.last().expect("nonempty").model;
            compose::add_expert(prev, &base.m, &packages, pkg.clone(), ws.cfg.merge)?
        };
        packages.push(pkg);
        let label = format!("+{name}");
        let (model, stats, summary) = route(ws, composed.checkpoint, &label)?;
        ledger.extend(tag(summary.events, i + 1));
        additions.push(Addition {
            label,
            model,
            routing: Some(stats),
        });
    }
    let snapshots: Vec<(String, Checkpoint)> = additions.iter().map(|a| (a.label.clone(), a.model.clone())).collect();
    log::info!("interference matrix");
    let matrix = eval::interference_matrix(&snapshots, &ws.suite, &ws.vocab, &ws.cfg.eval_options())?;

    let with_v2: Vec<DomainSpec> = ws.suite.iter().cloned().chain([code_v2(ws.cfg.seed)]).collect();
    let final_model = &additions.last().expect("nonempty").model;
    let upgrade_before = ws.eval(final_model, "bar", &with_v2)?;
    let v2 = package(ws, &base, "code", &experts["code-v2"].checkpoint)?;
    let swapped = compose::swap_expert(final_model, &base.m, &packages, "code", v2, ws.cfg.merge)?;
    let sources = BTreeMap::from([("code".to_string(), "code-v2".to_string())]);
    let (upgraded, _, summary) = route_sourced(ws, swapped.checkpoint, "swap-code", &sources)?;
    ledger.extend(summary.events);
    let upgrade_after = ws.eval(&upgraded, "bar-code-v2", &with_v2)?;

    let mut sweep = Vec::new();
    for n in 1..=final_model.config.n_experts {
        let opts = EvalOptions {
            n_active: Some(n),
            ..ws.cfg.eval_options()
        };
        sweep.push(eval::evaluate(final_model, "bar", &ws.suite, &ws.vocab, &opts)?);
    }
    Ok(Reproduction {
        base,
        experts,
        additions,
        matrix,
        upgraded,
        upgrade_before,
        upgrade_after,
        sweep,
        ledger,
    })
}

/// Writes the artifacts of a run under `out`.
pub fn write_reproduction(r: &Reproduction, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    r.base.m_pre.save(&out.join("base/m_pre.ckpt"))?;
    r.base.m.save(&out.join("base/m.ckpt"))?;
    for (name, run) in &r.experts {
        run.checkpoint.save(&expert_path(out, name))?;
        train::write_metrics_csv(&run.metrics, fs::File::create(out.join(format!("experts/{name}/metrics.csv")))?)?;
    }
    for a in &r.additions[1..] {
        a.model.save(&out.join(format!("incremental/{}.ckpt", a.label.trim_start_matches('+'))))?;
    }
    r.final_model().save(&out.join("composed/model.ckpt"))?;
    r.upgraded.save(&out.join("composed/upgraded.ckpt"))?;
    if let Some(stats) = &r.additions.last().and_then(|a| a.routing.clone()) {
        stats.write_csv(fs::File::create(out.join("composed/routing.csv"))?)?;
    }
    r.matrix.write_csv(fs::File::create(out.join("interference.csv"))?)?;
    let mut sweep = fs::File::create(out.join("active_experts.csv"))?;
    for (i, rep) in r.sweep.iter().enumerate() {
        let mut buf = Vec::new();
        rep.write_csv(&mut buf)?;
        let text = String::from_utf8_lossy(&buf);
        let body = if i == 0 { &text[..] } else { text.split_once('\n').map_or("", |x| x.1) };
        std::io::Write::write_all(&mut sweep, body.as_bytes())?;
    }
    r.ledger.write_csv(fs::File::create(out.join("ledger.csv"))?)?;
    Ok(())
}

pub fn expert_path(out: &Path, name: &str) -> PathBuf {
    out.join(format!("experts/{name}/model.ckpt"))
}

/// Tool expert SFT with embeddings and LM head frozen.
pub fn ablate_freeze_embeddings(ws: &Workspace, base: &BaseModels) -> Result<ExpertRun> {
    let mask = FreezeMask::only_trainable([names::expert_glob(1)]);
    train_expert(
        ws,
        base,
        "tool",
        &MaskOverrides {
            sft: Some(mask),
            ..Default::default()
        },
    )
}

/// RLVR from `start` with every shared parameter frozen.
pub fn ablate_freeze_shared_rl(ws: &Workspace, start: &Checkpoint, domain: &str) -> Result<StageOutput> {
    let d = ws.domain(domain)?;
    let mask = FreezeMask::only_trainable([names::expert_glob(1)]);
    run_stage(ws, start.clone(), &d, StageKind::Rlvr, &ws.cfg.plan_for(StageKind::Rlvr, domain), Some(&mask))
}

/// Domain SFT from `start` at anchor mix ratio `lambda`.
pub fn ablate_sft_mix(ws: &Workspace, start: &Checkpoint, domain: &str, lambda: f64) -> Result<StageOutput> {
    let d = ws.domain(domain)?;
    let plan = StagePlan {
        mix_ratio: lambda,
        ..ws.cfg.plan_for(StageKind::Sft, domain)
    };
    run_stage(ws, start.clone(), &d, StageKind::Sft, &plan, None)
}

/// Dense baselines train every parameter at the full learning rate.
fn full_params(plan: StagePlan) -> StagePlan {
    StagePlan {
        shared_lr_scale: 1.0,
        ..plan
    }
}

/// Sequential dense post-training over every domain: SFT in add order, then
/// RLVR on the domains that have verifiers.
pub fn continual_baseline(ws: &Workspace, base: &BaseModels) -> Result<(Vec<ContinualPhase>, Vec<CostEvent>)> {
    let sft: Vec<(DomainSpec, Vec<Example>)> = ADD_ORDER
        .iter()
        .map(|n| Ok((ws.domain(n)?, ws.pairs(n)?.to_vec())))
        .collect::<Result<_>>()?;
    let rl: Vec<(DomainSpec, Vec<Example>)> = sft.iter().filter(|(d, _)| d.has_rl()).cloned().collect();
    let plan_for = |s: StageKind, d: &str| full_params(ws.cfg.plan_for(s, &format!("continual-{d}")));
    let (mut phases, events) = compose::continual_posttrain(&base.m, &sft, ws.pairs("anchor")?, &rl, &ws.vocab, &plan_for)?;
    for p in &mut phases {
        p.checkpoint.quantize_in_place();
    }
    let events = events
        .into_iter()
        .map(|mut e| {
            e.action = CostAction::BaselineRetrain;
            e
        })
        .collect();
    Ok((phases, events))
}

/// Dense full-parameter experts for the BTX and soup baselines: each starts
/// from M with its FFN reset to the pre-trained one and trains every
/// parameter through the domain's recipe.
pub fn dense_experts(ws: &Workspace, base: &BaseModels) -> Result<Vec<(String, Checkpoint)>> {
    let all = FreezeMask::only_trainable(["*"]);
    let mut out = Vec::new();
    for name in ADD_ORDER {
        let domain = ws.domain(name)?;
        let mut ck = base.m.clone();
        model::copy_ffn(&base.m_pre.params, 0, &mut ck.params, 0, ck.config.n_layers)?;
        if !domain.new_tokens().is_empty() {
            ck = compose::aligned_initial(&ck, ws.vocab.len())?;
        }
        for &stage in ws.cfg.recipe(name)? {
            let plan = full_params(ws.cfg.plan_for(stage, &format!("dense-{name}")));
            ck = run_stage(ws, ck, &domain, stage, &plan, Some(&all))?.model;
        }
        out.push((name.to_string(), ck));
    }
    Ok(out)
}

/// Retrain-from-scratch cost curve: every addition re-runs all pipelines so far.
pub fn retrain_ledger(bar: &CostLedger) -> CostLedger {
    let mut per_domain: BTreeMap<usize, u64> = BTreeMap::new();
    for e in bar.events() {
        if let (Some(n), false) = (e.addition, e.action == CostAction::Router) {
            *per_domain.entry(n).or_default() += e.tokens;
        }
    }
    let mut out = CostLedger::new();
    for &n in per_domain.keys() {
        let tokens = per_domain.range(..=n).map(|(_, t)| t).sum();
        out.push(CostEvent::new(CostAction::BaselineRetrain, format!("1..={n}"), tokens).tagged(n));
    }
    out
}

/// Joint dense retraining from the pre-trained model on every domain at once:
/// optional mid-training on each corpus, SFT on the union of all domains'
/// pairs mixed with anchor data, then RLVR on each verifiable domain.
pub fn retrain_baseline(ws: &Workspace, base: &BaseModels, with_midtrain: bool) -> Result<(Checkpoint, Vec<CostEvent>)> {
    let all = FreezeMask::only_trainable(["*"]);
    let label = if with_midtrain { "retrain-full" } else { "retrain-post" };
    let mut model = compose::aligned_initial(&base.m_pre, ws.vocab.len())?;
    let mut events = Vec::new();
    let domains: Vec<DomainSpec> = ADD_ORDER.iter().map(|n| ws.domain(n)).collect::<Result<_>>()?;
    if with_midtrain {
        for d in domains.iter().filter(|d| d.has_corpus()) {
            let plan = full_params(ws.cfg.plan_for(StageKind::Midtrain, &format!("{label}-{}", d.name)));
            let out = run_stage(ws, model, d, StageKind::Midtrain, &plan, Some(&all))?;
            model = out.model;
            events.extend(out.events);
        }
    }
    let mut union = ws.pairs("anchor")?.to_vec();
    for d in &domains {
        union.extend_from_slice(ws.pairs(&d.name)?);
    }
    let plan = full_params(ws.cfg.plan_for(StageKind::Sft, label));
    let mut out = train::sft(model, "all", &union, ws.pairs("anchor")?, &ws.vocab, &plan, Some(&all))?;
    out.model.quantize_in_place();
    model = out.model;
    events.extend(out.events);
    for d in domains.iter().filter(|d| d.has_rl()) {
        let plan = full_params(ws.cfg.plan_for(StageKind::Rlvr, &format!("{label}-{}", d.name)));
        let out = run_stage(ws, model, d, StageKind::Rlvr, &plan, Some(&all))?;
        model = out.model;
        events.extend(out.events);
    }
    let events = events
        .into_iter()
        .map(|mut e| {
            e.action = CostAction::BaselineRetrain;
            e
        })
        .collect();
    Ok((model, events))
}

/// Tags untagged pipeline events of the domains in `additions` with their
/// 1-based position there; a router run belongs to the latest addition whose
/// pipeline events precede it. Other events stay untagged.
pub fn tag_additions(ledger: &CostLedger, additions: &[&str]) -> CostLedger {
    let mut latest = None;
    let mut out = CostLedger::new();
    for e in ledger.events() {
        let mut e = e.clone();
        if e.addition.is_none() {
            match e.action {
                CostAction::Midtrain | CostAction::Sft | CostAction::Rlvr => {
                    if let Some(i) = additions.iter().position(|d| *d == e.domains) {
                        e.addition = Some(i + 1);
                        latest = latest.max(Some(i + 1));
                    }
                }
                CostAction::Router => e.addition = latest,
                _ => {}
            }
        }
        out.push(e);
    }
    out
}
