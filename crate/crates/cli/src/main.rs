use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use bar_core::checkpoint::{load_required, Checkpoint};
use bar_core::compose::{self, ExpertPackage, MergeMode};
use bar_core::cost::{cost_summary, CostEvent, CostLedger, CostMode};
use bar_core::eval::{self, EvalOptions, EvalReport};
use bar_core::params::StageKind;
use bar_core::pipeline::{self, BaseModels, PipelineConfig, Workspace, ADD_ORDER};
use bar_core::train::{self, StepMetric};
use bar_core::{Error, TensorError};

#[derive(Parser)]
#[command(name = "bar", version, about = "Branch-adapt-route modular post-training at desk scale")]
struct Cli {
    /// TOML config; defaults to <out>/config.toml, then built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Experts mixed per token at inference.
    #[arg(long, global = true)]
    active_experts: Option<usize>,
    #[arg(long, global = true)]
    merge_mode: Option<MergeArg>,
    /// Anchor mix ratio for SFT.
    #[arg(long, global = true)]
    mix_ratio: Option<f64>,
    /// Overwrite an existing branch.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MergeArg {
    Diverged,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the dense base on the anchor corpus and post-train it into M.
    InitBase,
    /// Graft M into a 2-expert model for one domain.
    Branch { domain: String },
    Midtrain { domain: String },
    Sft { domain: String },
    Rlvr { domain: String },
    /// Merge trained experts into one MoE; every branched domain by default.
    Compose {
        #[arg(long, value_delimiter = ',')]
        domains: Vec<String>,
    },
    /// Train the router of the composed model.
    TrainRouter,
    /// Add one expert to the routed model and retrain the router.
    AddExpert { domain: String },
    /// Put the expert trained for `new` into the slot of `old`.
    SwapExpert { old: String, new: String },
    Baseline { kind: BaselineKind },
    /// Evaluate a checkpoint, the routed composed model by default.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    Ablate {
        #[command(subcommand)]
        kind: AblateKind,
    },
    /// Per-addition cost of BAR against retraining.
    CostReport,
    /// Run the whole protocol end to end.
    ReproduceAll,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Continual,
    Soup,
    Btx,
    RetrainPost,
    RetrainFull,
}

impl BaselineKind {
    fn name(self) -> &'static str {
        match self {
            BaselineKind::Continual => "continual",
            BaselineKind::Soup => "soup",
            BaselineKind::Btx => "btx",
            BaselineKind::RetrainPost => "retrain-post",
            BaselineKind::RetrainFull => "retrain-full",
        }
    }
}

#[derive(Subcommand)]
enum AblateKind {
    /// Tool expert with embeddings and LM head frozen during SFT.
    FreezeEmbeddings,
    /// Math RLVR from the SFT checkpoint with every shared parameter frozen.
    FreezeSharedRl,
    /// Math SFT from the mid-trained checkpoint at anchor mix ratio `lambda`.
    SftMix { lambda: f64 },
}

/// A refused request that is not a configuration problem.
#[derive(Debug)]
struct Refused(String);

impl std::fmt::Display for Refused {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Refused {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Refused>().is_some() || err.downcast_ref::<toml::de::Error>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::UnknownDomain(_) | Error::DuplicateDomain(_) | Error::PatternUnmatched(_)) => 2,
        Some(Error::MissingArtifact { .. }) => 3,
        Some(Error::Numerical(_) | Error::Tensor(TensorError::NonFinite(_))) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

struct Run {
    out: PathBuf,
    ws: Workspace,
    active_experts: Option<usize>,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let stored = cli.out.join("config.toml");
    let path = cli.config.clone().or_else(|| stored.exists().then_some(stored));
    let mut cfg = match &path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(m) = cli.merge_mode {
        cfg.merge.mode = match m {
            MergeArg::Diverged => MergeMode::Diverged,
            MergeArg::All => MergeMode::All,
        };
    }
    if let Some(l) = cli.mix_ratio {
        cfg.stages.sft.mix_ratio = l;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    fs::create_dir_all(&cli.out)?;
    fs::write(cli.out.join("config.toml"), toml::to_string(&cfg)?)?;
    let r = Run {
        out: cli.out.clone(),
        ws: Workspace::new(cfg)?,
        active_experts: cli.active_experts,
    };
    match &cli.command {
        Command::InitBase => r.init_base(),
        Command::Branch { domain } => r.branch(domain, cli.force),
        Command::Midtrain { domain } => r.stage(domain, StageKind::Midtrain),
        Command::Sft { domain } => r.stage(domain, StageKind::Sft),
        Command::Rlvr { domain } => r.stage(domain, StageKind::Rlvr),
        Command::Compose { domains } => r.compose(domains),
        Command::TrainRouter => r.train_router(),
        Command::AddExpert { domain } => r.add_expert(domain),
        Command::SwapExpert { old, new } => r.swap_expert(old, new),
        Command::Baseline { kind } => r.baseline(*kind),
        Command::Eval { model } => r.eval(model.as_deref()),
        Command::Ablate { kind } => r.ablate(kind),
        Command::CostReport => r.cost_report(),
        Command::ReproduceAll => r.reproduce_all(),
    }
}

fn write_metrics(path: &Path, metrics: &[StepMetric]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    train::write_metrics_csv(metrics, File::create(path)?)?;
    Ok(())
}

fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    report.write_csv(File::create(path)?)?;
    println!("{}", report.summary());
    Ok(())
}

impl Run {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn expert_dir(&self, domain: &str) -> PathBuf {
        self.out.join("experts").join(domain)
    }

    fn base(&self) -> Result<BaseModels> {
        Ok(BaseModels {
            m_pre: load_required(&self.path("base/m_pre.ckpt"), "bar init-base")?,
            m: load_required(&self.path("base/m.ckpt"), "bar init-base")?,
            events: Vec::new(),
            metrics: Vec::new(),
        })
    }

    fn record(&self, events: impl IntoIterator<Item = CostEvent>) -> Result<()> {
        let path = self.path("ledger.csv");
        let mut ledger = if path.exists() {
            CostLedger::read_csv(File::open(&path)?)?
        } else {
            CostLedger::new()
        };
        ledger.extend(events);
        ledger.write_csv(File::create(&path)?)?;
        Ok(())
    }

    fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            n_active: self.active_experts,
            ..self.ws.cfg.eval_options()
        }
    }

    fn init_base(&self) -> Result<()> {
        let base = pipeline::init_base(&self.ws)?;
        base.m_pre.save(&self.path("base/m_pre.ckpt"))?;
        base.m.save(&self.path("base/m.ckpt"))?;
        write_metrics(&self.path("base/metrics.csv"), &base.metrics)?;
        self.record(base.events.iter().cloned())?;
        write_report(&self.path("base/eval.csv"), &self.ws.eval_suite(&base.m, "M")?)
    }

    fn branch(&self, domain: &str, force: bool) -> Result<()> {
        let spec = self.ws.domain(domain)?;
        let target = self.expert_dir(domain).join("model.ckpt");
        if target.exists() && !force {
            return Err(Refused(format!("{domain} is already branched at {}; pass --force to redo it", target.display())).into());
        }
        let ck = pipeline::branch(&self.base()?, &spec)?;
        ck.save(&self.expert_dir(domain).join("branch.ckpt"))?;
        ck.save(&target)?;
        log::info!("branched {domain} into {}", target.display());
        Ok(())
    }

    fn stage(&self, domain: &str, stage: StageKind) -> Result<()> {
        let spec = self.ws.domain(domain)?;
        let dir = self.expert_dir(domain);
        let model = load_required(&dir.join("model.ckpt"), &format!("bar branch {domain}"))?;
        let plan = self.ws.cfg.plan_for(stage, domain);
        let out = pipeline::run_stage(&self.ws, model, &spec, stage, &plan, None)?;
        out.model.save(&dir.join(format!("{stage}.ckpt")))?;
        out.model.save(&dir.join("model.ckpt"))?;
        write_metrics(&dir.join(format!("{stage}_metrics.csv")), &out.metrics)?;
        self.record(out.events)?;
        let report = self.ws.eval(&out.model, &format!("{domain}-{stage}"), &[self.ws.domain("anchor")?, spec])?;
        write_report(&dir.join(format!("{stage}_eval.csv")), &report)
    }

    fn package(&self, m: &Checkpoint, slot: &str, source: &str) -> Result<ExpertPackage> {
        let ck = load_required(&self.expert_dir(source).join("model.ckpt"), &format!("bar branch {source}"))?;
        Ok(ExpertPackage::new(slot, ck, m, self.ws.cfg.merge.tolerance)?)
    }

    /// Slot label to expert directory for the current composed model.
    fn sources(&self) -> Result<BTreeMap<String, String>> {
        let path = self.path("composed/sources.json");
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.display().to_string(),
                hint: "bar compose".into(),
            }
            .into());
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    fn packages(&self, m: &Checkpoint, composed: &Checkpoint, sources: &BTreeMap<String, String>) -> Result<Vec<ExpertPackage>> {
        composed.slots[1..]
            .iter()
            .map(|slot| {
                let src = sources.get(slot).map_or(slot.as_str(), String::as_str);
                self.package(m, slot, src)
            })
            .collect()
    }

    fn save_composed(&self, composed: compose::Composed, sources: &BTreeMap<String, String>) -> Result<()> {
        composed.checkpoint.save(&self.path("composed/composed.ckpt"))?;
        fs::write(self.path("composed/merge_report.txt"), composed.report.to_text())?;
        fs::write(self.path("composed/sources.json"), serde_json::to_string_pretty(sources)?)?;
        Ok(())
    }

    fn compose(&self, domains: &[String]) -> Result<()> {
        let base = self.base()?;
        let domains: Vec<String> = if domains.is_empty() {
            ADD_ORDER
                .iter()
                .filter(|d| self.expert_dir(d).join("model.ckpt").exists())
                .map(|d| d.to_string())
                .collect()
        } else {
            domains.to_vec()
        };
        if domains.is_empty() {
            return Err(Error::MissingArtifact {
                path: self.path("experts").display().to_string(),
                hint: "bar branch <domain>".into(),
            }
            .into());
        }
        let pkgs = domains
            .iter()
            .map(|d| self.package(&base.m, d, d))
            .collect::<Result<Vec<_>>>()?;
        let composed = compose::compose(&base.m, &pkgs, self.ws.cfg.merge)?;
        let sources = domains.iter().map(|d| (d.clone(), d.clone())).collect();
        self.save_composed(composed, &sources)?;
        log::info!("composed {} experts", domains.len());
        Ok(())
    }

    fn route(&self, composed: Checkpoint, label: &str) -> Result<()> {
        let (model, stats, out) = pipeline::route_sourced(&self.ws, composed, label, &self.sources()?)?;
        model.save(&self.path("composed/model.ckpt"))?;
        stats.write_csv(File::create(self.path("composed/routing.csv"))?)?;
        write_metrics(&self.path("composed/router_metrics.csv"), &out.metrics)?;
        self.record(out.events)?;
        write_report(&self.path("composed/eval.csv"), &self.ws.eval_suite(&model, label)?)
    }

    fn train_router(&self) -> Result<()> {
        let composed = load_required(&self.path("composed/composed.ckpt"), "bar compose")?;
        self.route(composed, "router")
    }

    fn add_expert(&self, domain: &str) -> Result<()> {
        let base = self.base()?;
        let current = load_required(&self.path("composed/model.ckpt"), "bar train-router")?;
        let mut sources = self.sources()?;
        let existing = self.packages(&base.m, &current, &sources)?;
        let pkg = self.package(&base.m, domain, domain)?;
        let composed = compose::add_expert(&current, &base.m, &existing, pkg, self.ws.cfg.merge)?;
        sources.insert(domain.to_string(), domain.to_string());
        let ck = composed.checkpoint.clone();
        self.save_composed(composed, &sources)?;
        self.route(ck, &format!("+{domain}"))
    }

    fn swap_expert(&self, old: &str, new: &str) -> Result<()> {
        self.ws.domain(new)?;
        let base = self.base()?;
        let current = load_required(&self.path("composed/model.ckpt"), "bar train-router")?;
        let mut sources = self.sources()?;
        let existing = self.packages(&base.m, &current, &sources)?;
        let pkg = self.package(&base.m, old, new)?;
        let composed = compose::swap_expert(&current, &base.m, &existing, old, pkg, self.ws.cfg.merge)?;
        sources.insert(old.to_string(), new.to_string());
        let ck = composed.checkpoint.clone();
        self.save_composed(composed, &sources)?;
        self.route(ck, &format!("swap-{old}"))
    }

    fn baseline(&self, kind: BaselineKind) -> Result<()> {
        let base = self.base()?;
        let dir = self.path("baselines").join(kind.name());
        fs::create_dir_all(&dir)?;
        let (model, events) = match kind {
            BaselineKind::Continual => {
                let (phases, events) = pipeline::continual_baseline(&self.ws, &base)?;
                let snaps: Vec<(String, Checkpoint)> = phases.iter().map(|p| (p.label.clone(), p.checkpoint.clone())).collect();
                let matrix = eval::interference_matrix(&snaps, &self.ws.suite, &self.ws.vocab, &self.ws.cfg.eval_options())?;
                matrix.write_csv(File::create(dir.join("phases.csv"))?)?;
                let last = phases.into_iter().last().context("continual baseline produced no phases")?;
                (last.checkpoint, events)
            }
            BaselineKind::Soup | BaselineKind::Btx => {
                let dense = pipeline::dense_experts(&self.ws, &base)?;
                if matches!(kind, BaselineKind::Soup) {
                    let aligned: Vec<Checkpoint> = dense
                        .iter()
                        .map(|(_, c)| compose::aligned_initial(c, self.ws.vocab.len()))
                        .collect::<bar_core::Result<_>>()?;
                    (compose::soup_merge(&aligned)?, Vec::new())
                } else {
                    let btx = compose::btx_compose(&base.m, &dense)?;
                    let (model, _, out) = pipeline::route(&self.ws, btx, "btx")?;
                    (model, out.events)
                }
            }
            BaselineKind::RetrainPost => pipeline::retrain_baseline(&self.ws, &base, false)?,
            BaselineKind::RetrainFull => pipeline::retrain_baseline(&self.ws, &base, true)?,
        };
        model.save(&dir.join("model.ckpt"))?;
        self.record(events)?;
        let report = eval::evaluate(&model, kind.name(), &self.ws.suite, &self.ws.vocab, &self.eval_options())?;
        write_report(&dir.join("eval.csv"), &report)
    }

    fn eval(&self, model: Option<&Path>) -> Result<()> {
        let path = model.map_or_else(|| self.path("composed/model.ckpt"), Path::to_path_buf);
        let ck = load_required(&path, "bar train-router")?;
        let id = path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
        let report = eval::evaluate(&ck, &id, &self.ws.suite, &self.ws.vocab, &self.eval_options())?;
        let name = match self.active_experts {
            Some(n) => format!("eval/{id}_active{n}.csv"),
            None => format!("eval/{id}.csv"),
        };
        write_report(&self.path(&name), &report)
    }

    fn ablate(&self, kind: &AblateKind) -> Result<()> {
        let base = self.base()?;
        let dir = self.path("ablations");
        match kind {
            AblateKind::FreezeEmbeddings => {
                let run = pipeline::ablate_freeze_embeddings(&self.ws, &base)?;
                run.checkpoint.save(&dir.join("freeze-embeddings/model.ckpt"))?;
                let tool = self.ws.domain("tool")?;
                write_report(&dir.join("freeze-embeddings/eval.csv"), &self.ws.eval(&run.checkpoint, "tool-frozen-embeddings", &[tool])?)
            }
            AblateKind::FreezeSharedRl => {
                let start = load_required(&self.expert_dir("math").join("sft.ckpt"), "bar sft math")?;
                let out = pipeline::ablate_freeze_shared_rl(&self.ws, &start, "math")?;
                write_metrics(&dir.join("freeze-shared-rl/metrics.csv"), &out.metrics)?;
                let mut norms = csv::Writer::from_path(dir.join("freeze-shared-rl/grad_norms.csv"))?;
                norms.write_record(["step", "shared_grad_norm", "expert_grad_norm"])?;
                for m in &out.metrics {
                    norms.write_record([m.step.to_string(), format!("{:?}", m.shared_grad_norm), format!("{:?}", m.expert_grad_norm)])?;
                }
                norms.flush()?;
                let math = self.ws.domain("math")?;
                write_report(&dir.join("freeze-shared-rl/eval.csv"), &self.ws.eval(&out.model, "math-frozen-shared-rl", &[math])?)
            }
            AblateKind::SftMix { lambda } => {
                let start = load_required(&self.expert_dir("math").join("midtrain.ckpt"), "bar midtrain math")?;
                let out = pipeline::ablate_sft_mix(&self.ws, &start, "math", *lambda)?;
                let suite = [self.ws.domain("anchor")?, self.ws.domain("math")?];
                write_report(&dir.join(format!("sft-mix-{lambda}/eval.csv")), &self.ws.eval(&out.model, &format!("sft-mix-{lambda}"), &suite)?)
            }
        }
    }

    fn cost_report(&self) -> Result<()> {
        let path = self.path("ledger.csv");
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.display().to_string(),
                hint: "bar init-base".into(),
            }
            .into());
        }
        let ledger = pipeline::tag_additions(&CostLedger::read_csv(File::open(&path)?)?, &ADD_ORDER);
        let bar = cost_summary(&ledger, CostMode::Bar)?;
        let retrain = cost_summary(&ledger, CostMode::Retrain)?;
        let mut w = csv::Writer::from_path(self.path("cost.csv"))?;
        w.write_record(["addition", "bar_tokens", "bar_cumulative", "retrain_tokens", "retrain_cumulative"])?;
        println!("addition  bar_tokens  bar_cumulative  retrain_tokens  retrain_cumulative");
        for i in 0..bar.per_addition.len() {
            let row = [
                (i + 1).to_string(),
                bar.per_addition[i].to_string(),
                bar.cumulative[i].to_string(),
                retrain.per_addition[i].to_string(),
                retrain.cumulative[i].to_string(),
            ];
            println!("{:>8}  {:>10}  {:>14}  {:>14}  {:>18}", row[0], row[1], row[2], row[3], row[4]);
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    fn reproduce_all(&self) -> Result<()> {
        let r = pipeline::reproduce(&self.ws)?;
        pipeline::write_reproduction(&r, &self.out)?;
        let sources: BTreeMap<String, String> = ADD_ORDER.iter().map(|d| (d.to_string(), d.to_string())).collect();
        fs::write(self.path("composed/sources.json"), serde_json::to_string_pretty(&sources)?)?;
        println!("{}", r.upgrade_before.summary());
        println!("{}", r.upgrade_after.summary());
        r.upgrade_before.write_csv(File::create(self.path("upgrade_before.csv"))?)?;
        r.upgrade_after.write_csv(File::create(self.path("upgrade_after.csv"))?)?;
        let tagged = r.ledger.clone();
        let bar = cost_summary(&tagged, CostMode::Bar)?;
        let retrain = cost_summary(&tagged, CostMode::Retrain)?;
        println!("cost per addition (tokens): bar {:?}, retrain {:?}", bar.per_addition, retrain.per_addition);
        let mut m = Vec::new();
        r.matrix.write_csv(&mut m)?;
        println!("{}", String::from_utf8_lossy(&m));
        Ok(())
    }
}
