//! Acceptance checks for the whole pipeline. Prints one PASS/FAIL line per
//! criterion and exits non-zero if any failed.
//!
//! The functional criteria share one full protocol run at the default
//! configuration, which takes several minutes on one core.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use bar_core::autograd::{gate, Tape, Var};
use bar_core::checkpoint::Checkpoint;
use bar_core::compose::{self, aligned_initial, ExpertPackage, MergeOptions};
use bar_core::config::{names, MoeModelConfig};
use bar_core::cost::{cost_summary, CostAction, CostEvent, CostLedger, CostMode};
use bar_core::domains::{make_math_domain, Split, Vocab};
use bar_core::model::{self, Routing};
use bar_core::params::{apply_freeze, is_shared, stage_mask, StageKind};
use bar_core::pipeline::{self, BaseModels, Reproduction, Workspace, ADD_ORDER};
use bar_core::router::{self, set_active_experts};
use bar_core::tensor::Tensor;
use bar_core::train::{self, group_advantages, loss_and_grads, BatchItem, StagePlan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Worst relative error between tape gradients and central differences of
/// `sum(f(inputs) * w)` for a fixed random projection `w`.
fn fd_worst(inputs: Vec<Tensor>, f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let h = 1e-6;
    let mut wrng = ChaCha8Rng::seed_from_u64(99);
    let project = |t: &mut Tape, y: Var, w: &Tensor| {
        let pv = t.constant(w.clone());
        let p = t.mul(y, pv).unwrap();
        t.sum(p)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let y = f(&mut tape, &vars);
    let w = random(&mut wrng, tape.value(y).shape());
    let out = project(&mut tape, y, &w);
    let grads = tape.backward(out);
    let eval = |vals: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = vals.iter().map(|x| t.leaf(x.clone(), true)).collect();
        let y = f(&mut t, &vs);
        let o = project(&mut t, y, &w);
        t.value(o).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; input.len()]);
        for i in 0..input.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let denom = numeric.abs().max(analytic[i].abs()).max(1e-2);
            worst = worst.max((numeric - analytic[i]).abs() / denom);
        }
    }
    worst
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    type Case = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
    let mut r = |s: &[usize]| random(&mut rng, s);
    let cases: Vec<(&str, Vec<Tensor>, Case)> = vec![
        ("matmul", vec![r(&[3, 4]), r(&[4, 2])], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap())),
        ("add", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
        ("mul", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
        ("scale", vec![r(&[3, 4])], Box::new(|t, v| t.scale(v[0], 0.7))),
        ("transpose", vec![r(&[3, 4])], Box::new(|t, v| t.transpose(v[0]))),
        (
            "slice_concat",
            vec![r(&[3, 4])],
            Box::new(|t, v| {
                let a = t.slice_cols(v[0], 0, 1).unwrap();
                let b = t.slice_cols(v[0], 1, 3).unwrap();
                t.concat_cols(&[b, a]).unwrap()
            }),
        ),
        ("rms_norm", vec![r(&[3, 4]), r(&[4])], Box::new(|t, v| t.rms_norm(v[0], v[1]).unwrap())),
        (
            "layer_norm",
            vec![r(&[3, 4]), r(&[4]), r(&[4])],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2]).unwrap()),
        ),
        ("gelu", vec![r(&[3, 4])], Box::new(|t, v| t.gelu(v[0]))),
        ("softmax_rows", vec![r(&[3, 4])], Box::new(|t, v| t.softmax(v[0], 1).unwrap())),
        ("softmax_cols", vec![r(&[3, 4])], Box::new(|t, v| t.softmax(v[0], 0).unwrap())),
        ("causal_softmax", vec![r(&[4, 4])], Box::new(|t, v| t.causal_softmax(v[0]).unwrap())),
        (
            "embedding",
            vec![r(&[5, 3])],
            Box::new(|t, v| t.embedding(v[0], &[4, 1, 1, 0]).unwrap()),
        ),
        (
            "scale_rows",
            vec![r(&[3, 4]), r(&[3, 2])],
            Box::new(|t, v| t.scale_rows(v[0], v[1], 1).unwrap()),
        ),
        (
            "top_k_gate",
            vec![Tensor::from_rows(&[&[0.3, -0.2, 0.9, 0.1], &[0.5, 0.4, -1.0, 0.2], &[0.0, 0.7, 0.6, -0.3]])],
            Box::new(|t, v| t.top_k_gate(v[0], 2).unwrap()),
        ),
        (
            "cross_entropy",
            vec![r(&[4, 6])],
            Box::new(|t, v| t.cross_entropy(v[0], &[1, 5, 0, 3], &[false, true, false, false]).unwrap()),
        ),
        (
            "weighted_nll",
            vec![r(&[4, 6])],
            Box::new(|t, v| t.weighted_nll(v[0], &[2, 0, 5, 1], &[0.5, 0.0, -1.25, 2.0]).unwrap()),
        ),
        ("sum", vec![r(&[3, 4])], Box::new(|t, v| t.sum(v[0]))),
    ];
    let mut worst_op = ("", 0.0f64);
    for (name, inputs, f) in &cases {
        let e = fd_worst(inputs.clone(), f.as_ref());
        if e > worst_op.1 {
            worst_op = (name, e);
        }
        ensure(e < 1e-5, format!("{name}: rel err {e:.2e}"))?;
    }

    let mut config = MoeModelConfig::dense(2, 8, 2, 12, 13, 10).with_experts(3);
    config.top_k = 2;
    let mut store = model::init_params(&config, 7);
    for l in 0..2 {
        for x in store.get_mut(&names::router(l)).unwrap().tensor.data_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
    }
    let items = vec![
        BatchItem::from_sequence(&[1, 5, 7, 2, 9, 4, 3], 3, 0.7),
        BatchItem::from_sequence(&[1, 8, 6, 6, 10, 2], 1, 0.3),
    ];
    let (_, grads) = loss_and_grads(&store, &config, Routing::Learned, &items).map_err(err)?;
    let h = 1e-5;
    let mut worst_model: f64 = 0.0;
    let all: Vec<String> = store.names().cloned().collect();
    for name in all {
        let n = store.tensor(&name).unwrap().len();
        for i in [0, n / 2, n - 1] {
            let orig = store.tensor(&name).unwrap().data()[i];
            store.get_mut(&name).unwrap().tensor.data_mut()[i] = orig + h;
            let up = loss_and_grads(&store, &config, Routing::Learned, &items).map_err(err)?.0;
            store.get_mut(&name).unwrap().tensor.data_mut()[i] = orig - h;
            let down = loss_and_grads(&store, &config, Routing::Learned, &items).map_err(err)?.0;
            store.get_mut(&name).unwrap().tensor.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads.get(&name).map_or(0.0, |g| g[i]);
            let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-6);
            worst_model = worst_model.max(rel);
            ensure(rel < 1e-4, format!("{name}[{i}]: analytic {an} numeric {fd}"))?;
        }
    }
    Ok(format!(
        "{} ops, worst op {} {:.1e}; 2-layer MoE worst {:.1e}",
        cases.len(),
        worst_op.0,
        worst_op.1,
        worst_model
    ))
}

// ---------------------------------------------------------------- 2

fn tiny_dense(vocab: &Vocab) -> Checkpoint {
    let c = MoeModelConfig::dense(1, 16, 2, 16, vocab.len(), 24);
    Checkpoint::new(c.clone(), model::init_params(&c, 3), vec![])
}

fn tiny_branch(m: &Checkpoint) -> Checkpoint {
    let pre = model::init_params(&m.config, 4);
    let (p, c) = model::graft_to_moe(&m.params, &m.params, &[&pre], &m.config).unwrap();
    Checkpoint::new(c, p, vec!["anchor".into(), "math".into()])
}

fn frozen_digest(ck: &Checkpoint, stage: StageKind) -> Result<(String, Vec<String>), String> {
    let mut probe = ck.params.clone();
    apply_freeze(&mut probe, &stage_mask(stage, &ck.config).map_err(err)?).map_err(err)?;
    let frozen: Vec<String> = probe.iter().filter(|(_, p)| p.frozen).map(|(n, _)| n.clone()).collect();
    let hash = ck.params.hash_where(|n, _| frozen.contains(&n.to_string()));
    Ok((hash, frozen))
}

fn freeze_contract() -> Outcome {
    let vocab = Vocab::base();
    let math = make_math_domain(0);
    let pairs = math.examples(&vocab, Split::Train, 64);
    let anchor = bar_core::domains::make_anchor_domain(0).examples(&vocab, Split::Train, 64);
    let branch = tiny_branch(&tiny_dense(&vocab));
    let mut lines = Vec::new();
    for stage in StageKind::ALL {
        let start = if stage == StageKind::Router {
            let pkg = ExpertPackage::new("math", branch.clone(), &tiny_dense(&vocab), 0.0).map_err(err)?;
            compose::compose(&tiny_dense(&vocab), &[pkg.clone(), ExpertPackage { domain: "x".into(), ..pkg }], MergeOptions::default())
                .map_err(err)?
                .checkpoint
        } else {
            branch.clone()
        };
        let (before, frozen) = frozen_digest(&start, stage)?;
        let plan = StagePlan {
            mix_ratio: if stage == StageKind::Sft { 0.5 } else { 0.0 },
            rl_group_size: 4,
            ..StagePlan::new(stage, 100, 2, 1e-2, 5)
        };
        let out = match stage {
            StageKind::Midtrain => train::midtrain(start, &math, &vocab, &plan, None),
            StageKind::Sft => train::sft(start, "math", &pairs, &anchor, &vocab, &plan, None),
            StageKind::Rlvr => train::rlvr(start, &math, &pairs, &vocab, &plan, None),
            StageKind::Router => {
                let sample: Vec<(String, _)> = pairs.iter().map(|e| ("math".to_string(), e.clone())).collect();
                let held = BTreeMap::from([("math".to_string(), pairs[..4].to_vec())]);
                router::train_router(start, &sample, &held, &vocab, &plan).map(|(o, _)| o)
            }
        }
        .map_err(err)?;
        let after = out.model.params.hash_where(|n, _| frozen.contains(&n.to_string()));
        ensure(before == after, format!("{stage}: frozen tensors changed"))?;
        ensure(out.metrics.len() == 100, format!("{stage}: ran {} steps", out.metrics.len()))?;
        lines.push(format!("{stage} {} frozen", frozen.len()));
    }
    Ok(lines.join(", "))
}

// ---------------------------------------------------------------- 4

fn merge_algebra() -> Outcome {
    let m = {
        let c = MoeModelConfig::dense(2, 8, 2, 12, 11, 8);
        Checkpoint::new(c.clone(), model::init_params(&c, 1), vec![])
    };
    let expert = |seed: u64, shift: f64| {
        let pre = model::init_params(&m.config, seed);
        let (mut p, c) = model::graft_to_moe(&m.params, &m.params, &[&pre], &m.config).unwrap();
        for (n, q) in p.iter_mut() {
            if is_shared(n) && shift != 0.0 {
                q.tensor.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x += shift * ((i % 5) as f64 - 2.0));
            }
        }
        Checkpoint::new(c, p, vec!["anchor".into(), "x".into()])
    };
    let pkg = |d: &str, c: Checkpoint| ExpertPackage::new(d, c, &m, 0.0).unwrap();
    let shared_eq = |a: &Checkpoint, b: &Checkpoint| {
        a.params
            .iter()
            .filter(|(n, _)| is_shared(n))
            .all(|(n, p)| b.params.get(n).map(|q| q.tensor == p.tensor).unwrap_or(false))
    };
    let opts = MergeOptions::default();

    let e = expert(5, 0.01);
    let same: Vec<_> = ["a", "b", "c"].iter().map(|d| pkg(d, e.clone())).collect();
    let c = compose::compose(&m, &same, opts).map_err(err)?.checkpoint;
    ensure(shared_eq(&c, &e), "mean of equal experts differs from the expert")?;

    let (x, y, z) = (pkg("x", expert(6, 0.02)), pkg("y", expert(7, -0.03)), pkg("z", expert(8, 0.0)));
    let fwd = compose::compose(&m, &[x.clone(), y.clone(), z.clone()], opts).map_err(err)?.checkpoint;
    let rev = compose::compose(&m, &[z.clone(), x.clone(), y.clone()], opts).map_err(err)?.checkpoint;
    ensure(shared_eq(&fwd, &rev), "shared average depends on expert order")?;
    for (slot_f, slot_r) in [(1, 2), (2, 3), (3, 1)] {
        for l in 0..2 {
            ensure(
                fwd.params.tensor(&names::ffn_in(l, slot_f)).unwrap() == rev.params.tensor(&names::ffn_in(l, slot_r)).unwrap(),
                "expert slots do not permute with their packages",
            )?;
        }
    }

    let base = compose::compose(&m, &[x.clone(), y.clone()], opts).map_err(err)?.checkpoint;
    let added = compose::add_expert(&base, &m, &[x.clone(), y.clone()], z.clone(), opts).map_err(err)?.checkpoint;
    for (n, p) in base.params.iter() {
        if !is_shared(n) && !n.starts_with("layer.") || n.contains(".expert.") {
            ensure(added.params.get(n).map(|q| q.tensor == p.tensor) == Some(true), format!("add changed {n}"))?;
        }
    }
    let pkgs = [x.clone(), y.clone(), z.clone()];
    let noop = compose::swap_expert(&added, &m, &pkgs, "y", y.clone(), opts).map_err(err)?.checkpoint;
    ensure(noop.to_bytes().unwrap() == added.to_bytes().unwrap(), "no-op swap changed bytes")?;

    let y2 = pkg("y", expert(9, 0.05));
    let swapped = compose::swap_expert(&added, &m, &pkgs, "y", y2.clone(), opts).map_err(err)?.checkpoint;
    for (n, p) in added.params.iter() {
        let untouched = n.contains(".expert.0.") || n.contains(".expert.1.") || n.contains(".expert.3.");
        if untouched {
            ensure(swapped.params.tensor(n).unwrap() == &p.tensor, format!("swap changed {n}"))?;
        }
    }
    let back = compose::swap_expert(&swapped, &m, &[x, y2, z], "y", y, opts).map_err(err)?.checkpoint;
    ensure(back.to_bytes().unwrap() == added.to_bytes().unwrap(), "swap is not an involution")?;
    Ok("mean-of-equals, permutation, add isolation, no-op swap, involution, slot isolation".into())
}

// ---------------------------------------------------------------- 10 (gate property)

fn gate_property(full: &Full) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for k in 1..=5 {
        for _ in 0..200 {
            let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let g = gate(&logits, k);
            let nz = g.iter().filter(|&&x| x != 0.0).count();
            ensure(nz == k, format!("gate with k={k} has {nz} nonzeros"))?;
            ensure((g.iter().sum::<f64>() - 1.0).abs() < 1e-12, "gate does not sum to 1")?;
        }
    }
    let model = full.repro.final_model();
    let ex = &full.ws.pairs("math").map_err(err)?[0];
    let (seq, _) = ex.full_sequence(&full.ws.vocab);
    for k in 1..=model.config.n_experts {
        let c = set_active_experts(model, k).map_err(err)?;
        let (_, trace) = model::infer(&model.params, &c, &seq, Routing::Learned).map_err(err)?;
        for layer in &trace.gates {
            for g in layer {
                let nz = g.iter().filter(|&&x| x != 0.0).count();
                ensure(nz == k, format!("model gate with k={k} has {nz} nonzeros"))?;
                ensure((g.iter().sum::<f64>() - 1.0).abs() < 1e-12, "model gate does not sum to 1")?;
            }
        }
    }
    Ok("gates exact".into())
}

// ---------------------------------------------------------------- 11

fn zero_variance() -> Outcome {
    let adv = group_advantages(&[1.0; 6]);
    ensure(adv.iter().all(|&a| a == 0.0), "identical rewards give nonzero advantages")?;
    let adv = group_advantages(&[0.0; 6]);
    ensure(adv.iter().all(|&a| a == 0.0), "identical zero rewards give nonzero advantages")?;

    // A policy that always emits EOS earns zero reward on every sample.
    let vocab = Vocab::base();
    let mut dense = tiny_dense(&vocab);
    let v = vocab.len();
    for (i, x) in dense.params.get_mut(names::LM_HEAD).unwrap().tensor.data_mut().iter_mut().enumerate() {
        *x = if i % v == vocab.eos() { 50.0 } else { 0.0 };
    }
    let branch = tiny_branch(&dense);
    let math = make_math_domain(0);
    let prompts = math.examples(&vocab, Split::Train, 16);
    let plan = StagePlan {
        rl_group_size: 4,
        ..StagePlan::new(StageKind::Rlvr, 5, 4, 1e-2, 1)
    };
    let out = train::rlvr(branch.clone(), &math, &prompts, &vocab, &plan, None).map_err(err)?;
    for m in &out.metrics {
        let norm = (m.shared_grad_norm.powi(2) + m.expert_grad_norm.powi(2)).sqrt();
        ensure(norm < 1e-12, format!("step {} gradient norm {norm}", m.step))?;
        ensure(m.loss_or_reward == 0.0, "EOS policy earned reward")?;
    }
    ensure(
        out.model.params.hash_where(|_, _| true) == branch.params.hash_where(|_, _| true),
        "parameters changed",
    )?;
    Ok(format!("{} steps, parameters byte-identical", out.metrics.len()))
}

// ---------------------------------------------------------------- 12

fn cost_ledger() -> Outcome {
    let c = 1_000u64;
    let router_cost = 7u64;
    let mut bar = CostLedger::new();
    bar.push(CostEvent::new(CostAction::Pretrain, "anchor", 12_345));
    for (i, d) in ADD_ORDER.iter().enumerate() {
        bar.push(CostEvent::new(CostAction::Midtrain, *d, c / 4).tagged(i + 1));
        bar.push(CostEvent::new(CostAction::Sft, *d, c / 2).tagged(i + 1));
        bar.push(CostEvent::new(CostAction::Rlvr, *d, c - c / 4 - c / 2).tagged(i + 1));
        bar.push(CostEvent::new(CostAction::Router, "all", router_cost).tagged(i + 1));
    }
    let b = cost_summary(&bar, CostMode::Bar).map_err(err)?;
    ensure(b.per_addition == vec![c + router_cost; 4], format!("bar per addition {:?}", b.per_addition))?;
    ensure(b.cumulative[3] == 4 * c + 4 * router_cost, "bar cumulative")?;
    let r = cost_summary(&bar, CostMode::Retrain).map_err(err)?;
    ensure(r.per_addition == vec![c, 2 * c, 3 * c, 4 * c], format!("retrain per addition {:?}", r.per_addition))?;
    ensure(r.cumulative[3] == 10 * c, "retrain cumulative")?;
    let derived = pipeline::retrain_ledger(&bar);
    let d = cost_summary(&derived, CostMode::Bar).map_err(err)?;
    ensure(d.per_addition == r.per_addition, "retrain ledger disagrees with retrain mode")?;
    Ok(format!("bar {:?}, retrain {:?}", b.cumulative, r.cumulative))
}

// ---------------------------------------------------------------- shared run

struct Full {
    ws: Workspace,
    repro: Reproduction,
}

impl Full {
    fn acc(&self, model: &Checkpoint, domain: &str) -> Result<f64, String> {
        let d = self.ws.domain(domain).map_err(err)?;
        let r = self.ws.eval(model, domain, &[d]).map_err(err)?;
        Ok(r.scores[0].accuracy)
    }

    fn base(&self) -> &BaseModels {
        &self.repro.base
    }
}

fn full_run() -> Result<Full, String> {
    let ws = Workspace::new(pipeline::PipelineConfig::default()).map_err(err)?;
    let repro = pipeline::reproduce(&ws).map_err(err)?;
    Ok(Full { ws, repro })
}

// ---------------------------------------------------------------- 3

fn anchor_preservation(full: &Full) -> Outcome {
    let m = &full.base().m;
    let mut pkgs = Vec::new();
    for d in ADD_ORDER {
        let mut ck = full.repro.experts[d].checkpoint.clone();
        let aligned = aligned_initial(m, ck.config.vocab_size).map_err(err)?;
        for (n, p) in ck.params.iter_mut() {
            if is_shared(n) {
                p.tensor = aligned.params.tensor(n).unwrap().clone();
            }
        }
        pkgs.push(ExpertPackage::new(d, ck, m, 0.0).map_err(err)?);
    }
    ensure(pkgs.iter().all(|p| p.diverged.is_empty()), "reset experts still diverge")?;
    let composed = compose::compose(m, &pkgs, full.ws.cfg.merge).map_err(err)?.checkpoint;
    let mut worst: f64 = 0.0;
    for d in ["anchor", "math", "tool"] {
        for ex in full.ws.pairs(d).map_err(err)?.iter().take(5) {
            let (seq, _) = ex.full_sequence(&full.ws.vocab);
            if seq.iter().any(|&t| t >= m.config.vocab_size) {
                continue;
            }
            let (a, _) = model::infer(&m.params, &m.config, &seq, Routing::Learned).map_err(err)?;
            let (b, _) = model::infer(&composed.params, &composed.config, &seq, Routing::Override(0)).map_err(err)?;
            for r in 0..a.rows() {
                for (x, y) in a.row(r).iter().zip(b.row(r)) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
    }
    ensure(worst <= 1e-9, format!("anchor-slot logits differ by {worst:e}"))?;
    let m_acc = full.acc(m, "anchor")?;
    let c_acc = full.acc(full.repro.final_model(), "anchor")?;
    ensure(
        (m_acc - c_acc).abs() <= 0.05,
        format!("anchor accuracy M {m_acc:.2} composed {c_acc:.2}"),
    )?;
    Ok(format!("logit diff {worst:.1e}; anchor acc M {m_acc:.2} composed {c_acc:.2}"))
}

// ---------------------------------------------------------------- 5

fn incremental_add(full: &Full) -> Outcome {
    let mx = &full.repro.matrix;
    let mut notes = Vec::new();
    let mut failures = Vec::new();
    let mut prev = "M".to_string();
    for (i, d) in ADD_ORDER.iter().enumerate() {
        let row = format!("+{d}");
        let gain = mx.cell(&row, d).unwrap() - mx.cell("M", d).unwrap();
        if gain < 0.3 {
            failures.push(format!("{d} gain {gain:.2}"));
        }
        let mut worst: f64 = 0.0;
        for earlier in std::iter::once("anchor").chain(ADD_ORDER[..i].iter().copied()) {
            let delta = (mx.cell(&row, earlier).unwrap() - mx.cell(&prev, earlier).unwrap()).abs();
            worst = worst.max(delta);
            if delta > 0.05 {
                failures.push(format!("{earlier} moved {delta:.2} at {row}"));
            }
        }
        notes.push(format!("{row} gain {gain:.2} max drift {worst:.2}"));
        prev = row;
    }
    if failures.is_empty() {
        Ok(notes.join("; "))
    } else {
        Err(format!("{} ({})", failures.join(", "), notes.join("; ")))
    }
}

// ---------------------------------------------------------------- 6

fn upgrade(full: &Full) -> Outcome {
    let before = &full.repro.upgrade_before;
    let after = &full.repro.upgrade_after;
    let gain = after.accuracy("code-v2").unwrap() - before.accuracy("code-v2").unwrap();
    ensure(gain >= 0.2, format!("code-v2 gain {gain:.2}"))?;
    let mut worst: f64 = 0.0;
    for s in &before.scores {
        if s.domain.starts_with("code") {
            continue;
        }
        let d = (after.accuracy(&s.domain).unwrap() - s.accuracy).abs();
        worst = worst.max(d);
        ensure(d <= 0.05, format!("{} moved {d:.2}", s.domain))?;
    }
    let old = full.repro.final_model();
    let new = &full.repro.upgraded;
    let code = old.slot_of("code").ok_or("no code slot")?;
    for n in old.params.names() {
        let is_expert = n.contains(".expert.");
        let in_code_slot = n.contains(&format!(".expert.{code}."));
        if is_expert && !in_code_slot {
            ensure(old.params.tensor(n).unwrap() == new.params.tensor(n).unwrap(), format!("{n} changed"))?;
        }
    }
    ensure(old.params.tensor(&names::ffn_in(0, code)).unwrap() != new.params.tensor(&names::ffn_in(0, code)).unwrap(), "code slot unchanged")?;
    Ok(format!("code-v2 gain {gain:.2}, others max drift {worst:.2}, other slots byte-identical"))
}

// ---------------------------------------------------------------- 7

fn frozen_embeddings(full: &Full) -> Outcome {
    let frozen = pipeline::ablate_freeze_embeddings(&full.ws, full.base()).map_err(err)?;
    let a_frozen = full.acc(&frozen.checkpoint, "tool")?;
    let a_open = full.acc(&full.repro.experts["tool"].checkpoint, "tool")?;
    ensure(
        a_open - a_frozen >= 0.3,
        format!("tool frozen {a_frozen:.2} unfrozen {a_open:.2}"),
    )?;
    Ok(format!("tool frozen {a_frozen:.2} vs unfrozen {a_open:.2}"))
}

// ---------------------------------------------------------------- 8

fn shared_rl(full: &Full) -> Outcome {
    let ws = &full.ws;
    let run = &full.repro.experts["math"];
    let mid = run
        .stages
        .iter()
        .find(|(s, _)| *s == StageKind::Midtrain)
        .map(|(_, c)| c.clone())
        .ok_or("no midtrain checkpoint")?;
    // A partially trained policy leaves the reward room to move.
    let math = ws.domain("math").map_err(err)?;
    let sft_plan = StagePlan {
        steps: full.ws.cfg.stages.sft.steps / 2,
        ..ws.cfg.plan_for(StageKind::Sft, "math-probe")
    };
    let start = pipeline::run_stage(ws, mid, &math, StageKind::Sft, &sft_plan, None).map_err(err)?.model;

    let frozen = pipeline::ablate_freeze_shared_rl(ws, &start, "math").map_err(err)?;
    ensure(
        frozen.metrics.iter().all(|m| m.shared_grad_norm == 0.0),
        "shared gradient norm nonzero with shared layers frozen",
    )?;
    let open = pipeline::run_stage(ws, start, &math, StageKind::Rlvr, &ws.cfg.plan_for(StageKind::Rlvr, "math"), None)
        .map_err(err)?;
    let first_norm = open.metrics[0].shared_grad_norm;
    ensure(first_norm > 0.0, "shared gradient norm zero at step 1 with the RLVR mask")?;
    let r = open.values();
    let k = r.len() / 5;
    let head = r[..k].iter().sum::<f64>() / k as f64;
    let tail = r[r.len() - k..].iter().sum::<f64>() / k as f64;
    ensure(tail - head >= 0.1, format!("reward first {head:.3} last {tail:.3}"))?;
    Ok(format!(
        "frozen shared norm 0 at all {} steps; open step-1 norm {first_norm:.2e}; reward {head:.3} -> {tail:.3}",
        frozen.metrics.len()
    ))
}

// ---------------------------------------------------------------- 9

fn sft_mix(full: &Full) -> Outcome {
    let ws = &full.ws;
    let base = full.base();
    let start = pipeline::branch(base, &ws.domain("tool").map_err(err)?).map_err(err)?;
    let domain_only = pipeline::ablate_sft_mix(ws, &start, "tool", 0.0).map_err(err)?.model;
    let mixed = pipeline::ablate_sft_mix(ws, &start, "tool", 0.5).map_err(err)?.model;
    let anchor_drop = full.acc(&mixed, "anchor")? - full.acc(&domain_only, "anchor")?;
    let domain_gap = (full.acc(&mixed, "tool")? - full.acc(&domain_only, "tool")?).abs();
    ensure(anchor_drop >= 0.2, format!("anchor drop {anchor_drop:.2}"))?;
    ensure(domain_gap <= 0.1, format!("tool differs by {domain_gap:.2}"))?;
    Ok(format!("anchor drop {anchor_drop:.2}, tool gap {domain_gap:.2}"))
}

// ---------------------------------------------------------------- 10

fn active_experts(full: &Full) -> Outcome {
    let sweep = &full.repro.sweep;
    let n = full.repro.final_model().config.n_experts;
    ensure(sweep.len() == n, format!("sweep has {} rows", sweep.len()))?;
    let mut buf = Vec::new();
    for r in sweep {
        r.write_csv(&mut buf).map_err(err)?;
    }
    let text = String::from_utf8(buf).map_err(err)?;
    for k in 1..=n {
        ensure(
            text.lines().any(|l| l.contains(&format!(",{k},overall,"))),
            format!("csv lacks n_active {k}"),
        )?;
    }
    let one = sweep[0].overall;
    let five = sweep[n - 1].overall;
    ensure(five >= one, format!("n_active {n} overall {five:.3} < n_active 1 {one:.3}"))?;
    let gates = gate_property(full)?;
    Ok(format!("overall 1: {one:.3}, {n}: {five:.3}; {gates}"))
}

// ---------------------------------------------------------------- 13

fn forgetting(full: &Full) -> Outcome {
    let (phases, _) = pipeline::continual_baseline(&full.ws, full.base()).map_err(err)?;
    let at = |label: &str| phases.iter().find(|p| p.label == label).map(|p| p.checkpoint.clone());
    let peak = at("sft:safety").ok_or("no safety SFT phase")?;
    let last = phases.last().ok_or("no phases")?.checkpoint.clone();
    let a_peak = full.acc(&peak, "safety")?;
    let a_last = full.acc(&last, "safety")?;
    let standalone = full.acc(&full.repro.experts["safety"].checkpoint, "safety")?;
    let composed = full.acc(full.repro.final_model(), "safety")?;
    let detail = format!(
        "continual safety {a_peak:.2} -> {a_last:.2}; BAR composed {composed:.2} vs expert {standalone:.2}"
    );
    ensure(a_peak - a_last >= 0.1, format!("no forgetting: {detail}"))?;
    ensure((composed - standalone).abs() <= 0.05, format!("composed safety off: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 14

fn tiny_config() -> pipeline::PipelineConfig {
    let mut cfg = pipeline::PipelineConfig::default();
    cfg.model.d_model = 16;
    cfg.model.d_ff = 16;
    cfg.model.n_heads = 2;
    cfg.model.n_layers = 1;
    cfg.data.n_train = 200;
    cfg.data.n_eval = 4;
    cfg.data.router_fraction = 0.2;
    cfg.data.max_new_tokens = 4;
    let s = &mut cfg.stages;
    for p in [&mut s.pretrain, &mut s.anchor_sft, &mut s.midtrain, &mut s.sft, &mut s.rlvr, &mut s.router] {
        p.steps = 6;
        p.batch_size = 2;
        p.schedule = train::Schedule::Constant;
    }
    s.rlvr.rl_group_size = 2;
    cfg
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut finals = Vec::new();
    for run in ["a", "b"] {
        let ws = Workspace::new(tiny_config()).map_err(err)?;
        let r = pipeline::reproduce(&ws).map_err(err)?;
        let out = dir.path().join(run);
        pipeline::write_reproduction(&r, &out).map_err(err)?;
        let bytes = r.final_model().to_bytes().map_err(err)?;
        let loaded = Checkpoint::load(&out.join("composed").join("model.ckpt")).map_err(err)?;
        ensure(&loaded == r.final_model(), "loaded checkpoint differs from the saved one")?;
        ensure(loaded.to_bytes().map_err(err)? == bytes, "re-serialization changed bytes")?;
        finals.push(out);
    }
    let mut compared = 0;
    for entry in walk(&finals[0]) {
        let rel = entry.strip_prefix(&finals[0]).unwrap();
        let a = std::fs::read(&entry).map_err(err)?;
        let b = std::fs::read(finals[1].join(rel)).map_err(err)?;
        ensure(a == b, format!("{} differs between runs", rel.display()))?;
        compared += 1;
    }
    Ok(format!("{compared} artifacts byte-identical across two runs; round trip exact"))
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

// ---------------------------------------------------------------- supplementary

fn midtrain_loss_decreases() -> Outcome {
    let vocab = Vocab::base();
    let math = make_math_domain(0);
    let branch = tiny_branch(&tiny_dense(&vocab));
    let plan = StagePlan::new(StageKind::Midtrain, 500, 8, 3e-3, 0);
    let out = train::midtrain(branch, &math, &vocab, &plan, None).map_err(err)?;
    let v = out.values();
    let first = v[..10].iter().sum::<f64>() / 10.0;
    let last = v[v.len() - 10..].iter().sum::<f64>() / 10.0;
    ensure(last < first, format!("loss {first:.3} -> {last:.3}"))?;
    Ok(format!("loss {first:.3} -> {last:.3}"))
}

fn router_specialization(full: &Full) -> Outcome {
    let last = full.repro.additions.last().ok_or("no additions")?;
    let stats = last.routing.as_ref().ok_or("no routing stats")?;
    let mut notes = Vec::new();
    let mut bad = Vec::new();
    for d in std::iter::once("anchor").chain(ADD_ORDER) {
        let slot = last.model.slot_of(d).ok_or(format!("no slot for {d}"))?;
        let (e, share) = stats.modal(d).ok_or(format!("no stats for {d}"))?;
        notes.push(format!("{d}->{e} {share:.2}"));
        if e != slot || share <= 0.5 {
            bad.push(d);
        }
    }
    let detail = notes.join(", ");
    ensure(bad.is_empty(), format!("not specialized: {bad:?} ({detail})"))?;
    Ok(detail)
}

fn sweep_shape(full: &Full) -> Outcome {
    let acc: Vec<f64> = full.repro.sweep.iter().map(|r| r.overall).collect();
    let drops: Vec<f64> = acc.windows(2).map(|w| w[1] - w[0]).collect();
    let worst = drops
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |b, (i, &d)| if d > b.1 { (i, d) } else { b });
    let detail = format!("overall by n_active {acc:.3?}");
    ensure(drops.iter().all(|&d| d >= -0.05), format!("not monotone: {detail}"))?;
    ensure(worst.0 + 1 < 4, format!("largest drop is above 4 active: {detail}"))?;
    Ok(detail)
}

fn math_column(full: &Full) -> Outcome {
    let mx = &full.repro.matrix;
    let col: Vec<f64> = ADD_ORDER.iter().map(|d| mx.cell(&format!("+{d}"), "math").unwrap()).collect();
    ensure(col.windows(2).all(|w| w[1] >= w[0] - 0.05), format!("math column {col:?}"))?;
    Ok(format!("math column {col:?}"))
}

fn code_versions(full: &Full) -> Outcome {
    let v1 = full.acc(&full.repro.experts["code"].checkpoint, "code-v2")?;
    let v2 = full.acc(&full.repro.experts["code-v2"].checkpoint, "code-v2")?;
    ensure(v1 < v2, format!("v1 expert {v1:.2} v2 expert {v2:.2} on the v2 split"))?;
    Ok(format!("v1 expert {v1:.2} < v2 expert {v2:.2} on the v2 split"))
}

fn soup_below_compose(full: &Full) -> Outcome {
    let dense = pipeline::dense_experts(&full.ws, full.base()).map_err(err)?;
    let aligned: Vec<Checkpoint> = dense
        .iter()
        .map(|(_, c)| aligned_initial(c, full.ws.vocab.len()))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let soup = compose::soup_merge(&aligned).map_err(err)?;
    let mean = |m: &Checkpoint| -> Result<f64, String> {
        let accs = ADD_ORDER.iter().map(|d| full.acc(m, d)).collect::<Result<Vec<_>, _>>()?;
        Ok(accs.iter().sum::<f64>() / accs.len() as f64)
    };
    let s = mean(&soup)?;
    let c = mean(full.repro.final_model())?;
    ensure(c - s >= 0.3, format!("soup {s:.2} composed {c:.2}"))?;
    Ok(format!("domain mean soup {s:.2} vs composed {c:.2}"))
}

// ---------------------------------------------------------------- driver

fn run(results: &mut Vec<(usize, &'static str, bool)>, id: usize, name: &'static str, f: impl FnOnce() -> Outcome) {
    let t = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = t.elapsed().as_secs_f64();
    let (ok, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    let tag = if ok { "PASS" } else { "FAIL" };
    if id == 0 {
        println!("{tag} check {name}: {detail} [{secs:.1}s]");
    } else {
        println!("{tag} criterion {id:>2} {name}: {detail} [{secs:.1}s]");
    }
    results.push((id, name, ok));
}

fn main() {
    let mut results = Vec::new();
    run(&mut results, 1, "gradient correctness", gradient_correctness);
    run(&mut results, 2, "freeze contract", freeze_contract);
    run(&mut results, 4, "merge algebra", merge_algebra);
    run(&mut results, 11, "zero-variance groups", zero_variance);
    run(&mut results, 12, "cost ledger", cost_ledger);
    run(&mut results, 14, "determinism and persistence", determinism);

    let t = Instant::now();
    let full = catch_unwind(full_run).unwrap_or_else(|_| Err("full run panicked".into()));
    println!("full protocol run finished in {:.1}s", t.elapsed().as_secs_f64());
    let heavy: [(usize, &'static str, fn(&Full) -> Outcome); 8] = [
        (3, "anchor preservation", anchor_preservation),
        (5, "incremental add", incremental_add),
        (6, "upgrade swap", upgrade),
        (7, "frozen embeddings", frozen_embeddings),
        (8, "shared layers in RLVR", shared_rl),
        (9, "SFT data mixing", sft_mix),
        (10, "active experts", active_experts),
        (13, "forgetting witness", forgetting),
    ];
    for (id, name, f) in heavy {
        match &full {
            Ok(full) => run(&mut results, id, name, || f(full)),
            Err(e) => run(&mut results, id, name, || Err(format!("full run failed: {e}"))),
        }
    }

    // Directional properties of the toy pipeline; reported but not criteria.
    println!("\nsupplementary checks:");
    let mut notes = Vec::new();
    run(&mut notes, 0, "midtrain loss decreases", midtrain_loss_decreases);
    let supplementary: [(&'static str, fn(&Full) -> Outcome); 5] = [
        ("router specialization", router_specialization),
        ("active-experts curve", sweep_shape),
        ("math column stable", math_column),
        ("code v1 below v2", code_versions),
        ("soup below compose", soup_below_compose),
    ];
    if let Ok(full) = &full {
        for (name, f) in supplementary {
            run(&mut notes, 0, name, || f(full));
        }
    }

    results.sort_by_key(|r| r.0);
    let failed: Vec<_> = results.iter().filter(|r| !r.2).collect();
    println!("\nsummary:");
    for (id, name, ok) in &results {
        println!("  {} {id:>2} {name}", if *ok { "PASS" } else { "FAIL" });
    }
    if !failed.is_empty() {
        eprintln!("{} of {} criteria failed", failed.len(), results.len());
        std::process::exit(1);
    }
}
