//! Pre-norm decoder-only transformer whose FFN block is a set of parallel
//! experts behind a per-layer linear router with top-k gating.
//!
//! A dense model is the `n_experts == 1` case: one FFN, no router, and the
//! exact same sequence of floating-point operations.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::config::{names, MoeModelConfig};
use crate::error::{Error, Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// How the MoE block picks experts for each token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Routing {
    /// Router logits, top-k selection, softmax over the selected logits.
    Learned,
    /// Every token goes to one expert with gate 1.0; the router is unused.
    Override(usize),
}

/// Per-layer, per-token gate vectors of one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingTrace {
    pub gates: Vec<Vec<Vec<f64>>>,
}

impl RoutingTrace {
    /// Experts with a nonzero gate for `token` in `layer`.
    pub fn selected(&self, layer: usize, token: usize) -> Vec<usize> {
        self.gates[layer][token]
            .iter()
            .enumerate()
            .filter(|(_, &g)| g != 0.0)
            .map(|(e, _)| e)
            .collect()
    }

    /// Highest-gate expert for `token` in `layer` (lowest index on ties).
    pub fn top_expert(&self, layer: usize, token: usize) -> usize {
        let g = &self.gates[layer][token];
        let mut best = 0;
        for (e, &v) in g.iter().enumerate() {
            if v > g[best] {
                best = e;
            }
        }
        best
    }
}

pub struct Forward {
    pub logits: Var,
    pub trace: RoutingTrace,
    /// Tape leaf of every parameter.
    pub vars: BTreeMap<String, Var>,
}

fn normal(rng: &mut ChaCha8Rng, std: f64, n: usize) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Seeded initialization. Routers start at zero so an untrained router gates
/// uniformly.
pub fn init_params(config: &MoeModelConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let residual_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
    let mut store = ParamStore::new();
    for (name, shape) in config.param_shapes() {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".norm") {
            vec![1.0; n]
        } else if name.ends_with(".router") {
            vec![0.0; n]
        } else if name == names::TOK_EMBED {
            normal(&mut rng, 0.5, n)
        } else if name == names::POS_EMBED {
            normal(&mut rng, 0.1, n)
        } else {
            let fan_in = shape[0] as f64;
            let mut std = 1.0 / fan_in.sqrt();
            if name.ends_with(".wo") || name.ends_with(".w_out") {
                std *= residual_scale;
            }
            normal(&mut rng, std, n)
        };
        store.insert(name, Tensor::new(shape, data).expect("shape from config"));
    }
    store
}

/// Binds every parameter as a tape leaf. Frozen parameters, or all of them
/// when `track_grads` is false, are bound without gradient tracking.
pub fn bind_params(tape: &mut Tape, store: &ParamStore, track_grads: bool) -> BTreeMap<String, Var> {
    store
        .iter()
        .map(|(name, p)| {
            let v = tape.leaf(p.tensor.clone(), track_grads && !p.frozen);
            (name.clone(), v)
        })
        .collect()
}

fn var(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Incompatible(format!("missing parameter {name}")))
}

fn ffn(tape: &mut Tape, vars: &BTreeMap<String, Var>, h: Var, layer: usize, expert: usize) -> Result<Var> {
    let w_in = var(vars, &names::ffn_in(layer, expert))?;
    let w_out = var(vars, &names::ffn_out(layer, expert))?;
    let a = tape.matmul(h, w_in)?;
    let a = tape.gelu(a);
    Ok(tape.matmul(a, w_out)?)
}

fn attention(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    config: &MoeModelConfig,
    h: Var,
    layer: usize,
) -> Result<Var> {
    let q = tape.matmul(h, var(vars, &names::attn(layer, "wq"))?)?;
    let k = tape.matmul(h, var(vars, &names::attn(layer, "wk"))?)?;
    let v = tape.matmul(h, var(vars, &names::attn(layer, "wv"))?)?;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(config.n_heads);
    for head in 0..config.n_heads {
        let qh = tape.slice_cols(q, head * dh, dh)?;
        let kh = tape.slice_cols(k, head * dh, dh)?;
        let vh = tape.slice_cols(v, head * dh, dh)?;
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.causal_softmax(scores)?;
        heads.push(tape.matmul(probs, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    Ok(tape.matmul(cat, var(vars, &names::attn(layer, "wo"))?)?)
}

fn check_input(config: &MoeModelConfig, tokens: &[usize], routing: Routing) -> Result<()> {
    if tokens.is_empty() || tokens.len() > config.max_seq_len {
        return Err(TensorError::IndexOutOfRange {
            what: "sequence length",
            index: tokens.len(),
            bound: config.max_seq_len,
        }
        .into());
    }
    if let Routing::Override(e) = routing {
        if e >= config.n_experts {
            return Err(Error::Config(format!(
                "routing override {e} >= n_experts {}",
                config.n_experts
            )));
        }
    }
    Ok(())
}

/// Runs the model over `tokens`, recording on `tape`.
pub fn forward(
    tape: &mut Tape,
    store: &ParamStore,
    config: &MoeModelConfig,
    tokens: &[usize],
    routing: Routing,
    track_grads: bool,
) -> Result<Forward> {
    let vars = bind_params(tape, store, track_grads);
    let (logits, trace) = forward_bound(tape, &vars, config, tokens, routing)?;
    Ok(Forward { logits, trace, vars })
}

/// Forward over parameters already bound by [`bind_params`], so several
/// sequences of one batch share the same leaves.
pub fn forward_bound(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    config: &MoeModelConfig,
    tokens: &[usize],
    routing: Routing,
) -> Result<(Var, RoutingTrace)> {
    check_input(config, tokens, routing)?;
    let t = tokens.len();
    let positions: Vec<usize> = (0..t).collect();
    let tok = tape.embedding(var(vars, names::TOK_EMBED)?, tokens)?;
    let pos = tape.embedding(var(vars, names::POS_EMBED)?, &positions)?;
    let mut x = tape.add(tok, pos)?;
    let mut trace = RoutingTrace::default();

    for layer in 0..config.n_layers {
        let h = tape.rms_norm(x, var(vars, &names::attn_norm(layer))?)?;
        let a = attention(tape, vars, config, h, layer)?;
        x = tape.add(x, a)?;

        let h = tape.rms_norm(x, var(vars, &names::ffn_norm(layer))?)?;
        let y = match routing {
            _ if config.n_experts == 1 => {
                trace.gates.push(vec![vec![1.0]; t]);
                ffn(tape, vars, h, layer, 0)?
            }
            Routing::Override(e) => {
                let mut one_hot = vec![0.0; config.n_experts];
                one_hot[e] = 1.0;
                trace.gates.push(vec![one_hot; t]);
                ffn(tape, vars, h, layer, e)?
            }
            Routing::Learned => {
                let logits = tape.matmul(h, var(vars, &names::router(layer))?)?;
                let gates = tape.top_k_gate(logits, config.top_k)?;
                let gv = tape.value(gates).clone();
                trace
                    .gates
                    .push((0..t).map(|i| gv.row(i).to_vec()).collect());
                let mut acc: Option<Var> = None;
                for e in 0..config.n_experts {
                    if (0..t).all(|i| gv.get2(i, e) == 0.0) {
                        continue;
                    }
                    let out = ffn(tape, vars, h, layer, e)?;
                    let weighted = tape.scale_rows(out, gates, e)?;
                    acc = Some(match acc {
                        None => weighted,
                        Some(prev) => tape.add(prev, weighted)?,
                    });
                }
                acc.expect("top_k >= 1 selects at least one expert")
            }
        };
        x = tape.add(x, y)?;
    }
    let h = tape.rms_norm(x, var(vars, names::FINAL_NORM)?)?;
    let logits = tape.matmul(h, var(vars, names::LM_HEAD)?)?;
    Ok((logits, trace))
}

/// Gradient-free forward returning the `T×V` logits and the routing trace.
pub fn infer(
    store: &ParamStore,
    config: &MoeModelConfig,
    tokens: &[usize],
    routing: Routing,
) -> Result<(Tensor, RoutingTrace)> {
    let mut tape = Tape::new();
    let f = forward(&mut tape, store, config, tokens, routing, false)?;
    Ok((tape.value(f.logits).clone(), f.trace))
}

/// Result of decoding one prompt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Completion {
    /// Generated tokens, EOS excluded.
    pub tokens: Vec<usize>,
    /// True when decoding stopped on EOS rather than a length limit.
    pub terminated: bool,
}

/// Autoregressive decoding from `prompt`. `temperature == None` is greedy
/// (lowest id on ties); otherwise tokens are sampled from
/// `softmax(logits / temperature)` with `rng`.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    store: &ParamStore,
    config: &MoeModelConfig,
    prompt: &[usize],
    routing: Routing,
    eos: usize,
    max_new: usize,
    temperature: Option<f64>,
    rng: &mut impl rand::Rng,
) -> Result<Completion> {
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, store, false);
    let base = tape.len();
    let mut seq = prompt.to_vec();
    let mut tokens = Vec::new();
    while tokens.len() < max_new && seq.len() < config.max_seq_len {
        tape.truncate(base);
        let (logits, _) = forward_bound(&mut tape, &vars, config, &seq, routing)?;
        let row = tape.value(logits).row(seq.len() - 1);
        let next = match temperature {
            None => argmax(row),
            Some(t) => sample_softmax(row, t, rng),
        };
        if next == eos {
            return Ok(Completion {
                tokens,
                terminated: true,
            });
        }
        tokens.push(next);
        seq.push(next);
    }
    Ok(Completion {
        tokens,
        terminated: false,
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_softmax(row: &[f64], temperature: f64, rng: &mut impl rand::Rng) -> usize {
    let mut p: Vec<f64> = row.iter().map(|v| v / temperature).collect();
    crate::tensor::softmax_in_place(&mut p);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Copies one expert slot's FFN tensors from `src` into `dst`.
pub fn copy_ffn(
    src: &ParamStore,
    src_slot: usize,
    dst: &mut ParamStore,
    dst_slot: usize,
    n_layers: usize,
) -> Result<()> {
    for l in 0..n_layers {
        for (from, to) in [
            (names::ffn_in(l, src_slot), names::ffn_in(l, dst_slot)),
            (names::ffn_out(l, src_slot), names::ffn_out(l, dst_slot)),
        ] {
            let t = src.tensor(&from)?.clone();
            dst.insert(to, t);
        }
    }
    Ok(())
}

fn check_compatible(store: &ParamStore, config: &MoeModelConfig, what: &str) -> Result<()> {
    store
        .check_against(config)
        .map_err(|e| Error::Incompatible(format!("{what}: {e}")))
}

/// Builds a `(1 + k)`-expert MoE from dense sources: shared layers from
/// `dense_shared`, slot 0 from `anchor_ffn_source` (frozen), slots `1..=k`
/// from `expert_ffn_sources`, routers at zero.
pub fn graft_to_moe(
    dense_shared: &ParamStore,
    anchor_ffn_source: &ParamStore,
    expert_ffn_sources: &[&ParamStore],
    dense_config: &MoeModelConfig,
) -> Result<(ParamStore, MoeModelConfig)> {
    if !dense_config.is_dense() {
        return Err(Error::Incompatible("graft sources must be dense".into()));
    }
    check_compatible(dense_shared, dense_config, "shared source")?;
    check_compatible(anchor_ffn_source, dense_config, "anchor source")?;
    for (i, s) in expert_ffn_sources.iter().enumerate() {
        check_compatible(s, dense_config, &format!("expert source {i}"))?;
    }
    let config = dense_config.with_experts(1 + expert_ffn_sources.len());
    let mut out = ParamStore::new();
    for (name, p) in dense_shared.iter() {
        if crate::params::is_shared(name) {
            out.insert(name.clone(), p.tensor.clone());
        }
    }
    copy_ffn(anchor_ffn_source, 0, &mut out, 0, config.n_layers)?;
    for (i, src) in expert_ffn_sources.iter().enumerate() {
        copy_ffn(src, 0, &mut out, i + 1, config.n_layers)?;
    }
    if config.has_router() {
        for l in 0..config.n_layers {
            out.insert(names::router(l), Tensor::zeros(&[config.d_model, config.n_experts]));
        }
    }
    for (name, p) in out.iter_mut() {
        p.frozen = name.contains(".expert.0.");
    }
    out.check_against(&config)?;
    Ok((out, config))
}

/// Appends rows (embedding) and columns (LM head) for new token ids
/// `old..new_vocab`. Embedding rows are the mean of the existing rows plus
/// seeded N(0, 0.02²) noise that depends only on `(seed, token id)`. LM-head
/// columns are the exact mean of the existing columns, so new tokens are
/// indistinguishable as outputs until the head is trained.
/// Extending in one call and in several calls differs, since the mean moves.
pub fn extend_vocab(store: &mut ParamStore, config: &mut MoeModelConfig, new_vocab: usize, seed: u64) -> Result<()> {
    let old = config.vocab_size;
    if new_vocab < old {
        return Err(Error::Config(format!("cannot shrink vocab {old} -> {new_vocab}")));
    }
    if new_vocab == old {
        return Ok(());
    }
    let d = config.d_model;
    let noise_for = |token: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (token as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        normal(&mut rng, 0.02, d)
    };

    let emb = store.tensor(names::TOK_EMBED)?.clone();
    let mut mean = vec![0.0; d];
    for r in 0..old {
        for (m, v) in mean.iter_mut().zip(emb.row(r)) {
            *m += v / old as f64;
        }
    }
    let mut data = emb.into_data();
    for tok in old..new_vocab {
        let noise = noise_for(tok);
        data.extend(mean.iter().zip(&noise).map(|(m, n)| m + n));
    }
    let frozen = store.get(names::TOK_EMBED).map(|p| p.frozen).unwrap_or(false);
    store.insert(names::TOK_EMBED, Tensor::new(vec![new_vocab, d], data)?);
    store.get_mut(names::TOK_EMBED).expect("inserted").frozen = frozen;

    let head = store.tensor(names::LM_HEAD)?.clone();
    let mut out = Vec::with_capacity(d * new_vocab);
    for r in 0..d {
        let row = head.row(r);
        let m = row.iter().sum::<f64>() / old as f64;
        out.extend_from_slice(row);
        out.extend(std::iter::repeat(m).take(new_vocab - old));
    }
    let frozen = store.get(names::LM_HEAD).map(|p| p.frozen).unwrap_or(false);
    store.insert(names::LM_HEAD, Tensor::new(vec![d, new_vocab], out)?);
    store.get_mut(names::LM_HEAD).expect("inserted").frozen = frozen;
    config.vocab_size = new_vocab;
    Ok(())
}
