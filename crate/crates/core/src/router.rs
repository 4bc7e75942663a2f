//! Router-only training on a stratified sample, routing statistics and the
//! active-expert setting.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::MoeModelConfig;
use crate::domains::{Example, Vocab};
use crate::error::{Error, Result};
use crate::model::{self, Routing};
use crate::params::StageKind;
use crate::train::{self, StageOutput, StagePlan};

/// `round(fraction * N_d)` examples from every domain without replacement,
/// then one deterministic shuffle of the union.
pub fn stratified_sample(
    sets: &BTreeMap<String, Vec<Example>>,
    fraction: f64,
    seed: u64,
) -> Result<Vec<(String, Example)>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("sample fraction {fraction} outside (0, 1]")));
    }
    let mut out = Vec::new();
    for (i, (domain, pairs)) in sets.iter().enumerate() {
        let n = (fraction * pairs.len() as f64).round() as usize;
        if n == 0 {
            return Err(Error::Empty(format!("stratified sample of {domain}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((i as u64 + 1) << 48));
        let mut picked = index::sample(&mut rng, pairs.len(), n).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|j| (domain.clone(), pairs[j].clone())));
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out)
}

/// Splits each domain's pairs into `(train, heldout)` with the last
/// `heldout_fraction` reserved.
pub fn reserve_heldout(
    sets: &BTreeMap<String, Vec<Example>>,
    heldout_fraction: f64,
) -> (BTreeMap<String, Vec<Example>>, BTreeMap<String, Vec<Example>>) {
    let mut train = BTreeMap::new();
    let mut held = BTreeMap::new();
    for (d, pairs) in sets {
        let n_held = (pairs.len() as f64 * heldout_fraction).round() as usize;
        let cut = pairs.len() - n_held.min(pairs.len());
        train.insert(d.clone(), pairs[..cut].to_vec());
        held.insert(d.clone(), pairs[cut..].to_vec());
    }
    (train, held)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRow {
    pub domain: String,
    pub expert_index: usize,
    pub token_share: f64,
}

/// Per-domain share of tokens whose highest-gate expert is each slot,
/// pooled over layers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingStats {
    pub rows: Vec<RoutingRow>,
}

impl RoutingStats {
    pub fn share(&self, domain: &str, expert: usize) -> f64 {
        self.rows
            .iter()
            .find(|r| r.domain == domain && r.expert_index == expert)
            .map_or(0.0, |r| r.token_share)
    }

    /// `(expert, share)` of the most-selected expert for `domain`.
    pub fn modal(&self, domain: &str) -> Option<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.domain == domain)
            .fold(None, |best: Option<&RoutingRow>, r| match best {
                Some(b) if b.token_share >= r.token_share => Some(b),
                _ => Some(r),
            })
            .map(|r| (r.expert_index, r.token_share))
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Routing histogram of `model` over the given held-out pairs. Every token
/// after BOS of `prompt PROMPT_END response EOS` counts once per layer.
pub fn routing_stats(
    model: &Checkpoint,
    heldout: &BTreeMap<String, Vec<Example>>,
    vocab: &Vocab,
) -> Result<RoutingStats> {
    let e = model.config.n_experts;
    let mut rows = Vec::new();
    for (domain, pairs) in heldout {
        let mut counts = vec![0u64; e];
        for ex in pairs {
            let (seq, _) = ex.full_sequence(vocab);
            let (_, trace) = model::infer(&model.params, &model.config, &seq, Routing::Learned)?;
            for layer in 0..model.config.n_layers {
                for t in 1..seq.len() {
                    counts[trace.top_expert(layer, t)] += 1;
                }
            }
        }
        let total = counts.iter().sum::<u64>().max(1) as f64;
        rows.extend(counts.iter().enumerate().map(|(i, &c)| RoutingRow {
            domain: domain.clone(),
            expert_index: i,
            token_share: c as f64 / total,
        }));
    }
    Ok(RoutingStats { rows })
}

/// Trains only the router weights with the language-modelling loss on
/// `sample`, then measures routing on `heldout`.
pub fn train_router(
    composed: Checkpoint,
    sample: &[(String, Example)],
    heldout: &BTreeMap<String, Vec<Example>>,
    vocab: &Vocab,
    plan: &StagePlan,
) -> Result<(StageOutput, RoutingStats)> {
    if sample.is_empty() {
        return Err(Error::Empty("router sample".into()));
    }
    if plan.stage != StageKind::Router {
        return Err(Error::Config(format!("plan is for stage {}, expected router", plan.stage)));
    }
    let pairs: Vec<Example> = sample.iter().map(|(_, e)| e.clone()).collect();
    let plan = StagePlan {
        mix_ratio: 0.0,
        ..plan.clone()
    };
    let out = train::supervised(composed, "all", &pairs, &[], vocab, &plan, None, Some(Routing::Learned))?;
    let stats = routing_stats(&out.model, heldout, vocab)?;
    Ok((out, stats))
}

/// Inference configuration with `n_active` experts per token.
pub fn set_active_experts(composed: &Checkpoint, n_active: usize) -> Result<MoeModelConfig> {
    if n_active == 0 || n_active > composed.config.n_experts {
        return Err(Error::Config(format!(
            "active experts {n_active} outside [1, {}]",
            composed.config.n_experts
        )));
    }
    Ok(MoeModelConfig {
        top_k: n_active,
        ..composed.config.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gate;
    use crate::domains::{make_anchor_domain, make_math_domain, Split};
    use crate::params::ParamStore;

    fn sets(n: usize) -> BTreeMap<String, Vec<Example>> {
        let v = Vocab::base();
        BTreeMap::from([
            ("anchor".to_string(), make_anchor_domain(0).examples(&v, Split::Train, n)),
            ("math".to_string(), make_math_domain(0).examples(&v, Split::Train, 2 * n)),
        ])
    }

    #[test]
    fn stratified_sampling() {
        let s = sets(1000);
        let sample = stratified_sample(&s, 0.05, 3).unwrap();
        assert_eq!(sample.iter().filter(|(d, _)| d == "anchor").count(), 50);
        assert_eq!(sample.iter().filter(|(d, _)| d == "math").count(), 100);
        assert_eq!(sample, stratified_sample(&s, 0.05, 3).unwrap());
        let small = sets(10);
        let full = stratified_sample(&small, 1.0, 1).unwrap();
        assert_eq!(full.len(), 30);
        for (d, pairs) in &small {
            for p in pairs {
                let k = full.iter().filter(|(fd, e)| fd == d && e == p).count();
                let dupes = pairs.iter().filter(|q| *q == p).count();
                assert_eq!(k, dupes);
            }
        }
        assert!(stratified_sample(&small, 0.01, 1).is_err());
        assert!(stratified_sample(&small, 0.0, 1).is_err());
    }

    #[test]
    fn heldout_reservation() {
        let (train, held) = reserve_heldout(&sets(100), 0.1);
        assert_eq!(train["anchor"].len(), 90);
        assert_eq!(held["math"].len(), 20);
    }

    #[test]
    fn active_expert_bounds_and_gates() {
        let c = MoeModelConfig::dense(1, 8, 2, 8, 10, 8).with_experts(5);
        let ck = Checkpoint::new(c.clone(), ParamStore::new(), vec![]);
        assert!(set_active_experts(&ck, 6).is_err());
        assert!(set_active_experts(&ck, 0).is_err());
        assert_eq!(set_active_experts(&ck, 1).unwrap().top_k, 1);
        let logits = [0.3, -1.0, 2.0, 0.3, 0.1];
        let one = gate(&logits, 1);
        assert_eq!(one, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        let all = gate(&logits, 5);
        let mut soft = logits.to_vec();
        crate::tensor::softmax_in_place(&mut soft);
        assert_eq!(all, soft);
    }
}
