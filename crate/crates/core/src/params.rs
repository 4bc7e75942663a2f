//! Named parameter storage and freeze masks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use glob::Pattern;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{names, MoeModelConfig, ParamKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Ordered map `ParamId -> {tensor, frozen}`; iteration is lexicographic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(
            name.into(),
            Param {
                tensor,
                frozen: false,
            },
        );
    }

    pub fn insert_param(&mut self, name: impl Into<String>, param: Param) {
        self.params.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Incompatible(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn frozen_flags(&self) -> BTreeMap<String, bool> {
        self.params.iter().map(|(n, p)| (n.clone(), p.frozen)).collect()
    }

    pub fn set_all_frozen(&mut self, frozen: bool) {
        for p in self.params.values_mut() {
            p.frozen = frozen;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    /// Checks names and shapes against the architecture.
    pub fn check_against(&self, config: &MoeModelConfig) -> Result<()> {
        let expected = config.param_shapes();
        if expected.len() != self.params.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameters, found {}",
                expected.len(),
                self.params.len()
            )));
        }
        for (name, shape) in expected {
            let p = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Incompatible(format!("missing parameter {name}")))?;
            if p.tensor.shape() != shape.as_slice() {
                return Err(Error::Incompatible(format!(
                    "{name}: shape {:?}, expected {shape:?}",
                    p.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 over the names and bit patterns of all frozen tensors.
    pub fn frozen_hash(&self) -> String {
        self.hash_where(|_, p| p.frozen)
    }

    /// SHA-256 over the names and bit patterns of the selected tensors.
    pub fn hash_where(&self, mut select: impl FnMut(&str, &Param) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            if !select(name, p) {
                continue;
            }
            h.update(name.as_bytes());
            h.update([0u8]);
            for v in p.tensor.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezeMode {
    /// Matching parameters become frozen; the rest are left as they are.
    FreezeMatching,
    /// Matching parameters become trainable; the rest are left as they are.
    UnfreezeMatching,
    /// Matching parameters become trainable and every other one frozen.
    FreezeAllExceptMatching,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub patterns: Vec<String>,
    pub mode: FreezeMode,
}

impl FreezeMask {
    pub fn new(mode: FreezeMode, patterns: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            patterns: patterns.into_iter().map(Into::into).collect(),
            mode,
        }
    }

    pub fn freeze(patterns: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self::new(FreezeMode::FreezeMatching, patterns)
    }

    pub fn unfreeze(patterns: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self::new(FreezeMode::UnfreezeMatching, patterns)
    }

    pub fn only_trainable(patterns: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self::new(FreezeMode::FreezeAllExceptMatching, patterns)
    }
}

/// Sets frozen flags according to `mask`. Tensor values never change.
pub fn apply_freeze(store: &mut ParamStore, mask: &FreezeMask) -> Result<()> {
    let compiled = mask
        .patterns
        .iter()
        .map(|p| {
            Pattern::new(p)
                .map(|c| (p.as_str(), c))
                .map_err(|e| Error::Config(format!("bad pattern `{p}`: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    for (raw, pat) in &compiled {
        if !store.names().any(|n| pat.matches(n)) {
            return Err(Error::PatternUnmatched(raw.to_string()));
        }
    }
    for (name, p) in store.iter_mut() {
        let hit = compiled.iter().any(|(_, pat)| pat.matches(name));
        match mask.mode {
            FreezeMode::FreezeMatching if hit => p.frozen = true,
            FreezeMode::UnfreezeMatching if hit => p.frozen = false,
            FreezeMode::FreezeAllExceptMatching => p.frozen = !hit,
            _ => {}
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Midtrain,
    Sft,
    Rlvr,
    Router,
}

impl StageKind {
    pub const ALL: [StageKind; 4] = [
        StageKind::Midtrain,
        StageKind::Sft,
        StageKind::Rlvr,
        StageKind::Router,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::Midtrain => "midtrain",
            StageKind::Sft => "sft",
            StageKind::Rlvr => "rlvr",
            StageKind::Router => "router",
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "midtrain" => Ok(StageKind::Midtrain),
            "sft" => Ok(StageKind::Sft),
            "rlvr" => Ok(StageKind::Rlvr),
            "router" => Ok(StageKind::Router),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

/// The freeze schedule of each training stage; a pure function of its inputs.
///
/// * midtrain: only domain-expert FFNs train.
/// * sft: domain FFNs plus token/position embeddings and the LM head.
/// * rlvr: everything except the anchor FFN and the router.
/// * router: router weights only.
pub fn stage_mask(stage: StageKind, config: &MoeModelConfig) -> Result<FreezeMask> {
    if stage == StageKind::Router {
        if !config.has_router() {
            return Err(Error::Config("router stage needs an MoE model".into()));
        }
        return Ok(FreezeMask::only_trainable([names::ROUTER_GLOB]));
    }
    let anchor = config.anchor_index.ok_or_else(|| {
        Error::Config(format!("stage {stage} needs a model with an anchor slot"))
    })?;
    let domain_slots: Vec<String> = (0..config.n_experts)
        .filter(|&e| e != anchor)
        .map(names::expert_glob)
        .collect();
    if domain_slots.is_empty() {
        return Err(Error::Config("no domain expert slot".into()));
    }
    let mut trainable = domain_slots;
    match stage {
        StageKind::Midtrain => {}
        StageKind::Sft => {
            trainable.push("embed.*".into());
            trainable.push(names::LM_HEAD.into());
        }
        StageKind::Rlvr => {
            trainable.push("embed.*".into());
            trainable.push(names::LM_HEAD.into());
            trainable.push(names::FINAL_NORM.into());
            trainable.push("layer.*.attn.*".into());
            trainable.push("layer.*.ffn.norm".into());
        }
        StageKind::Router => unreachable!(),
    }
    Ok(FreezeMask::only_trainable(trainable))
}

/// Names of trainable parameters after applying `mask` to a fresh copy of `store`.
pub fn trainable_set(store: &ParamStore, mask: &FreezeMask) -> Result<Vec<String>> {
    let mut s = store.clone();
    apply_freeze(&mut s, mask)?;
    Ok(s.trainable_names())
}

pub fn is_shared(name: &str) -> bool {
    ParamKind::of(name).is_shared()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_for(config: &MoeModelConfig) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, shape) in config.param_shapes() {
            s.insert(n, Tensor::zeros(&shape));
        }
        s
    }

    fn two_expert() -> MoeModelConfig {
        MoeModelConfig::dense(2, 8, 2, 16, 12, 6).with_experts(2)
    }

    #[test]
    fn midtrain_leaves_only_domain_ffn_trainable() {
        let c = two_expert();
        let s = store_for(&c);
        let t = trainable_set(&s, &stage_mask(StageKind::Midtrain, &c).unwrap()).unwrap();
        assert_eq!(t.len(), 2 * c.n_layers);
        assert!(t.iter().all(|n| n.contains(".expert.1.")));
        assert!(!t.iter().any(|n| n.starts_with("embed")));
    }

    #[test]
    fn sft_adds_embeddings_and_head() {
        let c = two_expert();
        let s = store_for(&c);
        let t = trainable_set(&s, &stage_mask(StageKind::Sft, &c).unwrap()).unwrap();
        assert!(t.contains(&"embed.tok".to_string()));
        assert!(t.contains(&"lm_head".to_string()));
        assert!(!t.iter().any(|n| n.contains(".attn.")));
    }

    #[test]
    fn rlvr_trains_all_shared_but_not_anchor_or_router() {
        let c = two_expert();
        let s = store_for(&c);
        let t = trainable_set(&s, &stage_mask(StageKind::Rlvr, &c).unwrap()).unwrap();
        for (n, _) in c.param_shapes() {
            let kind = ParamKind::of(&n);
            if kind.is_shared() {
                assert!(t.contains(&n), "{n} should train in rlvr");
            }
        }
        assert!(!t.iter().any(|n| n.contains(".expert.0.") || n.ends_with("router")));
    }

    #[test]
    fn router_mask_is_router_only() {
        let c = MoeModelConfig::dense(3, 8, 2, 16, 12, 6).with_experts(5);
        let s = store_for(&c);
        let t = trainable_set(&s, &stage_mask(StageKind::Router, &c).unwrap()).unwrap();
        assert_eq!(t, vec!["layer.0.router", "layer.1.router", "layer.2.router"]);
    }

    #[test]
    fn anchor_frozen_in_every_stage() {
        let c = two_expert();
        let s = store_for(&c);
        for stage in StageKind::ALL {
            let t = trainable_set(&s, &stage_mask(stage, &c).unwrap()).unwrap();
            assert!(!t.iter().any(|n| n.contains(".expert.0.")), "{stage}");
        }
    }

    #[test]
    fn dense_model_has_no_stage_masks() {
        let c = MoeModelConfig::dense(1, 8, 2, 16, 12, 6);
        assert!(stage_mask(StageKind::Sft, &c).is_err());
        assert!(stage_mask(StageKind::Router, &c).is_err());
    }

    #[test]
    fn unmatched_pattern_is_a_config_error() {
        let mut s = store_for(&two_expert());
        let err = apply_freeze(&mut s, &FreezeMask::freeze(["layer.*.atn.wq"])).unwrap_err();
        assert!(matches!(err, Error::PatternUnmatched(_)));
    }

    #[test]
    fn freeze_then_unfreeze_restores_flags() {
        let mut s = store_for(&two_expert());
        let before = s.frozen_flags();
        apply_freeze(&mut s, &FreezeMask::freeze(["layer.*.attn.*"])).unwrap();
        assert_ne!(s.frozen_flags(), before);
        apply_freeze(&mut s, &FreezeMask::unfreeze(["layer.*.attn.*"])).unwrap();
        assert_eq!(s.frozen_flags(), before);
    }

    #[test]
    fn masks_are_idempotent_and_value_preserving() {
        let c = two_expert();
        let mut s = store_for(&c);
        s.get_mut("lm_head").unwrap().tensor.data_mut()[0] = 3.5;
        let values = s.hash_where(|_, _| true);
        for stage in StageKind::ALL {
            let m = stage_mask(stage, &c).unwrap();
            apply_freeze(&mut s, &m).unwrap();
            let once = s.frozen_flags();
            apply_freeze(&mut s, &m).unwrap();
            assert_eq!(once, s.frozen_flags());
            assert_eq!(values, s.hash_where(|_, _| true));
        }
    }

    #[test]
    fn stage_mask_is_pure() {
        let c = two_expert();
        assert_eq!(
            stage_mask(StageKind::Rlvr, &c).unwrap(),
            stage_mask(StageKind::Rlvr, &c).unwrap()
        );
        assert!("bogus".parse::<StageKind>().is_err());
    }
}
