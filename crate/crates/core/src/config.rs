use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture shared by the dense model (`n_experts == 1`, no router) and
/// its MoE variants.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub anchor_index: Option<usize>,
}

impl MoeModelConfig {
    pub fn dense(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            d_ff,
            vocab_size,
            max_seq_len,
            n_experts: 1,
            top_k: 1,
            anchor_index: None,
        }
    }

    pub fn is_dense(&self) -> bool {
        self.n_experts == 1
    }

    pub fn has_router(&self) -> bool {
        self.n_experts > 1
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Same architecture with `n_experts` FFN slots, every slot active and
    /// slot 0 as anchor.
    pub fn with_experts(&self, n_experts: usize) -> Self {
        Self {
            n_experts,
            top_k: n_experts,
            anchor_index: if n_experts > 1 { Some(0) } else { None },
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("n_experts", self.n_experts),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::Config(format!(
                "top_k {} outside [1, {}]",
                self.top_k, self.n_experts
            )));
        }
        if let Some(a) = self.anchor_index {
            if a >= self.n_experts {
                return Err(Error::Config(format!(
                    "anchor_index {a} >= n_experts {}",
                    self.n_experts
                )));
            }
        }
        Ok(())
    }

    /// Every parameter name this architecture owns, with its shape.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = vec![
            (names::TOK_EMBED.to_string(), vec![self.vocab_size, d]),
            (names::POS_EMBED.to_string(), vec![self.max_seq_len, d]),
            (names::FINAL_NORM.to_string(), vec![d]),
            (names::LM_HEAD.to_string(), vec![d, self.vocab_size]),
        ];
        for l in 0..self.n_layers {
            out.push((names::attn_norm(l), vec![d]));
            for p in names::ATTN_PROJ {
                out.push((names::attn(l, p), vec![d, d]));
            }
            out.push((names::ffn_norm(l), vec![d]));
            for e in 0..self.n_experts {
                out.push((names::ffn_in(l, e), vec![d, self.d_ff]));
                out.push((names::ffn_out(l, e), vec![self.d_ff, d]));
            }
            if self.has_router() {
                out.push((names::router(l), vec![d, self.n_experts]));
            }
        }
        out.sort();
        out
    }
}

/// Parameter-id conventions.
pub mod names {
    pub const TOK_EMBED: &str = "embed.tok";
    pub const POS_EMBED: &str = "embed.pos";
    pub const FINAL_NORM: &str = "final.norm";
    pub const LM_HEAD: &str = "lm_head";
    pub const ATTN_PROJ: [&str; 4] = ["wq", "wk", "wv", "wo"];

    pub fn attn_norm(layer: usize) -> String {
        format!("layer.{layer}.attn.norm")
    }

    pub fn attn(layer: usize, proj: &str) -> String {
        format!("layer.{layer}.attn.{proj}")
    }

    pub fn ffn_norm(layer: usize) -> String {
        format!("layer.{layer}.ffn.norm")
    }

    pub fn ffn_in(layer: usize, expert: usize) -> String {
        format!("layer.{layer}.expert.{expert}.ffn.w_in")
    }

    pub fn ffn_out(layer: usize, expert: usize) -> String {
        format!("layer.{layer}.expert.{expert}.ffn.w_out")
    }

    pub fn router(layer: usize) -> String {
        format!("layer.{layer}.router")
    }

    /// Glob matching every FFN tensor of one expert slot.
    pub fn expert_glob(expert: usize) -> String {
        format!("layer.*.expert.{expert}.ffn.*")
    }

    pub const ROUTER_GLOB: &str = "layer.*.router";
}

/// What role a parameter plays in the architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    LmHead,
    Attention,
    Norm,
    ExpertFfn(usize),
    Router,
}

impl ParamKind {
    pub fn of(name: &str) -> ParamKind {
        if name.starts_with("embed.") {
            return ParamKind::Embedding;
        }
        if name == names::LM_HEAD {
            return ParamKind::LmHead;
        }
        if name.ends_with(".norm") {
            return ParamKind::Norm;
        }
        if name.ends_with(".router") {
            return ParamKind::Router;
        }
        if let Some(rest) = name.split(".expert.").nth(1) {
            let slot = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(0);
            return ParamKind::ExpertFfn(slot);
        }
        ParamKind::Attention
    }

    /// Shared layers: embeddings, LM head, attention and every norm.
    pub fn is_shared(self) -> bool {
        matches!(
            self,
            ParamKind::Embedding | ParamKind::LmHead | ParamKind::Attention | ParamKind::Norm
        )
    }

    /// Matrices receive decoupled weight decay; norms and embeddings never do.
    pub fn decays(self) -> bool {
        matches!(
            self,
            ParamKind::LmHead | ParamKind::Attention | ParamKind::ExpertFfn(_) | ParamKind::Router
        )
    }
}
