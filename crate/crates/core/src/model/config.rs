use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Attention layout of the base transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Causal mask, rotary positions.
    CausalDecoder,
    /// No mask, learned absolute positions.
    BidirectionalEncoder,
}

/// Frozen base hyperparameters plus the adapter geometry (`K`, `L`).
///
/// Attention scores are scaled by `1/sqrt(head_dim)` per head; the
/// single-head formula's `1/sqrt(C)` is read with `C` as the per-head width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Number of topmost layers carrying adaption prompts.
    pub adapted_layers: usize,
    /// Prompt rows per adapted layer.
    pub prompt_len: usize,
    pub max_seq: usize,
    pub ffn_hidden: usize,
    pub mode: AttentionMode,
    pub rmsnorm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale default: V=64, C=64, H=4, N=6, L=4, K=5, M_max=64.
    pub fn toy() -> Self {
        Self {
            vocab_size: 64,
            dim: 64,
            n_heads: 4,
            n_layers: 6,
            adapted_layers: 4,
            prompt_len: 5,
            max_seq: 64,
            ffn_hidden: 128,
            mode: AttentionMode::CausalDecoder,
            rmsnorm_eps: 1e-5,
        }
    }

    /// LLaMA-7B geometry with prompts of length 10 in the last 30 of 32 layers.
    pub fn llama_7b() -> Self {
        Self {
            vocab_size: 32000,
            dim: 4096,
            n_heads: 32,
            n_layers: 32,
            adapted_layers: 30,
            prompt_len: 10,
            max_seq: 2048,
            ffn_hidden: 11008,
            mode: AttentionMode::CausalDecoder,
            rmsnorm_eps: 1e-6,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads.max(1)
    }

    /// Index of the lowest adapted layer, `N − L`.
    pub fn first_adapted_layer(&self) -> usize {
        self.n_layers - self.adapted_layers
    }

    pub fn is_causal(&self) -> bool {
        self.mode == AttentionMode::CausalDecoder
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.dim % self.n_heads != 0 {
            return fail(format!("dim {} not divisible by n_heads {}", self.dim, self.n_heads));
        }
        if self.is_causal() && self.head_dim() % 2 != 0 {
            return fail(format!("rotary positions need an even head_dim, got {}", self.head_dim()));
        }
        if self.adapted_layers == 0 || self.adapted_layers > self.n_layers {
            return fail(format!(
                "adapted_layers must satisfy 1 <= L <= N, got L={} N={}",
                self.adapted_layers, self.n_layers
            ));
        }
        if self.vocab_size == 0 || self.max_seq == 0 || self.ffn_hidden == 0 {
            return fail("vocab_size, max_seq and ffn_hidden must be positive".into());
        }
        if !(self.rmsnorm_eps > 0.0) {
            return fail(format!("rmsnorm_eps must be > 0, got {}", self.rmsnorm_eps));
        }
        Ok(())
    }

    /// Compact JSON with sorted keys.
    pub fn canonical_text(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&v).expect("value serializes")
    }

    /// SHA-256 of [`canonical_text`](Self::canonical_text).
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_text().as_bytes()).into()
    }
}
