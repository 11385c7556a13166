//! The frozen toy transformer.

pub mod config;
pub mod forward;
pub mod infer;
pub mod weights;

pub use config::{AttentionMode, ModelConfig};
pub use infer::{encoder_classify, forward_logits, KVCache, Session};
pub use weights::{BaseVars, BaseWeights, ClassHead, ClassHeadVars, LayerVars, LayerWeights};
