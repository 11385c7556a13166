//! The run configuration document.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{TaskKind, ToyTask};
use crate::error::{Error, Result};
use crate::generation::DecodeConfig;
use crate::model::ModelConfig;
use crate::train::pretrain::PretrainConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSection {
    pub seed: u64,
    /// Adds the projection net that fuses features into the prompts.
    pub multimodal: bool,
}

/// Task fields left out fall back to the per-kind defaults of [`ToyTask::new`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_noise: Option<f64>,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            kind: TaskKind::Copy,
            seed: 0,
            samples: None,
            min_len: None,
            max_len: None,
            val_fraction: None,
            feature_noise: None,
        }
    }
}

impl TaskSection {
    pub fn toy_task(&self) -> ToyTask {
        let d = ToyTask::new(self.kind, self.seed);
        ToyTask {
            samples: self.samples.unwrap_or(d.samples),
            min_len: self.min_len.unwrap_or(d.min_len),
            max_len: self.max_len.unwrap_or(d.max_len),
            val_fraction: self.val_fraction.unwrap_or(d.val_fraction),
            feature_noise: self.feature_noise.unwrap_or(d.feature_noise),
            ..d
        }
    }
}

/// Everything a run depends on. Every section and field is optional in the
/// JSON text; `{}` is the toy default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub adapter: AdapterSection,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub task: TaskSection,
    pub pretrain: PretrainConfig,
}

impl RunConfig {
    /// Parses JSON; errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.train.model_config(&self.model)?;
        self.decode.validate()?;
        self.pretrain.validate()
    }

    /// Model config with the training run's layer override applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        self.train.model_config(&self.model)
    }

    /// Compact JSON with sorted keys and every default filled in.
    pub fn canonical_text(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&v).expect("value serializes")
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_text().as_bytes()).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_toy_default() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model, ModelConfig::toy());
        assert_eq!(c.task.toy_task(), ToyTask::new(TaskKind::Copy, 0));
    }

    #[test]
    fn digest_ignores_key_order_and_spelled_out_defaults() {
        let a = RunConfig::from_json(r#"{"train": {"seed": 3, "peak_lr": 0.005}, "task": {"kind": "reverse"}}"#).unwrap();
        let b = RunConfig::from_json(r#"{"task": {"kind": "reverse", "seed": 0}, "train": {"peak_lr": 0.005, "seed": 3}}"#).unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = RunConfig::from_json(r#"{"train": {"seed": 4, "peak_lr": 0.005}, "task": {"kind": "reverse"}}"#).unwrap();
        assert_ne!(a.digest(), c.digest());
        assert_eq!(RunConfig::from_json(&a.canonical_text()).unwrap(), a);
    }

    #[test]
    fn malformed_json_reports_position() {
        let err = RunConfig::from_json("{\n  \"train\": {\"seed\": }\n}").unwrap_err();
        assert!(matches!(err, Error::Json(_)));
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(matches!(RunConfig::from_json(r#"{"trian": {}}"#), Err(Error::Json(_))));
        assert!(matches!(
            RunConfig::from_json(r#"{"model": {"adapted_layers": 9}}"#),
            Err(Error::Config(_))
        ));
    }
}
