//! Full-parameter training of the base on templated toy tasks, so the frozen
//! model carries skills that an adapter can steer.
//!
//! Each skill is taught under its own instruction word (`echo` for copying,
//! say), distinct from the word the fine-tuning data uses. A fresh adapter
//! therefore starts from a model that can do the work but does not yet answer
//! the fine-tuning instruction.

use serde::{Deserialize, Serialize};

use crate::data::{make_dataset, Sample, TaskKind, ToyTask};
use crate::error::{Error, Result};
use crate::model::{BaseWeights, ModelConfig};
use crate::rng::Rng;

use super::metrics::MetricsLog;
use super::trainer::{pretrain, TrainConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Skill {
    pub kind: TaskKind,
    pub instruction: String,
}

impl Skill {
    pub fn new(kind: TaskKind, instruction: &str) -> Self {
        Self {
            kind,
            instruction: instruction.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// 0 leaves the base at its random initialization.
    pub steps: usize,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub samples_per_skill: usize,
    /// Seeds the data order; the base's initialization has its own seed.
    pub seed: u64,
    pub base_seed: u64,
    pub skills: Vec<Skill>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            peak_lr: 3e-3,
            batch_size: 16,
            samples_per_skill: 3000,
            seed: 0,
            base_seed: 0,
            skills: vec![
                Skill::new(TaskKind::Copy, "echo"),
                Skill::new(TaskKind::Reverse, "flip"),
                Skill::new(TaskKind::Modadd, "sum"),
            ],
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps > 0 && (self.skills.is_empty() || self.samples_per_skill == 0) {
            return Err(Error::Config("pre-training needs at least one skill and sample".into()));
        }
        for s in &self.skills {
            if s.kind == TaskKind::LabelFromFeature {
                return Err(Error::Config("label_from_feature needs features and cannot be pre-trained".into()));
            }
            if !crate::tokenizer::is_representable(&s.instruction) {
                return Err(Error::Config(format!("instruction `{}` is not representable", s.instruction)));
            }
        }
        Ok(())
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.steps.max(1),
            warmup_epochs: 0,
            batch_size: self.batch_size,
            peak_lr: self.peak_lr,
            weight_decay: 0.0,
            seed: self.seed,
            max_steps: Some(self.steps),
            ..TrainConfig::toy()
        }
    }
}

/// The shuffled pre-training samples. Skill `i` draws from seed `seed + 100 + i`,
/// away from the small seeds fine-tuning tasks default to. Skills with fewer
/// distinct payloads than `samples_per_skill` repeat them all.
pub fn pretrain_corpus(p: &PretrainConfig) -> Result<Vec<Sample>> {
    p.validate()?;
    let mut corpus = Vec::new();
    for (i, skill) in p.skills.iter().enumerate() {
        let mut task = ToyTask::new(skill.kind, p.seed + 100 + i as u64);
        task.samples = task.payload_space().map_or(p.samples_per_skill, |n| n.min(p.samples_per_skill as u128) as usize);
        task.val_fraction = 0.0;
        let drawn = make_dataset(&task)?.train;
        corpus.extend(drawn.iter().cycle().take(p.samples_per_skill).map(|s| Sample {
            instruction: skill.instruction.clone(),
            ..s.clone()
        }));
    }
    Rng::new(p.seed).split(0x9E7A).shuffle(&mut corpus);
    Ok(corpus)
}

/// Base weights seeded by `p.base_seed`, then pre-trained per `p`.
pub fn pretrained_base(cfg: &ModelConfig, p: &PretrainConfig) -> Result<(BaseWeights<f32>, MetricsLog)> {
    let base = BaseWeights::<f32>::init(cfg, p.base_seed)?;
    if p.steps == 0 {
        return Ok((base, MetricsLog::new()));
    }
    let corpus: Vec<(Vec<usize>, usize)> = pretrain_corpus(p)?.iter().map(Sample::tokens).collect();
    pretrain(cfg, base, &corpus, &p.train_config())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_renames_instructions() {
        let p = PretrainConfig {
            samples_per_skill: 20,
            ..PretrainConfig::default()
        };
        let c = pretrain_corpus(&p).unwrap();
        assert_eq!(c.len(), 60);
        for s in &c {
            assert!(["echo", "flip", "sum"].contains(&s.instruction.as_str()));
        }
        assert_eq!(c, pretrain_corpus(&p).unwrap());
        let p = PretrainConfig {
            samples_per_skill: 250,
            skills: vec![Skill::new(TaskKind::Modadd, "sum")],
            ..PretrainConfig::default()
        };
        let c = pretrain_corpus(&p).unwrap();
        assert_eq!(c.len(), 250);
        let distinct: std::collections::HashSet<_> = c.iter().map(Sample::payload_key).collect();
        assert_eq!(distinct.len(), 100);
    }

    #[test]
    fn zero_steps_is_plain_init() {
        let cfg = ModelConfig::toy();
        let p = PretrainConfig {
            steps: 0,
            base_seed: 3,
            ..PretrainConfig::default()
        };
        let (b, log) = pretrained_base(&cfg, &p).unwrap();
        assert_eq!(b, BaseWeights::init(&cfg, 3).unwrap());
        assert!(log.is_empty());
    }

    #[test]
    fn rejects_featured_skill() {
        let p = PretrainConfig {
            skills: vec![Skill::new(TaskKind::LabelFromFeature, "x")],
            ..PretrainConfig::default()
        };
        assert!(matches!(p.validate(), Err(Error::Config(_))));
    }
}
