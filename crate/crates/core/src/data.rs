//! Procedural instruction-following datasets.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tokenizer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    /// Digit-wise sum of two equal-length digit strings, each digit mod 10.
    Modadd,
    /// The response names the class of an accompanying feature set.
    LabelFromFeature,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Modadd => "modadd",
            TaskKind::LabelFromFeature => "label_from_feature",
        }
    }

    pub fn instruction(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Modadd => "add",
            TaskKind::LabelFromFeature => "name the class",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "modadd" => Ok(TaskKind::Modadd),
            "label_from_feature" => Ok(TaskKind::LabelFromFeature),
            other => Err(Error::Usage(format!("unknown task kind `{other}`"))),
        }
    }
}

/// Number of classes in the feature-labelled task.
pub const FEATURE_CLASSES: usize = 4;

/// Class names used as responses of the feature-labelled task.
pub const CLASS_NAMES: [&str; FEATURE_CLASSES] = ["a", "b", "c", "d"];

/// Feature noise scale; the classes are then separable almost surely.
pub const DEFAULT_FEATURE_NOISE: f64 = 0.5;

fn default_feature_noise() -> f64 {
    DEFAULT_FEATURE_NOISE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTask {
    pub kind: TaskKind,
    /// Train plus validation samples.
    pub samples: usize,
    /// Inclusive payload length range (digits per operand for `modadd`).
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    pub val_fraction: f64,
    /// Standard deviation of the noise around each class prototype.
    #[serde(default = "default_feature_noise")]
    pub feature_noise: f64,
}

impl ToyTask {
    pub fn new(kind: TaskKind, seed: u64) -> Self {
        let (min_len, max_len) = match kind {
            TaskKind::Copy | TaskKind::Reverse => (3, 5),
            TaskKind::Modadd => (1, 1),
            TaskKind::LabelFromFeature => (0, 0),
        };
        // single-digit sums have only 100 payloads
        let (samples, val_fraction) = match kind {
            TaskKind::Modadd => (100, 0.2),
            _ => (576, 1.0 / 9.0),
        };
        Self {
            kind,
            samples,
            min_len,
            max_len,
            seed,
            val_fraction,
            feature_noise: DEFAULT_FEATURE_NOISE,
        }
    }

    /// Number of distinct payloads, if finite.
    pub fn payload_space(&self) -> Option<u128> {
        let per_len = |base: u128| -> u128 { (self.min_len..=self.max_len).map(|l| base.saturating_pow(l as u32)).fold(0, u128::saturating_add) };
        match self.kind {
            TaskKind::Copy | TaskKind::Reverse => Some(per_len(26)),
            TaskKind::Modadd => Some(per_len(100)),
            TaskKind::LabelFromFeature => None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.min_len > self.max_len || !(0.0..1.0).contains(&self.val_fraction) || !(self.feature_noise >= 0.0) {
            return Err(Error::Config(format!(
                "bad task: lengths {}..={}, val_fraction {}",
                self.min_len, self.max_len, self.val_fraction
            )));
        }
        if self.kind != TaskKind::LabelFromFeature && self.min_len == 0 {
            return Err(Error::Config("payload length must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    pub response: String,
    /// Class of the accompanying features.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    /// Seed of the accompanying synthetic features.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_noise: Option<f64>,
}

impl Sample {
    /// Token ids with the stop token appended and the response start index.
    pub fn tokens(&self) -> (Vec<usize>, usize) {
        let (mut ids, start) =
            tokenizer::format_instruction(&self.instruction, self.input.as_deref(), Some(&self.response));
        ids.push(tokenizer::EOS);
        (ids, start)
    }

    /// Prompt ids ending right before the response.
    pub fn prompt_tokens(&self) -> Vec<usize> {
        tokenizer::format_instruction(&self.instruction, self.input.as_deref(), None).0
    }

    /// What makes this sample distinct from others of the same task.
    pub(crate) fn payload_key(&self) -> String {
        match (self.feature_seed, &self.input) {
            (Some(seed), _) => seed.to_string(),
            (None, Some(input)) => input.clone(),
            (None, None) => self.response.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

fn letters(rng: &mut Rng, n: usize) -> String {
    (0..n).map(|_| (b'a' + rng.below(26) as u8) as char).collect()
}

fn digits(rng: &mut Rng, n: usize) -> String {
    (0..n).map(|_| (b'0' + rng.below(10) as u8) as char).collect()
}

/// Digit-wise `(a_i + b_i) mod 10`.
pub fn digitwise_sum(a: &str, b: &str) -> String {
    a.bytes()
        .zip(b.bytes())
        .map(|(x, y)| (b'0' + ((x - b'0') + (y - b'0')) % 10) as char)
        .collect()
}

fn draw(task: &ToyTask, rng: &mut Rng) -> Sample {
    let len = task.min_len + rng.below(task.max_len - task.min_len + 1);
    let instruction = task.kind.instruction().to_string();
    match task.kind {
        TaskKind::Copy | TaskKind::Reverse => {
            let payload = letters(rng, len);
            let response = match task.kind {
                TaskKind::Copy => payload.clone(),
                _ => payload.chars().rev().collect(),
            };
            Sample {
                instruction,
                input: Some(payload),
                response,
                label: None,
                feature_seed: None,
                feature_noise: None,
            }
        }
        TaskKind::Modadd => {
            let (a, b) = (digits(rng, len), digits(rng, len));
            Sample {
                instruction,
                response: digitwise_sum(&a, &b),
                input: Some(format!("{a}+{b}")),
                label: None,
                feature_seed: None,
                feature_noise: None,
            }
        }
        TaskKind::LabelFromFeature => {
            let label = rng.below(FEATURE_CLASSES);
            Sample {
                instruction,
                input: None,
                response: CLASS_NAMES[label].to_string(),
                label: Some(label),
                feature_seed: Some(rng.next_u64()),
                feature_noise: Some(task.feature_noise),
            }
        }
    }
}

/// Deterministic samples with distinct payloads, split into train and val.
///
/// Gives up with a config error when the payload space is too small to
/// supply `task.samples` distinct payloads.
pub fn make_dataset(task: &ToyTask) -> Result<Dataset> {
    task.validate()?;
    if task.payload_space().is_some_and(|n| n < task.samples as u128) {
        return Err(Error::Config(format!(
            "{} samples requested but only {} distinct {} payloads exist",
            task.samples,
            task.payload_space().unwrap_or_default(),
            task.kind.as_str()
        )));
    }
    let mut rng = Rng::new(task.seed).split(0xDA7A);
    let mut seen = HashSet::new();
    let mut all = Vec::with_capacity(task.samples);
    let mut attempts = 0usize;
    while all.len() < task.samples {
        attempts += 1;
        if attempts > 1000 * task.samples.max(1) {
            return Err(Error::Config(format!(
                "cannot draw {} distinct {} payloads",
                task.samples,
                task.kind.as_str()
            )));
        }
        let s = draw(task, &mut rng);
        if seen.insert(s.payload_key()) {
            all.push(s);
        }
    }
    let n_val = ((task.samples as f64) * task.val_fraction).round() as usize;
    let train = all.split_off(n_val);
    Ok(Dataset { train, val: all })
}

/// Fraction of exactly equal pairs.
pub fn exact_match_accuracy<S: AsRef<str>, R: AsRef<str>>(outputs: &[S], references: &[R]) -> Result<f64> {
    if outputs.len() != references.len() {
        return Err(Error::Usage(format!(
            "{} outputs vs {} references",
            outputs.len(),
            references.len()
        )));
    }
    if outputs.is_empty() {
        return Ok(0.0);
    }
    let hits = outputs
        .iter()
        .zip(references)
        .filter(|(o, r)| o.as_ref() == r.as_ref())
        .count();
    Ok(hits as f64 / outputs.len() as f64)
}

/// One JSON object per line.
pub fn write_jsonl<W: Write>(mut w: W, samples: &[Sample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Classes of the encoder task, keyed by the marker letter.
pub const MARKERS: [char; 3] = ['x', 'y', 'z'];

/// Token sequences of random filler letters with one marker letter; the
/// class is the marker's index in [`MARKERS`].
pub fn marker_classification(n: usize, len: usize, seed: u64) -> Vec<(Vec<usize>, usize)> {
    let mut rng = Rng::new(seed).split(0x3A7C);
    (0..n)
        .map(|_| {
            let class = rng.below(MARKERS.len());
            let mut text: Vec<char> = (0..len).map(|_| (b'a' + rng.below(23) as u8) as char).collect();
            let at = rng.below(len);
            text[at] = MARKERS[class];
            (tokenizer::encode(&text.into_iter().collect::<String>()), class)
        })
        .collect()
}
