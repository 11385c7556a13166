//! Greedy and nucleus decoding over the cached inference session.

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterState;
use crate::error::{Error, Result};
use crate::model::{BaseWeights, ModelConfig, Session};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};
use crate::tokenizer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMethod {
    Greedy,
    TopP,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub method: DecodeMethod,
    /// Zero decodes greedily.
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub stop_token: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            method: DecodeMethod::TopP,
            temperature: 0.1,
            top_p: 0.75,
            max_new_tokens: 16,
            stop_token: tokenizer::EOS,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            method: DecodeMethod::Greedy,
            max_new_tokens,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) {
            return Err(Error::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        Ok(())
    }
}

/// Highest logit, lowest id on ties.
pub fn argmax<T: Real>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

/// Softmax of `logits / temperature` in 64-bit.
pub fn tempered_probs<T: Real>(logits: &[T], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|x| x.f64() / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// The smallest highest-probability prefix whose mass reaches `top_p`,
/// renormalized, as `(id, prob)` in descending order (ties by lower id).
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for id in order {
        kept.push((id, probs[id]));
        mass += probs[id];
        if mass >= top_p {
            break;
        }
    }
    kept.iter_mut().for_each(|(_, p)| *p /= mass);
    kept
}

/// Draw one token from the tempered nucleus of `logits`.
pub fn top_p_sample<T: Real>(logits: &[T], cfg: &DecodeConfig, rng: &mut Rng) -> Result<usize> {
    cfg.validate()?;
    if logits.is_empty() || !logits.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("top_p_sample"));
    }
    if cfg.method == DecodeMethod::Greedy || cfg.temperature == 0.0 {
        return Ok(argmax(logits));
    }
    let support = nucleus(&tempered_probs(logits, cfg.temperature), cfg.top_p);
    let u = rng.uniform();
    let mut acc = 0.0;
    for &(id, p) in &support {
        acc += p;
        if u < acc {
            return Ok(id);
        }
    }
    Ok(support.last().map_or(0, |&(id, _)| id))
}

/// Autoregressive continuation of `prompt`, excluding the stop token.
///
/// Decoding also stops once prompt plus output fill the context window.
pub fn generate<T: Real>(
    cfg: &ModelConfig,
    base: &BaseWeights<T>,
    adapter: Option<&AdapterState<T>>,
    visual: Option<&Tensor<T>>,
    prompt: &[usize],
    decode: &DecodeConfig,
) -> Result<Vec<usize>> {
    decode.validate()?;
    if prompt.is_empty() || prompt.len() >= cfg.max_seq {
        return Err(Error::Capacity {
            needed: prompt.len().max(1),
            max: cfg.max_seq - 1,
        });
    }
    let mut out = Vec::new();
    if decode.max_new_tokens == 0 {
        return Ok(out);
    }
    let mut rng = Rng::new(decode.seed);
    let mut session = Session::new(cfg, base, adapter, visual)?;
    let mut logits = session.feed(prompt)?;
    loop {
        let last = logits.row(logits.rows() - 1);
        let next = top_p_sample(last, decode, &mut rng)?;
        if next == decode.stop_token {
            break;
        }
        out.push(next);
        if out.len() >= decode.max_new_tokens || prompt.len() + out.len() >= cfg.max_seq {
            break;
        }
        logits = session.feed(&[next])?;
    }
    Ok(out)
}

/// Greedy response text for an instruction.
pub fn respond<T: Real>(
    cfg: &ModelConfig,
    base: &BaseWeights<T>,
    adapter: Option<&AdapterState<T>>,
    visual: Option<&Tensor<T>>,
    instruction: &str,
    input: Option<&str>,
    decode: &DecodeConfig,
) -> Result<String> {
    let (prompt, _) = tokenizer::format_instruction(instruction, input, None);
    let ids = generate(cfg, base, adapter, visual, &prompt, decode)?;
    Ok(tokenizer::decode(&ids))
}
