//! Incremental decoding with the key/value cache gives the same logits as
//! re-running the whole sequence, and nucleus sampling trims the tail.
//!
//! cargo run --example cached_decoding

use zadapt::adapter::{AdapterState, InitMode};
use zadapt::generation::{generate, nucleus, tempered_probs, DecodeConfig};
use zadapt::model::{forward_logits, BaseWeights, ModelConfig, Session};
use zadapt::tensor::Tensor;
use zadapt::tokenizer;

fn main() -> zadapt::Result<()> {
    let cfg = ModelConfig::toy();
    let base = BaseWeights::<f32>::init(&cfg, 3)?;
    let mut adapter = AdapterState::init(&cfg, InitMode::ZeroInit, 3)?;
    adapter.gates = Tensor::full(adapter.gates.shape(), 0.5);

    let mut ids = tokenizer::encode("cache me");
    let mut session = Session::new(&cfg, &base, Some(&adapter), None)?;
    let mut logits = session.feed(&ids)?;
    for _ in 0..8 {
        let cached = logits.row(logits.rows() - 1).to_vec();
        let full = forward_logits(&cfg, &base, Some(&adapter), None, &ids)?;
        let gap = cached.iter().zip(full.row(full.rows() - 1)).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        let next = zadapt::generation::argmax(&cached);
        println!("len {:>2}  next {:?}  cached vs full {gap:.1e}", ids.len(), tokenizer::decode(&[next]));
        ids.push(next);
        logits = session.feed(&[next])?;
    }

    let probs = tempered_probs(full_last(&cfg, &base, &adapter, &ids)?.as_slice(), 1.0);
    let kept = nucleus(&probs, 0.75);
    println!("top_p 0.75 keeps {} of {} tokens", kept.len(), probs.len());

    let decode = DecodeConfig {
        seed: 7,
        ..DecodeConfig::default()
    };
    let out = generate(&cfg, &base, Some(&adapter), None, &tokenizer::encode("sample"), &decode)?;
    println!("sampled continuation: {:?}", tokenizer::decode(&out));
    Ok(())
}

fn full_last(cfg: &ModelConfig, base: &BaseWeights<f32>, adapter: &AdapterState<f32>, ids: &[usize]) -> zadapt::Result<Vec<f32>> {
    let l = forward_logits(cfg, base, Some(adapter), None, ids)?;
    Ok(l.row(l.rows() - 1).to_vec())
}
