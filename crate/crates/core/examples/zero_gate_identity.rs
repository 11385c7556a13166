//! A freshly attached adapter leaves the base untouched: its gates start at
//! exactly zero, so the learnable prompts contribute nothing until trained.
//!
//! cargo run --example zero_gate_identity

use zadapt::adapter::{AdapterState, InitMode};
use zadapt::model::{forward_logits, BaseWeights, ModelConfig};
use zadapt::tensor::Tensor;
use zadapt::tokenizer;

fn main() -> zadapt::Result<()> {
    let cfg = ModelConfig::toy();
    let base = BaseWeights::<f32>::init(&cfg, 0)?;
    let ids = tokenizer::encode("a prefix of tokens");

    let plain = forward_logits(&cfg, &base, None, None, &ids)?;
    let mut adapter = AdapterState::init(&cfg, InitMode::ZeroInit, 1)?;
    let fresh = forward_logits(&cfg, &base, Some(&adapter), None, &ids)?;
    println!("zero gates:     max |logit diff| = {:.3e}", plain.max_abs_diff(&fresh)?);

    adapter.gates = Tensor::full(adapter.gates.shape(), 0.1);
    let opened = forward_logits(&cfg, &base, Some(&adapter), None, &ids)?;
    println!("gates at 0.1:   max |logit diff| = {:.3e}", plain.max_abs_diff(&opened)?);

    // rand-init has no gates and shares one softmax over prompts and words
    let rand = AdapterState::init(&cfg, InitMode::RandInit, 1)?;
    let joint = forward_logits(&cfg, &base, Some(&rand), None, &ids)?;
    println!("rand-init:      max |logit diff| = {:.3e}", plain.max_abs_diff(&joint)?);
    Ok(())
}
