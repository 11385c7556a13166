//! The full loop: pre-train a small base on renamed skills, freeze it, then
//! teach an adapter to answer the `reverse` instruction.
//!
//! cargo run --release --example instruction_tuning [pretrained.zadp]
//!
//! Without an argument the base is pre-trained here with a short budget and
//! saved to `target/example-base.zadp` for the other examples to reuse.

use std::time::Instant;

use zadapt::adapter::{AdapterState, InitMode};
use zadapt::data::{make_dataset, TaskKind, ToyTask};
use zadapt::generation::{respond, DecodeConfig};
use zadapt::model::{BaseWeights, ModelConfig};
use zadapt::params::Parameters;
use zadapt::train::pretrain::{pretrained_base, PretrainConfig};
use zadapt::train::{evaluate, train, Checkpoint, TrainConfig};

fn load_or_pretrain(cfg: &ModelConfig) -> zadapt::Result<BaseWeights<f32>> {
    if let Some(p) = std::env::args().nth(1) {
        return Checkpoint::load(p)?.shared_base(cfg);
    }
    let p = PretrainConfig {
        steps: 1000,
        ..PretrainConfig::default()
    };
    let t = Instant::now();
    let (base, log) = pretrained_base(cfg, &p)?;
    println!("pre-trained {} steps in {:.0?}, last loss {:.3}", log.len(), t.elapsed(), log.train_losses().last().unwrap_or(&f64::NAN));
    let fresh = AdapterState::init(cfg, InitMode::ZeroInit, 0)?;
    Checkpoint::full(cfg, &base, &fresh, None).save("target/example-base.zadp")?;
    Ok(base)
}

fn main() -> zadapt::Result<()> {
    let cfg = ModelConfig::toy();
    let base = load_or_pretrain(&cfg)?;
    let frozen = base.param_digest();
    let greedy = DecodeConfig::greedy(8);

    // the base reverses under `flip` but does not know `reverse`
    for word in ["flip", "reverse"] {
        println!("base, {word:>7} hello -> {:?}", respond(&cfg, &base, None, None, word, Some("hello"), &greedy)?);
    }

    let data = make_dataset(&ToyTask::new(TaskKind::Reverse, 0))?;
    let tcfg = TrainConfig {
        epochs: 1000,
        warmup_epochs: 0,
        max_steps: Some(600),
        eval_every: 150,
        eval_samples: Some(32),
        ..TrainConfig::toy()
    };
    let t = Instant::now();
    let out = train(&cfg, &base, AdapterState::init(&cfg, InitMode::ZeroInit, 0)?, &data, &tcfg)?;
    println!("fine-tuned in {:.0?}", t.elapsed());
    for (step, loss, acc) in out.log.evals() {
        println!("  step {step:>3}: val loss {loss:.3}, exact match {acc:.3}");
    }
    let (loss, acc) = evaluate(&cfg, &base, &out.adapter, &data.val)?;
    println!("full val set: loss {loss:.3}, exact match {acc:.3}");
    println!("adapter, reverse hello -> {:?}", respond(&cfg, &base, Some(&out.adapter), None, "reverse", Some("hello"), &greedy)?);
    assert_eq!(base.param_digest(), frozen);
    Ok(())
}
