//! Saving and loading: a full checkpoint carries the base, adapter and
//! optimizer moments; an adapter-only file is a few kilobytes and loads on
//! top of any base with the same geometry.
//!
//! cargo run --release --example checkpoints

use zadapt::adapter::{AdapterState, InitMode};
use zadapt::cli::gate_statistics;
use zadapt::data::{make_dataset, TaskKind, ToyTask};
use zadapt::generation::{respond, DecodeConfig};
use zadapt::model::{BaseWeights, ModelConfig};
use zadapt::train::{train, Checkpoint, TrainConfig};

fn main() -> zadapt::Result<()> {
    let cfg = ModelConfig::toy();
    let base = BaseWeights::<f32>::init(&cfg, 0)?;
    let mut task = ToyTask::new(TaskKind::Reverse, 0);
    task.samples = 64;
    let data = make_dataset(&task)?;
    let tcfg = TrainConfig {
        max_steps: Some(20),
        ..TrainConfig::toy()
    };
    let out = train(&cfg, &base, AdapterState::init(&cfg, InitMode::ZeroInit, 0)?, &data, &tcfg)?;

    let dir = std::env::temp_dir().join("zadapt-checkpoints");
    std::fs::create_dir_all(&dir)?;
    let full = dir.join("full.zadp");
    let small = dir.join("adapter.zadp");
    Checkpoint::full(&cfg, &base, &out.adapter, Some(&out.optimizer)).save(&full)?;
    Checkpoint::adapter(&cfg, &out.adapter).save(&small)?;
    for p in [&full, &small] {
        println!("{:<40} {:>9} bytes", p.display(), std::fs::metadata(p)?.len());
    }

    let ck = Checkpoint::load(&small)?;
    println!("digest {}", hex::encode(ck.digest));
    let adapter = ck.adapter_state(&cfg)?;
    let base_again = Checkpoint::load(&full)?.shared_base(&cfg)?;
    let greedy = DecodeConfig::greedy(6);
    let a = respond(&cfg, &base, Some(&out.adapter), None, "reverse", Some("abc"), &greedy)?;
    let b = respond(&cfg, &base_again, Some(&adapter), None, "reverse", Some("abc"), &greedy)?;
    println!("in memory {a:?}, reloaded {b:?}");

    println!("layer,head,gate,prompt_norm");
    for (layer, head, gate, norm) in gate_statistics(cfg.n_heads, &adapter) {
        println!("{layer},{head},{gate:.4},{norm:.3}");
    }
    Ok(())
}
