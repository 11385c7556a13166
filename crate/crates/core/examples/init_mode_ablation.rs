//! Zero-init gated attention against randomly initialized prompts that share
//! one softmax with the words, on the copy task. Writes per-seed loss curves
//! and a summary under `target/ablation-init/`.
//!
//! cargo run --release --example init_mode_ablation [pretrained.zadp]

use zadapt::adapter::{AdapterState, InitMode};
use zadapt::model::{BaseWeights, ModelConfig};
use zadapt::train::ablation::{run_ablation, AblationConfig, AblationSpec};
use zadapt::train::pretrain::{pretrained_base, PretrainConfig};
use zadapt::train::Checkpoint;

fn base(cfg: &ModelConfig) -> zadapt::Result<BaseWeights<f32>> {
    match std::env::args().nth(1) {
        Some(p) => Checkpoint::load(p)?.shared_base(cfg),
        None => {
            let p = PretrainConfig {
                steps: 1000,
                ..PretrainConfig::default()
            };
            let (b, _) = pretrained_base(cfg, &p)?;
            Checkpoint::full(cfg, &b, &AdapterState::init(cfg, InitMode::ZeroInit, 0)?, None).save("target/example-base.zadp")?;
            Ok(b)
        }
    }
}

fn main() -> zadapt::Result<()> {
    let cfg = ModelConfig::toy();
    let base = base(&cfg)?;
    let mut acfg = AblationConfig::new(AblationSpec::InitModeCompare);
    acfg.seeds = 2;
    acfg.train.max_steps = Some(150);
    let report = run_ablation(&cfg, &base, &acfg)?;
    report.write("target/ablation-init")?;
    for row in report.summary() {
        println!("{}", row.join(","));
    }
    Ok(())
}
