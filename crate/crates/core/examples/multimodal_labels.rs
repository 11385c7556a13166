//! Feature-conditioned answers: a projection net turns synthetic multi-scale
//! features into one row that is added to every prompt. The label is only
//! in the features, so an adapter without the projection stays at chance.
//!
//! cargo run --release --example multimodal_labels [pretrained.zadp]

use zadapt::adapter::{AdapterState, InitMode};
use zadapt::data::{make_dataset, TaskKind, ToyTask};
use zadapt::model::{BaseWeights, ModelConfig};
use zadapt::multimodal::{ProjectionNet, VisualFeatureSet};
use zadapt::train::{evaluate, train, Checkpoint, TrainConfig};

fn main() -> zadapt::Result<()> {
    let cfg = ModelConfig::toy();
    let base = match std::env::args().nth(1) {
        Some(p) => Checkpoint::load(p)?.shared_base(&cfg)?,
        None => BaseWeights::init(&cfg, 0)?,
    };
    let mut task = ToyTask::new(TaskKind::LabelFromFeature, 3);
    task.samples = 640;
    task.val_fraction = 0.2;
    let data = make_dataset(&task)?;
    let tcfg = TrainConfig {
        epochs: 1000,
        warmup_epochs: 0,
        max_steps: Some(300),
        ..TrainConfig::toy()
    };

    let plain = AdapterState::init(&cfg, InitMode::ZeroInit, 0)?;
    let with = plain.clone().with_projection(ProjectionNet::default_for(cfg.dim, 0));
    for (name, adapter) in [("without features", plain), ("with features", with)] {
        let out = train(&cfg, &base, adapter, &data, &tcfg)?;
        let (loss, acc) = evaluate(&cfg, &base, &out.adapter, &data.val)?;
        println!("{name:<17} val loss {loss:.3}, accuracy {acc:.3}");
    }

    // features travel as a small binary file; `zadapt generate --features` reads it
    let fs = VisualFeatureSet::synthetic(2, 42, &VisualFeatureSet::default_widths(cfg.dim), 0.5);
    fs.save("target/example-features.zaft")?;
    println!("wrote target/example-features.zaft ({} scales)", fs.scales());
    Ok(())
}
