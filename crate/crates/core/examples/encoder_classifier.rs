//! The same gated prefix attention on a bidirectional encoder: a frozen
//! random encoder learns to name which marker letter a sequence contains,
//! training only prompts, gates and a class head.
//!
//! cargo run --release --example encoder_classifier

use zadapt::adapter::{AdapterState, InitMode};
use zadapt::data::{marker_classification, MARKERS};
use zadapt::model::{encoder_classify, AttentionMode, BaseWeights, ClassHead, ModelConfig};
use zadapt::train::{classification_accuracy, train_classifier, EncoderAdapter, TrainConfig};
use zadapt::tokenizer;

fn main() -> zadapt::Result<()> {
    let cfg = ModelConfig {
        mode: AttentionMode::BidirectionalEncoder,
        ..ModelConfig::toy()
    };
    let base = BaseWeights::<f32>::init(&cfg, 0)?;
    let model = EncoderAdapter {
        adapter: AdapterState::init(&cfg, InitMode::ZeroInit, 0)?,
        head: ClassHead::init(cfg.dim, MARKERS.len(), 0),
    };
    let train_set = marker_classification(512, 12, 1);
    let val_set = marker_classification(200, 12, 2);
    println!("before: val acc {:.3}", classification_accuracy(&cfg, &base, &model, &val_set)?);

    let tcfg = TrainConfig {
        epochs: 1000,
        warmup_epochs: 0,
        max_steps: Some(200),
        eval_every: 50,
        ..TrainConfig::toy()
    };
    let (model, log) = train_classifier(&cfg, &base, model, &train_set, &val_set, &tcfg)?;
    for (step, _, acc) in log.evals() {
        println!("step {step:>3}: val acc {acc:.3}");
    }

    let ids = tokenizer::encode("abcdefyghijk");
    let logits = encoder_classify(&cfg, &base, Some(&model.adapter), &model.head, &ids)?;
    let class = zadapt::generation::argmax(logits.data());
    println!("\"abcdefyghijk\" -> marker {:?}", MARKERS[class]);
    Ok(())
}
