//! How many parameters an adapter trains for a few model geometries.
//!
//! cargo run --example parameter_budget

use zadapt::adapter::trainable_parameter_count;
use zadapt::model::ModelConfig;

fn main() {
    let geometries = [
        ("toy", ModelConfig::toy()),
        ("llama-7b, K=10, L=30", ModelConfig::llama_7b()),
        (
            "llama-7b, K=10, L=8",
            ModelConfig {
                adapted_layers: 8,
                ..ModelConfig::llama_7b()
            },
        ),
    ];
    println!("{:<22} {:>12} {:>14}", "geometry", "text", "with features");
    for (name, cfg) in &geometries {
        println!(
            "{name:<22} {:>12} {:>14}",
            trainable_parameter_count(cfg, false),
            trainable_parameter_count(cfg, true)
        );
    }
}
