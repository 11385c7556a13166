//! Properties that hold for arbitrary inputs.

use proptest::prelude::*;

use zadapt::adapter::{AdapterState, InitMode};
use zadapt::data::{make_dataset, TaskKind, ToyTask};
use zadapt::generation::nucleus;
use zadapt::model::{forward_logits, AttentionMode, BaseWeights, ModelConfig, Session};
use zadapt::multimodal::{aggregate_features, ProjectionNet, VisualFeatureSet};
use zadapt::params::Parameters;
use zadapt::rng::Rng;
use zadapt::tensor::Tensor;
use zadapt::tokenizer;
use zadapt::train::{train, Checkpoint, TrainConfig};

fn tiny(mode: AttentionMode) -> ModelConfig {
    ModelConfig {
        vocab_size: 64,
        dim: 16,
        n_heads: 2,
        n_layers: 3,
        adapted_layers: 2,
        prompt_len: 3,
        max_seq: 24,
        ffn_hidden: 32,
        mode,
        rmsnorm_eps: 1e-5,
    }
}

fn mode_strategy() -> impl Strategy<Value = AttentionMode> {
    prop_oneof![Just(AttentionMode::CausalDecoder), Just(AttentionMode::BidirectionalEncoder)]
}

fn ids_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..64, 1..24)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zero_gates_leave_the_base_untouched(mode in mode_strategy(), ids in ids_strategy(), seed in 0u64..1000) {
        let cfg = tiny(mode);
        let base = BaseWeights::<f32>::init(&cfg, seed).unwrap();
        let mut rng = Rng::new(seed);
        let mut adapter = AdapterState::<f32>::init(&cfg, InitMode::ZeroInit, seed).unwrap();
        // large prompts and features: only the zero gates hold them back
        for p in &mut adapter.prompts {
            *p = Tensor::randn(p.shape(), 3.0, &mut rng);
        }
        let proj = ProjectionNet::default_for(cfg.dim, seed);
        let fs = VisualFeatureSet::synthetic(1, seed, &VisualFeatureSet::default_widths(cfg.dim), 0.5);
        let visual = aggregate_features(&fs, &proj).unwrap();
        let adapter = adapter.with_projection(proj);
        let plain = forward_logits(&cfg, &base, None, None, &ids).unwrap();
        let adapted = forward_logits(&cfg, &base, Some(&adapter), Some(&visual), &ids).unwrap();
        prop_assert!(plain.max_abs_diff(&adapted).unwrap() < 1e-5);
    }

    #[test]
    fn decoder_is_causal(ids in ids_strategy(), at in 0usize..24, tok in 0usize..64, seed in 0u64..1000) {
        let cfg = tiny(AttentionMode::CausalDecoder);
        let base = BaseWeights::<f32>::init(&cfg, seed).unwrap();
        let adapter = AdapterState::<f32>::init(&cfg, InitMode::RandInit, seed).unwrap();
        let at = at % ids.len();
        let mut other = ids.clone();
        other[at] = tok;
        let a = forward_logits(&cfg, &base, Some(&adapter), None, &ids).unwrap();
        let b = forward_logits(&cfg, &base, Some(&adapter), None, &other).unwrap();
        let v = cfg.vocab_size;
        prop_assert_eq!(&a.data()[..at * v], &b.data()[..at * v]);
    }

    #[test]
    fn cached_decoding_matches_full_forward(ids in ids_strategy(), split in 1usize..24, seed in 0u64..1000) {
        let cfg = tiny(AttentionMode::CausalDecoder);
        let base = BaseWeights::<f32>::init(&cfg, seed).unwrap();
        let mut adapter = AdapterState::<f32>::init(&cfg, InitMode::ZeroInit, seed).unwrap();
        adapter.gates = Tensor::full(adapter.gates.shape(), 0.5);
        let full = forward_logits(&cfg, &base, Some(&adapter), None, &ids).unwrap();
        let split = split.min(ids.len());
        let mut s = Session::new(&cfg, &base, Some(&adapter), None).unwrap();
        let mut rows = s.feed(&ids[..split]).unwrap().into_data();
        for &t in &ids[split..] {
            rows.extend(s.feed(&[t]).unwrap().into_data());
        }
        let worst = rows.iter().zip(full.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        prop_assert!(worst < 1e-5, "{}", worst);
    }

    #[test]
    fn nucleus_is_the_smallest_covering_prefix(raw in prop::collection::vec(0.0f64..1.0, 1..12), top_p in 0.05f64..1.0) {
        let total: f64 = raw.iter().sum::<f64>() + 1e-9;
        let probs: Vec<f64> = raw.iter().map(|x| (x + 1e-9 / raw.len() as f64) / total).collect();
        let kept = nucleus(&probs, top_p);
        let mass: f64 = kept.iter().map(|&(i, _)| probs[i]).sum();
        prop_assert!(mass >= top_p - 1e-12 || kept.len() == probs.len());
        let without_last: f64 = kept[..kept.len() - 1].iter().map(|&(i, _)| probs[i]).sum();
        prop_assert!(without_last < top_p);
        let renorm: f64 = kept.iter().map(|&(_, p)| p).sum();
        prop_assert!((renorm - 1.0).abs() < 1e-9);
        let min_kept = kept.iter().map(|&(i, _)| probs[i]).fold(f64::INFINITY, f64::min);
        let kept_ids: Vec<usize> = kept.iter().map(|&(i, _)| i).collect();
        for (i, &p) in probs.iter().enumerate() {
            if !kept_ids.contains(&i) {
                prop_assert!(p <= min_kept);
            }
        }
    }

    #[test]
    fn text_round_trips(s in "[a-z0-9 #:\n.,;?!'+=*/()<>|_&%-]{0,40}") {
        prop_assert_eq!(tokenizer::decode(&tokenizer::encode(&s)), s);
    }

    #[test]
    fn adapter_checkpoint_round_trips(seed in 0u64..1000, rand in any::<bool>(), multimodal in any::<bool>()) {
        let cfg = tiny(AttentionMode::CausalDecoder);
        let mode = if rand { InitMode::RandInit } else { InitMode::ZeroInit };
        let mut a = AdapterState::<f32>::init(&cfg, mode, seed).unwrap();
        if !rand {
            a.gates = Tensor::randn(a.gates.shape(), 1.0, &mut Rng::new(seed));
        }
        if multimodal {
            a = a.with_projection(ProjectionNet::default_for(cfg.dim, seed));
        }
        let bytes = Checkpoint::adapter(&cfg, &a).to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.adapter_state(&cfg).unwrap(), a);
    }
}

#[test]
fn training_never_touches_the_base_or_frozen_entries() {
    let cfg = ModelConfig {
        max_seq: 64,
        ..tiny(AttentionMode::CausalDecoder)
    };
    let base = BaseWeights::<f32>::init(&cfg, 1).unwrap();
    let before = base.param_digest();
    let mut task = ToyTask::new(TaskKind::Copy, 2);
    task.samples = 40;
    let data = make_dataset(&task).unwrap();
    for mode in [InitMode::ZeroInit, InitMode::RandInit] {
        let tcfg = TrainConfig {
            max_steps: Some(6),
            batch_size: 4,
            init_mode: mode,
            ..TrainConfig::toy()
        };
        let start = AdapterState::init(&cfg, mode, 3).unwrap();
        let out = train(&cfg, &base, start.clone(), &data, &tcfg).unwrap();
        assert_eq!(base.param_digest(), before);
        assert_eq!(out.log.len(), 6);
        // every trainable tensor moved; the optimizer holds state for exactly those
        let mask = start.trainable_mask();
        for ((name, a), (_, b)) in start.named().into_iter().zip(out.adapter.named()) {
            assert!(mask.contains(&name));
            assert_ne!(a, b, "{name} did not train");
        }
        let names: Vec<&String> = out.optimizer.moments.keys().collect();
        assert_eq!(names, mask.iter().collect::<Vec<_>>());
    }
}
