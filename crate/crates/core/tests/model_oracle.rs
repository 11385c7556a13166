//! The library forward passes against a from-scratch loop implementation.

use zadapt::adapter::{AdapterState, InitMode};
use zadapt::model::forward::Bound;
use zadapt::model::{forward_logits, AttentionMode, BaseVars, BaseWeights, ModelConfig};
use zadapt::multimodal::{aggregate_features, ProjectionNet, VisualFeatureSet};
use zadapt::params::{Parameters, TrainableMask};
use zadapt::rng::Rng;
use zadapt::tape::Tape;
use zadapt::tensor::Tensor;
use zadapt::adapter::AdapterVars;

type M = Vec<Vec<f64>>;

fn rows(t: &Tensor<f64>) -> M {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn mm(a: &M, b: &M) -> M {
    a.iter()
        .map(|r| (0..b[0].len()).map(|j| r.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn rmsnorm(x: &M, w: &[f64], eps: f64) -> M {
    x.iter()
        .map(|r| {
            let ms = r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
            let s = 1.0 / (ms + eps).sqrt();
            r.iter().zip(w).map(|(v, g)| v * s * g).collect()
        })
        .collect()
}

fn rope(x: &mut M, hd: usize) {
    for (pos, r) in x.iter_mut().enumerate() {
        for h in 0..r.len() / hd {
            for j in 0..hd / 2 {
                let theta = pos as f64 / 10000f64.powf(2.0 * j as f64 / hd as f64);
                let (a, b) = (r[h * hd + 2 * j], r[h * hd + 2 * j + 1]);
                r[h * hd + 2 * j] = a * theta.cos() - b * theta.sin();
                r[h * hd + 2 * j + 1] = a * theta.sin() + b * theta.cos();
            }
        }
    }
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Plain-loop logits. Prompts are projected without normalization or rotation.
fn oracle(cfg: &ModelConfig, base: &BaseWeights<f64>, adapter: Option<&AdapterState<f64>>, visual: Option<&[f64]>, ids: &[usize]) -> M {
    let causal = cfg.mode == AttentionMode::CausalDecoder;
    let hd = cfg.dim / cfg.n_heads;
    let emb = rows(&base.tok_embed);
    let mut x: M = ids.iter().map(|&i| emb[i].clone()).collect();
    if let Some(p) = &base.pos_embed {
        let p = rows(p);
        for (i, r) in x.iter_mut().enumerate() {
            r.iter_mut().zip(&p[i]).for_each(|(a, b)| *a += b);
        }
    }
    let first = cfg.n_layers - cfg.adapted_layers;
    for (l, w) in base.layers.iter().enumerate() {
        let h = rmsnorm(&x, w.attn_norm.data(), cfg.rmsnorm_eps);
        let mut q = mm(&h, &rows(&w.wq));
        let mut k = mm(&h, &rows(&w.wk));
        let v = mm(&h, &rows(&w.wv));
        if causal {
            rope(&mut q, hd);
            rope(&mut k, hd);
        }
        let prompt = adapter.filter(|_| l >= first).map(|a| {
            let mut p = rows(&a.prompts[l - first]);
            if let Some(vis) = visual {
                p.iter_mut().for_each(|r| r.iter_mut().zip(vis).for_each(|(x, y)| *x += y));
            }
            (mm(&p, &rows(&w.wk)), mm(&p, &rows(&w.wv)), a, l - first)
        });
        let n = ids.len();
        let mut o = vec![vec![0.0; cfg.dim]; n];
        for head in 0..cfg.n_heads {
            let cols = head * hd..(head + 1) * hd;
            let dot = |a: &[f64], b: &[f64]| a[cols.clone()].iter().zip(&b[cols.clone()]).map(|(x, y)| x * y).sum::<f64>() / (hd as f64).sqrt();
            for i in 0..n {
                let visible = if causal { i + 1 } else { n };
                let ws: Vec<f64> = (0..visible).map(|j| dot(&q[i], &k[j])).collect();
                let (pw, ww): (Vec<f64>, Vec<f64>) = match &prompt {
                    None => (vec![], softmax(&ws)),
                    Some((pk, _, a, slot)) => {
                        let ps: Vec<f64> = pk.iter().map(|kr| dot(&q[i], kr)).collect();
                        if a.is_gated() {
                            let g = a.gates.row(*slot)[head];
                            (softmax(&ps).iter().map(|p| g * p).collect(), softmax(&ws))
                        } else {
                            let all = softmax(&[ps.clone(), ws].concat());
                            (all[..ps.len()].to_vec(), all[ps.len()..].to_vec())
                        }
                    }
                };
                for c in cols.clone() {
                    let mut acc: f64 = ww.iter().enumerate().map(|(j, p)| p * v[j][c]).sum();
                    if let Some((_, pv, _, _)) = &prompt {
                        acc += pw.iter().zip(pv).map(|(p, r)| p * r[c]).sum::<f64>();
                    }
                    o[i][c] = acc;
                }
            }
        }
        x = add(&x, &mm(&o, &rows(&w.wo)));
        let h = rmsnorm(&x, w.ffn_norm.data(), cfg.rmsnorm_eps);
        let a = mm(&h, &rows(&w.w1));
        let b = mm(&h, &rows(&w.w3));
        let ab: M = a
            .iter()
            .zip(&b)
            .map(|(ra, rb)| ra.iter().zip(rb).map(|(u, v)| u / (1.0 + (-u).exp()) * v).collect())
            .collect();
        x = add(&x, &mm(&ab, &rows(&w.w2)));
    }
    mm(&rmsnorm(&x, base.final_norm.data(), cfg.rmsnorm_eps), &rows(&base.head))
}

fn small(mode: AttentionMode) -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        dim: 16,
        n_heads: 4,
        n_layers: 3,
        adapted_layers: 2,
        prompt_len: 3,
        max_seq: 12,
        ffn_hidden: 24,
        mode,
        rmsnorm_eps: 1e-5,
    }
}

fn live(cfg: &ModelConfig, mode: InitMode, rng: &mut Rng) -> AdapterState<f64> {
    let mut a = AdapterState::<f64>::init(cfg, mode, rng.next_u64()).unwrap();
    for p in &mut a.prompts {
        *p = Tensor::randn(p.shape(), 0.8, rng);
    }
    if a.is_gated() {
        a.gates = Tensor::randn(a.gates.shape(), 0.8, rng);
    }
    a
}

fn max_diff(a: &M, b: &Tensor<f64>) -> f64 {
    a.iter().flatten().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn tape_logits(cfg: &ModelConfig, base: &BaseWeights<f64>, adapter: Option<&AdapterState<f64>>, visual: Option<&Tensor<f64>>, ids: &[usize]) -> Tensor<f64> {
    let mut t = Tape::new();
    let bb = base.bind(&mut t, &TrainableMask::new());
    let bv = BaseVars::from_bound(&bb, cfg.n_layers);
    let ad = adapter.map(|a| {
        let ab = a.bind(&mut t, &TrainableMask::new());
        AdapterVars::from_bound(&ab, a)
    });
    let vis = visual.map(|v| t.constant(v.clone()));
    let bound = Bound {
        cfg,
        base: &bv,
        adapter: ad.as_ref(),
        visual: vis,
    };
    let l = bound.logits(&mut t, ids).unwrap();
    t.value(l).clone()
}

#[test]
fn forward_matches_loop_oracle() {
    let mut rng = Rng::new(11);
    for mode in [AttentionMode::CausalDecoder, AttentionMode::BidirectionalEncoder] {
        let cfg = small(mode);
        let base = BaseWeights::<f64>::init(&cfg, 5).unwrap();
        let ids: Vec<usize> = (0..9).map(|_| rng.below(cfg.vocab_size)).collect();
        for init in [None, Some(InitMode::ZeroInit), Some(InitMode::RandInit)] {
            let adapter = init.map(|m| live(&cfg, m, &mut rng));
            let want = oracle(&cfg, &base, adapter.as_ref(), None, &ids);
            let got = forward_logits(&cfg, &base, adapter.as_ref(), None, &ids).unwrap();
            assert!(max_diff(&want, &got) < 1e-10, "{mode:?} {init:?} session");
            let got = tape_logits(&cfg, &base, adapter.as_ref(), None, &ids);
            assert!(max_diff(&want, &got) < 1e-10, "{mode:?} {init:?} tape");
        }
    }
}

#[test]
fn visual_fusion_matches_oracle() {
    let mut rng = Rng::new(12);
    let cfg = small(AttentionMode::CausalDecoder);
    let base = BaseWeights::<f64>::init(&cfg, 6).unwrap();
    let widths = VisualFeatureSet::default_widths(cfg.dim);
    let proj = ProjectionNet::<f64>::default_for(cfg.dim, 3);
    let adapter = live(&cfg, InitMode::ZeroInit, &mut rng).with_projection(proj.clone());
    let fs = VisualFeatureSet::synthetic(2, 9, &widths, 0.5);
    let visual = aggregate_features(&fs, &proj).unwrap();
    assert_eq!(visual.shape(), &[1, cfg.dim]);
    let ids: Vec<usize> = (0..7).map(|_| rng.below(cfg.vocab_size)).collect();
    let want = oracle(&cfg, &base, Some(&adapter), Some(visual.data()), &ids);
    let got = forward_logits(&cfg, &base, Some(&adapter), Some(&visual), &ids).unwrap();
    assert!(max_diff(&want, &got) < 1e-10);
    let got = tape_logits(&cfg, &base, Some(&adapter), Some(&visual), &ids);
    assert!(max_diff(&want, &got) < 1e-10);
}
