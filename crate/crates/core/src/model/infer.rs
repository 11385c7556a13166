//! Tape-free inference with a key/value cache.

use crate::adapter::AdapterState;
use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, PrefixNorm};
use crate::multimodal::fuse_prompts;
use crate::tensor::{Real, Tensor};

use super::config::ModelConfig;
use super::weights::{BaseWeights, ClassHead, LayerWeights};

/// Rotated keys and values of every word processed so far, per layer.
#[derive(Clone, Debug)]
pub struct KVCache<T: Real = f32> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T: Real> KVCache<T> {
    fn new(layers: usize) -> Self {
        Self {
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Projected prompt keys/values for one adapted layer.
#[derive(Clone, Debug)]
struct PromptKV<T> {
    keys: Vec<T>,
    values: Vec<T>,
    rows: usize,
    slot: usize,
}

/// One decoding context over a shared read-only model.
pub struct Session<'a, T: Real = f32> {
    cfg: &'a ModelConfig,
    base: &'a BaseWeights<T>,
    adapter: Option<&'a AdapterState<T>>,
    prompts: Vec<Option<PromptKV<T>>>,
    cache: KVCache<T>,
}

impl<'a, T: Real> Session<'a, T> {
    /// `visual` is the projected row `I_p` fused into every adapted prompt.
    pub fn new(
        cfg: &'a ModelConfig,
        base: &'a BaseWeights<T>,
        adapter: Option<&'a AdapterState<T>>,
        visual: Option<&Tensor<T>>,
    ) -> Result<Self> {
        cfg.validate()?;
        if base.layers.len() != cfg.n_layers {
            return Err(Error::Incompatible(format!(
                "base has {} layers, config says {}",
                base.layers.len(),
                cfg.n_layers
            )));
        }
        let mut prompts = vec![None; cfg.n_layers];
        if let Some(a) = adapter {
            a.check_compatible(cfg)?;
            for (layer, w) in base.layers.iter().enumerate() {
                let Some(slot) = a.slot(layer) else { continue };
                let p = match visual {
                    Some(v) => fuse_prompts(&a.prompts[slot], v)?,
                    None => a.prompts[slot].clone(),
                };
                let rows = p.rows();
                let c = cfg.dim;
                prompts[layer] = Some(PromptKV {
                    keys: kernels::matmul(p.data(), w.wk.data(), rows, c, c),
                    values: kernels::matmul(p.data(), w.wv.data(), rows, c, c),
                    rows,
                    slot,
                });
            }
        }
        Ok(Self {
            cfg,
            base,
            adapter,
            prompts,
            cache: KVCache::new(cfg.n_layers),
        })
    }

    pub fn cache(&self) -> &KVCache<T> {
        &self.cache
    }

    /// Append `ids` to the context; returns their final-normed states `[r×C]`.
    pub fn feed_hidden(&mut self, ids: &[usize]) -> Result<Tensor<T>> {
        let cfg = self.cfg;
        let c = cfg.dim;
        let past = self.cache.len;
        if past + ids.len() > cfg.max_seq {
            return Err(Error::Capacity {
                needed: past + ids.len(),
                max: cfg.max_seq,
            });
        }
        if !cfg.is_causal() && past > 0 {
            return Err(Error::Config("encoder mode takes the whole input in one call".into()));
        }
        let emb = self.base.tok_embed.data();
        let mut x = Vec::with_capacity(ids.len() * c);
        for (i, &id) in ids.iter().enumerate() {
            if id >= cfg.vocab_size {
                return Err(Error::Vocabulary {
                    id,
                    vocab: cfg.vocab_size,
                });
            }
            x.extend_from_slice(&emb[id * c..(id + 1) * c]);
            if let Some(pos) = &self.base.pos_embed {
                let p = past + i;
                for (v, &e) in x[i * c..].iter_mut().zip(&pos.data()[p * c..(p + 1) * c]) {
                    *v += e;
                }
            }
        }
        for layer in 0..cfg.n_layers {
            self.block(layer, &mut x, past, ids.len());
        }
        self.cache.len += ids.len();
        let eps = T::of(cfg.rmsnorm_eps);
        let (out, _) = kernels::rmsnorm_rows(&x, self.base.final_norm.data(), eps, c);
        Tensor::new(vec![ids.len(), c], out)
    }

    /// Append `ids`; returns next-token logits `[r×V]`.
    pub fn feed(&mut self, ids: &[usize]) -> Result<Tensor<T>> {
        let h = self.feed_hidden(ids)?;
        let (r, c, v) = (ids.len(), self.cfg.dim, self.cfg.vocab_size);
        Tensor::new(vec![r, v], kernels::matmul(h.data(), self.base.head.data(), r, c, v))
    }

    fn block(&mut self, layer: usize, x: &mut [T], past: usize, rows: usize) {
        let cfg = self.cfg;
        let w: &LayerWeights<T> = &self.base.layers[layer];
        let c = cfg.dim;
        let eps = T::of(cfg.rmsnorm_eps);
        let (h, _) = kernels::rmsnorm_rows(x, w.attn_norm.data(), eps, c);
        let attn = self.attention(layer, &h, past, rows);
        for (a, b) in x.iter_mut().zip(&attn) {
            *a += *b;
        }
        let (h, _) = kernels::rmsnorm_rows(x, w.ffn_norm.data(), eps, c);
        let f = cfg.ffn_hidden;
        let mut a = kernels::matmul(&h, w.w1.data(), rows, c, f);
        let b = kernels::matmul(&h, w.w3.data(), rows, c, f);
        for (ai, &bi) in a.iter_mut().zip(&b) {
            *ai = kernels::silu(*ai) * bi;
        }
        let out = kernels::matmul(&a, w.w2.data(), rows, f, c);
        for (xi, &o) in x.iter_mut().zip(&out) {
            *xi += o;
        }
    }

    fn attention(&mut self, layer: usize, h: &[T], past: usize, rows: usize) -> Vec<T> {
        let cfg = self.cfg;
        let w = &self.base.layers[layer];
        let (c, heads, hd) = (cfg.dim, cfg.n_heads, cfg.head_dim());
        let mut q = kernels::matmul(h, w.wq.data(), rows, c, c);
        let mut k = kernels::matmul(h, w.wk.data(), rows, c, c);
        let v = kernels::matmul(h, w.wv.data(), rows, c, c);
        if cfg.is_causal() {
            let positions: Vec<usize> = (past..past + rows).collect();
            kernels::rope_rows(&mut q, c, hd, &positions, 1.0);
            kernels::rope_rows(&mut k, c, hd, &positions, 1.0);
        }
        self.cache.keys[layer].extend_from_slice(&k);
        self.cache.values[layer].extend_from_slice(&v);
        let words = past + rows;
        let (keys, values) = (&self.cache.keys[layer], &self.cache.values[layer]);
        let prompt = self.prompts[layer].as_ref();
        let k_len = prompt.map_or(0, |p| p.rows);
        let width = k_len + words;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let head_cols = |src: &[T], n: usize, head: usize| -> Vec<T> {
            src.chunks_exact(c)
                .take(n)
                .flat_map(|row| row[head * hd..(head + 1) * hd].iter().copied())
                .collect()
        };
        let mut mixed = vec![T::zero(); rows * c];
        let mut weights = vec![T::zero(); width];
        let mut probs = vec![T::zero(); k_len];
        for head in 0..heads {
            let qh = head_cols(&q, rows, head);
            let mut kh = Vec::with_capacity(width * hd);
            let mut vh = Vec::with_capacity(width * hd);
            if let Some(p) = prompt {
                kh.extend(head_cols(&p.keys, p.rows, head));
                vh.extend(head_cols(&p.values, p.rows, head));
            }
            kh.extend(head_cols(keys, words, head));
            vh.extend(head_cols(values, words, head));
            let mut scores = vec![T::zero(); rows * width];
            kernels::matmul_nt_acc(&mut scores, &qh, &kh, rows, hd, width);
            scores.iter_mut().for_each(|s| *s *= scale);
            let norm = match (prompt, self.adapter) {
                (Some(p), Some(a)) if a.is_gated() => PrefixNorm::Gated(a.gate(p.slot, head)),
                _ => PrefixNorm::Joint,
            };
            let mut out_h = vec![T::zero(); rows * hd];
            for i in 0..rows {
                let visible = if cfg.is_causal() { past + i + 1 } else { words };
                kernels::prefix_weights_row(
                    &scores[i * width..(i + 1) * width],
                    k_len,
                    visible,
                    norm,
                    &mut weights,
                    &mut probs,
                );
                kernels::matmul_acc(&mut out_h[i * hd..(i + 1) * hd], &weights, &vh, 1, width, hd);
            }
            for (i, row) in out_h.chunks_exact(hd).enumerate() {
                mixed[i * c + head * hd..i * c + (head + 1) * hd].copy_from_slice(row);
            }
        }
        kernels::matmul(&mixed, w.wo.data(), rows, c, c)
    }
}

/// Full-sequence logits `[M×V]`; the pure base model when `adapter` is `None`.
pub fn forward_logits<T: Real>(
    cfg: &ModelConfig,
    base: &BaseWeights<T>,
    adapter: Option<&AdapterState<T>>,
    visual: Option<&Tensor<T>>,
    ids: &[usize],
) -> Result<Tensor<T>> {
    Session::new(cfg, base, adapter, visual)?.feed(ids)
}

/// Mean-pooled encoder states through a linear class head.
pub fn encoder_classify<T: Real>(
    cfg: &ModelConfig,
    base: &BaseWeights<T>,
    adapter: Option<&AdapterState<T>>,
    head: &ClassHead<T>,
    ids: &[usize],
) -> Result<Tensor<T>> {
    if cfg.is_causal() {
        return Err(Error::Config("encoder_classify needs bidirectional_encoder mode".into()));
    }
    if ids.is_empty() {
        return dim_err("encoder_classify", &[0], &[1]);
    }
    let h = Session::new(cfg, base, adapter, None)?.feed_hidden(ids)?;
    let c = cfg.dim;
    let mut pooled = vec![T::zero(); c];
    for row in h.data().chunks_exact(c) {
        for (p, &x) in pooled.iter_mut().zip(row) {
            *p += x;
        }
    }
    let inv = T::one() / T::of(ids.len() as f64);
    pooled.iter_mut().for_each(|p| *p *= inv);
    let n = head.classes();
    let mut out = kernels::matmul(&pooled, head.weight.data(), 1, c, n);
    for (o, &b) in out.iter_mut().zip(head.bias.data()) {
        *o += b;
    }
    Tensor::new(vec![n], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{AdapterVars, InitMode};
    use crate::model::forward::Bound;
    use crate::model::weights::BaseVars;
    use crate::params::{Parameters, TrainableMask};
    use crate::rng::Rng;
    use crate::tape::Tape;

    fn perturbed_adapter(cfg: &ModelConfig, mode: InitMode) -> AdapterState<f64> {
        let mut a = AdapterState::<f64>::init(cfg, mode, 7).unwrap();
        let mut rng = Rng::new(11);
        a.prompts = a.prompts.iter().map(|p| Tensor::randn(p.shape(), 1.0, &mut rng)).collect();
        if mode == InitMode::ZeroInit {
            a.gates = Tensor::randn(a.gates.shape(), 0.5, &mut rng);
        }
        a
    }

    fn tape_logits(cfg: &ModelConfig, base: &BaseWeights<f64>, a: &AdapterState<f64>, ids: &[usize]) -> Tensor<f64> {
        let mut tape = Tape::new();
        let none = TrainableMask::new();
        let bb = base.bind(&mut tape, &none);
        let ab = a.bind(&mut tape, &none);
        let base_vars = BaseVars::from_bound(&bb, cfg.n_layers);
        let ad = AdapterVars::from_bound(&ab, a);
        let bound = Bound {
            cfg,
            base: &base_vars,
            adapter: Some(&ad),
            visual: None,
        };
        let l = bound.logits(&mut tape, ids).unwrap();
        tape.value(l).clone()
    }

    #[test]
    fn session_matches_tape_forward() {
        for mode in [InitMode::ZeroInit, InitMode::RandInit] {
            let cfg = ModelConfig::toy();
            let base = BaseWeights::<f64>::init(&cfg, 3).unwrap();
            let a = perturbed_adapter(&cfg, mode);
            let ids: Vec<usize> = (0..9).map(|i| (i * 7 + 3) % 64).collect();
            let full = forward_logits(&cfg, &base, Some(&a), None, &ids).unwrap();
            let taped = tape_logits(&cfg, &base, &a, &ids);
            assert!(full.max_abs_diff(&taped).unwrap() < 1e-10);
            let mut s = Session::new(&cfg, &base, Some(&a), None).unwrap();
            for (i, &id) in ids.iter().enumerate() {
                let step = s.feed(&[id]).unwrap();
                for (x, y) in step.data().iter().zip(full.row(i)) {
                    assert!((x - y).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn capacity_is_enforced() {
        let cfg = ModelConfig { max_seq: 4, ..ModelConfig::toy() };
        let base = BaseWeights::<f32>::init(&cfg, 0).unwrap();
        let mut s = Session::new(&cfg, &base, None, None).unwrap();
        s.feed(&[1, 2, 3]).unwrap();
        assert!(matches!(s.feed(&[1, 2]), Err(Error::Capacity { needed: 5, max: 4 })));
    }
}
