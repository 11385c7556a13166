use crate::error::Result;
use crate::params::{var_of, Parameters};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

use super::config::{AttentionMode, ModelConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T: Real = f32> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ffn_norm: Tensor<T>,
    pub w1: Tensor<T>,
    pub w3: Tensor<T>,
    pub w2: Tensor<T>,
}

/// Parameters of the frozen base transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseWeights<T: Real = f32> {
    pub tok_embed: Tensor<T>,
    /// Learned absolute positions, encoder mode only.
    pub pos_embed: Option<Tensor<T>>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Tensor<T>,
    pub head: Tensor<T>,
}

impl<T: Real> BaseWeights<T> {
    /// Seeded random initialization; the stand-in for a pre-trained model.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = Rng::new(seed);
        let (c, f, v) = (cfg.dim, cfg.ffn_hidden, cfg.vocab_size);
        let out_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let proj = |rng: &mut Rng, rows: usize, cols: usize, scale: f64| {
            Tensor::randn(&[rows, cols], scale / (rows as f64).sqrt(), rng)
        };
        let mut rng = root.split(0);
        let tok_embed = Tensor::randn(&[v, c], 1.0, &mut rng);
        let pos_embed = match cfg.mode {
            AttentionMode::BidirectionalEncoder => Some(Tensor::randn(&[cfg.max_seq, c], 0.5, &mut rng)),
            AttentionMode::CausalDecoder => None,
        };
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let mut rng = root.split(1 + l as u64);
                LayerWeights {
                    attn_norm: Tensor::full(&[c], T::one()),
                    wq: proj(&mut rng, c, c, 1.0),
                    wk: proj(&mut rng, c, c, 1.0),
                    wv: proj(&mut rng, c, c, 1.0),
                    wo: proj(&mut rng, c, c, out_scale),
                    ffn_norm: Tensor::full(&[c], T::one()),
                    w1: proj(&mut rng, c, f, 1.0),
                    w3: proj(&mut rng, c, f, 1.0),
                    w2: proj(&mut rng, f, c, out_scale),
                }
            })
            .collect();
        let mut rng = root.split(1000);
        Ok(Self {
            tok_embed,
            pos_embed,
            layers,
            final_norm: Tensor::full(&[c], T::one()),
            head: proj(&mut rng, c, v, 1.0),
        })
    }

    pub fn cast<U: Real>(&self) -> BaseWeights<U> {
        BaseWeights {
            tok_embed: self.tok_embed.cast(),
            pos_embed: self.pos_embed.as_ref().map(Tensor::cast),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    ffn_norm: l.ffn_norm.cast(),
                    w1: l.w1.cast(),
                    w3: l.w3.cast(),
                    w2: l.w2.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            head: self.head.cast(),
        }
    }
}

const LAYER_FIELDS: [&str; 9] = ["attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w1", "w3", "w2"];

impl<T: Real> Parameters<T> for BaseWeights<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("base.tok_embed".to_string(), &self.tok_embed)];
        if let Some(p) = &self.pos_embed {
            out.push(("base.pos_embed".into(), p));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let fields = [&l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.ffn_norm, &l.w1, &l.w3, &l.w2];
            for (name, t) in LAYER_FIELDS.iter().zip(fields) {
                out.push((format!("base.layers.{i}.{name}"), t));
            }
        }
        out.push(("base.final_norm".into(), &self.final_norm));
        out.push(("base.head".into(), &self.head));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("base.tok_embed".to_string(), &mut self.tok_embed)];
        if let Some(p) = &mut self.pos_embed {
            out.push(("base.pos_embed".into(), p));
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            let fields = [
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm,
                &mut l.w1,
                &mut l.w3,
                &mut l.w2,
            ];
            for (name, t) in LAYER_FIELDS.iter().zip(fields) {
                out.push((format!("base.layers.{i}.{name}"), t));
            }
        }
        out.push(("base.final_norm".into(), &mut self.final_norm));
        out.push(("base.head".into(), &mut self.head));
        out
    }
}

/// Tape handles of one transformer block.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w1: Var,
    pub w3: Var,
    pub w2: Var,
}

/// Tape handles of the base model.
#[derive(Clone, Debug)]
pub struct BaseVars {
    pub tok_embed: Var,
    pub pos_embed: Option<Var>,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub head: Var,
}

impl BaseVars {
    pub fn from_bound(bound: &[(String, Var)], n_layers: usize) -> Self {
        let get = |n: &str| var_of(bound, n);
        let pos_embed = bound.iter().find(|(n, _)| n == "base.pos_embed").map(|(_, v)| *v);
        Self {
            tok_embed: get("base.tok_embed"),
            pos_embed,
            layers: (0..n_layers)
                .map(|i| {
                    let f = |field: &str| get(&format!("base.layers.{i}.{field}"));
                    LayerVars {
                        attn_norm: f("attn_norm"),
                        wq: f("wq"),
                        wk: f("wk"),
                        wv: f("wv"),
                        wo: f("wo"),
                        ffn_norm: f("ffn_norm"),
                        w1: f("w1"),
                        w3: f("w3"),
                        w2: f("w2"),
                    }
                })
                .collect(),
            final_norm: get("base.final_norm"),
            head: get("base.head"),
        }
    }
}

/// Linear head over mean-pooled encoder states.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassHead<T: Real = f32> {
    /// `[C×n_classes]`.
    pub weight: Tensor<T>,
    /// `[1×n_classes]`.
    pub bias: Tensor<T>,
}

impl<T: Real> ClassHead<T> {
    pub fn init(dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed).split(0xC1A5);
        Self {
            weight: Tensor::randn(&[dim, classes], 1.0 / (dim as f64).sqrt(), &mut rng),
            bias: Tensor::zeros(&[1, classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.cols()
    }
}

impl<T: Real> Parameters<T> for ClassHead<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("cls.weight".into(), &self.weight), ("cls.bias".into(), &self.bias)]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("cls.weight".into(), &mut self.weight), ("cls.bias".into(), &mut self.bias)]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ClassHeadVars {
    pub weight: Var,
    pub bias: Var,
}

impl ClassHeadVars {
    pub fn from_bound(bound: &[(String, Var)]) -> Self {
        Self {
            weight: var_of(bound, "cls.weight"),
            bias: var_of(bound, "cls.bias"),
        }
    }
}
