//! Learnable adaption prompts with zero-initialized, per-head gated attention.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, PrefixNorm};
use crate::model::config::ModelConfig;
use crate::model::weights::LayerWeights;
use crate::multimodal::ProjectionNet;
use crate::params::{var_of, Parameters, TrainableMask};
use crate::rng::Rng;
use crate::tape::{AttnNorm, Var};
use crate::tensor::{Real, Tensor};

/// Standard deviation of the initial prompt values.
pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Gated attention, gates start at exactly zero.
    ZeroInit,
    /// Ungated prefix attention with one joint softmax (ablation baseline).
    RandInit,
}

impl InitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InitMode::ZeroInit => "zero_init",
            InitMode::RandInit => "rand_init",
        }
    }
}

impl std::str::FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero_init" => Ok(InitMode::ZeroInit),
            "rand_init" => Ok(InitMode::RandInit),
            other => Err(Error::Usage(format!("unknown init mode `{other}`"))),
        }
    }
}

/// Prompt bank `P_l`, gate bank `g_{l,h}` and the optional visual projection.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterState<T: Real = f32> {
    /// One `[K×C]` prompt per adapted layer, bottom to top.
    pub prompts: Vec<Tensor<T>>,
    /// `[L×H]`. Fixed to 1 and unused under [`InitMode::RandInit`].
    pub gates: Tensor<T>,
    pub init_mode: InitMode,
    /// Index of the first adapted layer, `N − L`.
    pub layer_offset: usize,
    pub projection: Option<ProjectionNet<T>>,
}

impl<T: Real> AdapterState<T> {
    pub fn init(cfg: &ModelConfig, mode: InitMode, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed).split(0xADA9);
        let (l, k, c, h) = (cfg.adapted_layers, cfg.prompt_len, cfg.dim, cfg.n_heads);
        let prompts = (0..l).map(|_| Tensor::randn(&[k, c], PROMPT_INIT_STD, &mut rng)).collect();
        let gates = match mode {
            InitMode::ZeroInit => Tensor::zeros(&[l, h]),
            InitMode::RandInit => Tensor::full(&[l, h], T::one()),
        };
        Ok(Self {
            prompts,
            gates,
            init_mode: mode,
            layer_offset: cfg.first_adapted_layer(),
            projection: None,
        })
    }

    pub fn with_projection(mut self, proj: ProjectionNet<T>) -> Self {
        self.projection = Some(proj);
        self
    }

    pub fn adapted_layers(&self) -> usize {
        self.prompts.len()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompts.first().map_or(0, Tensor::rows)
    }

    /// Prompt index for base layer `layer`, if adapted.
    pub fn slot(&self, layer: usize) -> Option<usize> {
        layer
            .checked_sub(self.layer_offset)
            .filter(|&i| i < self.prompts.len())
    }

    pub fn gate(&self, slot: usize, head: usize) -> T {
        self.gates.data()[slot * self.gates.cols() + head]
    }

    pub fn is_gated(&self) -> bool {
        self.init_mode == InitMode::ZeroInit
    }

    /// Names the optimizer may touch: prompts, gates when gated, projection.
    pub fn trainable_mask(&self) -> TrainableMask {
        TrainableMask::all(self)
    }

    /// Check geometry against a model config.
    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        let ok = self.prompts.len() == cfg.adapted_layers
            && self.layer_offset == cfg.first_adapted_layer()
            && self.prompts.iter().all(|p| p.shape() == [cfg.prompt_len, cfg.dim])
            && self.gates.shape() == [cfg.adapted_layers, cfg.n_heads]
            && self.projection.as_ref().is_none_or(|p| p.out_width() == cfg.dim);
        if ok {
            Ok(())
        } else {
            Err(Error::Incompatible(format!(
                "adapter geometry (L={}, K={}) does not fit model (L={}, K={}, C={}, H={})",
                self.prompts.len(),
                self.prompt_len(),
                cfg.adapted_layers,
                cfg.prompt_len,
                cfg.dim,
                cfg.n_heads
            )))
        }
    }

    pub fn cast<U: Real>(&self) -> AdapterState<U> {
        AdapterState {
            prompts: self.prompts.iter().map(Tensor::cast).collect(),
            gates: self.gates.cast(),
            init_mode: self.init_mode,
            layer_offset: self.layer_offset,
            projection: self.projection.as_ref().map(ProjectionNet::cast),
        }
    }
}

impl<T: Real> Parameters<T> for AdapterState<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = self
            .prompts
            .iter()
            .enumerate()
            .map(|(i, p)| (format!("adapter.prompts.{i}"), p))
            .collect();
        if self.is_gated() {
            out.push(("adapter.gates".into(), &self.gates));
        }
        if let Some(p) = &self.projection {
            out.extend(p.named());
        }
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let gated = self.is_gated();
        let mut out: Vec<(String, &mut Tensor<T>)> = self
            .prompts
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (format!("adapter.prompts.{i}"), p))
            .collect();
        if gated {
            out.push(("adapter.gates".into(), &mut self.gates));
        }
        if let Some(p) = &mut self.projection {
            out.extend(p.named_mut());
        }
        out
    }
}

/// Tape handles of an adapter.
#[derive(Clone, Debug)]
pub struct AdapterVars {
    pub prompts: Vec<Var>,
    /// Absent for the ungated baseline.
    pub gates: Option<Var>,
    pub layer_offset: usize,
}

impl AdapterVars {
    pub fn from_bound<T: Real>(bound: &[(String, Var)], adapter: &AdapterState<T>) -> Self {
        Self {
            prompts: (0..adapter.adapted_layers())
                .map(|i| var_of(bound, &format!("adapter.prompts.{i}")))
                .collect(),
            gates: adapter.is_gated().then(|| var_of(bound, "adapter.gates")),
            layer_offset: adapter.layer_offset,
        }
    }

    pub fn slot(&self, layer: usize) -> Option<usize> {
        layer
            .checked_sub(self.layer_offset)
            .filter(|&i| i < self.prompts.len())
    }

    pub(crate) fn norm(&self, slot: usize, head: usize, n_heads: usize) -> AttnNorm {
        match self.gates {
            Some(gates) => AttnNorm::Gated {
                gates,
                index: slot * n_heads + head,
            },
            None => AttnNorm::Joint,
        }
    }
}

/// `[P_l; T_l]`: prompts stacked above the word tokens.
pub fn prepend_prompts<T: Real>(prompts: &Tensor<T>, tokens: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, c) = prompts.matrix_dims("prepend_prompts")?;
    let (m, c2) = tokens.matrix_dims("prepend_prompts")?;
    if c != c2 {
        return dim_err("prepend_prompts", prompts.shape(), tokens.shape());
    }
    let mut data = Vec::with_capacity((k + m) * c);
    data.extend_from_slice(prompts.data());
    data.extend_from_slice(tokens.data());
    Tensor::new(vec![k + m, c], data)
}

/// Softmax the first `k` scores and scale them by `g`; softmax the rest
/// independently. The result sums to `1 + g`.
pub fn split_and_gate<T: Real>(scores: &[T], k: usize, g: T) -> Result<Vec<T>> {
    if k > scores.len() {
        return dim_err("split_and_gate", &[1, scores.len()], &[k]);
    }
    let mut out = vec![T::zero(); scores.len()];
    let mut probs = vec![T::zero(); k];
    kernels::prefix_weights_row(scores, k, scores.len() - k, PrefixNorm::Gated(g), &mut out, &mut probs);
    Ok(out)
}

/// Adapted attention for a single new word token.
///
/// `t` is the normalized hidden state of the token being generated, `history`
/// the normalized states of the preceding words. Queries come from `t` only;
/// keys and values cover `[P; history; t]`. With `rotary`, words are rotated
/// by their sequence index and prompts are left unrotated.
pub fn adapted_attention<T: Real>(
    t: &Tensor<T>,
    history: &Tensor<T>,
    prompts: &Tensor<T>,
    gates: &[T],
    layer: &LayerWeights<T>,
    n_heads: usize,
    rotary: bool,
) -> Result<Tensor<T>> {
    let (one, c) = t.matrix_dims("adapted_attention")?;
    let (m, hc) = history.matrix_dims("adapted_attention")?;
    let (k, pc) = prompts.matrix_dims("adapted_attention")?;
    if one != 1 || hc != c || pc != c || gates.len() != n_heads || c % n_heads != 0 {
        return dim_err("adapted_attention", t.shape(), prompts.shape());
    }
    let hd = c / n_heads;
    let words = prepend_prompts(history, t)?;
    let proj = |x: &[T], w: &Tensor<T>, rows: usize| kernels::matmul(x, w.data(), rows, c, c);
    let mut q = proj(t.data(), &layer.wq, 1);
    let mut kw = proj(words.data(), &layer.wk, m + 1);
    let vw = proj(words.data(), &layer.wv, m + 1);
    if rotary {
        kernels::rope_rows(&mut q, c, hd, &[m], 1.0);
        let pos: Vec<usize> = (0..=m).collect();
        kernels::rope_rows(&mut kw, c, hd, &pos, 1.0);
    }
    let kp = proj(prompts.data(), &layer.wk, k);
    let vp = proj(prompts.data(), &layer.wv, k);
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut mixed = vec![T::zero(); c];
    for h in 0..n_heads {
        let cols = h * hd..(h + 1) * hd;
        let qh = &q[cols.clone()];
        let scores: Vec<T> = kp
            .chunks_exact(c)
            .chain(kw.chunks_exact(c))
            .map(|row| kernels::dot(qh, &row[cols.clone()]) * scale)
            .collect();
        let weights = split_and_gate(&scores, k, gates[h])?;
        for (w, row) in weights.iter().zip(vp.chunks_exact(c).chain(vw.chunks_exact(c))) {
            for (o, &v) in mixed[cols.clone()].iter_mut().zip(&row[cols.clone()]) {
                *o += *w * v;
            }
        }
    }
    let out = kernels::matmul(&mixed, layer.wo.data(), 1, c, c);
    Tensor::new(vec![1, c], out)
}

/// Learnable parameters added by the adapter: `L·K·C + L·H`, plus the
/// projection network when `multimodal`.
pub fn trainable_parameter_count(cfg: &ModelConfig, multimodal: bool) -> usize {
    let (l, k, c, h) = (cfg.adapted_layers, cfg.prompt_len, cfg.dim, cfg.n_heads);
    let base = l * k * c + l * h;
    if multimodal {
        base + ProjectionNet::<f32>::default_param_count(cfg.dim)
    } else {
        base
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_init_gates_are_exact_zero() {
        let cfg = ModelConfig::toy();
        let a = AdapterState::<f32>::init(&cfg, InitMode::ZeroInit, 1).unwrap();
        assert!(a.gates.data().iter().all(|g| g.to_bits() == 0));
        assert_eq!(a.prompts.len(), 4);
        assert_eq!(a.layer_offset, 2);
        let b = AdapterState::<f32>::init(&cfg, InitMode::ZeroInit, 1).unwrap();
        assert_eq!(a, b);
        let r = AdapterState::<f32>::init(&cfg, InitMode::RandInit, 1).unwrap();
        assert!(r.gates.data().iter().all(|&g| g == 1.0));
        assert!(!r.trainable_mask().contains("adapter.gates"));
        assert!(a.trainable_mask().contains("adapter.gates"));
    }

    #[test]
    fn empty_prompts_when_k_is_zero() {
        let cfg = ModelConfig {
            prompt_len: 0,
            ..ModelConfig::toy()
        };
        let a = AdapterState::<f32>::init(&cfg, InitMode::ZeroInit, 0).unwrap();
        assert!(a.prompts.iter().all(|p| p.shape() == [0, 64]));
    }

    #[test]
    fn prepend_shapes() {
        let p = Tensor::<f64>::full(&[5, 3], 1.0);
        let t = Tensor::<f64>::full(&[7, 3], 2.0);
        let pt = prepend_prompts(&p, &t).unwrap();
        assert_eq!(pt.shape(), &[12, 3]);
        assert_eq!(&pt.data()[15..], t.data());
        let none = Tensor::<f64>::zeros(&[0, 3]);
        assert_eq!(prepend_prompts(&p, &none).unwrap(), p);
        assert!(prepend_prompts(&p, &Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn split_and_gate_examples() {
        assert_eq!(split_and_gate(&[0.0, 0.0, 0.0, 0.0], 2, 1.0).unwrap(), vec![0.5; 4]);
        let z = split_and_gate(&[3.0, -1.0, 0.0, 0.0], 2, 0.0).unwrap();
        assert_eq!(z, vec![0.0, 0.0, 0.5, 0.5]);
        let s = split_and_gate(&[1.0f64, 2.0, 0.0, 1.0], 2, 0.5).unwrap();
        let p1 = 1.0 / (1.0 + 1f64.exp());
        let w1 = 1.0 / (1.0 + 1f64.exp());
        let want = [0.5 * p1, 0.5 * (1.0 - p1), w1, 1.0 - w1];
        for (a, b) in s.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((s.iter().sum::<f64>() - 1.5).abs() < 1e-12);
        assert!(split_and_gate(&[0.0], 2, 1.0).is_err());
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(trainable_parameter_count(&ModelConfig::llama_7b(), false), 1_229_760);
        assert_eq!(trainable_parameter_count(&ModelConfig::toy(), false), 1_296);
    }
}
