//! Differentiable forward pass recorded on a [`Tape`].

use crate::adapter::AdapterVars;
use crate::error::{Error, Result};
use crate::tape::{AttnNorm, Tape, Var};
use crate::tensor::Real;

use super::config::ModelConfig;
use super::weights::{BaseVars, ClassHeadVars, LayerVars};

/// Everything a forward pass reads besides the token ids.
#[derive(Clone, Copy, Debug)]
pub struct Bound<'a> {
    pub cfg: &'a ModelConfig,
    pub base: &'a BaseVars,
    pub adapter: Option<&'a AdapterVars>,
    /// Projected visual row `I_p` `[1×C]`, fused into every adapted prompt.
    pub visual: Option<Var>,
}

impl Bound<'_> {
    /// Final-normed hidden states `[M×C]`.
    pub fn hidden<T: Real>(&self, tape: &mut Tape<T>, ids: &[usize]) -> Result<Var> {
        let cfg = self.cfg;
        if ids.len() > cfg.max_seq {
            return Err(Error::Capacity {
                needed: ids.len(),
                max: cfg.max_seq,
            });
        }
        let mut x = tape.gather_rows(self.base.tok_embed, ids)?;
        if let Some(pos) = self.base.pos_embed {
            let positions: Vec<usize> = (0..ids.len()).collect();
            let p = tape.gather_rows(pos, &positions)?;
            x = tape.add(x, p)?;
        }
        for (i, layer) in self.base.layers.iter().enumerate() {
            x = self.block(tape, x, i, layer)?;
        }
        tape.rmsnorm(x, self.base.final_norm, T::of(cfg.rmsnorm_eps))
    }

    /// Next-token logits `[M×V]`.
    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, ids: &[usize]) -> Result<Var> {
        let h = self.hidden(tape, ids)?;
        tape.matmul(h, self.base.head)
    }

    /// Class logits `[1×n]` from mean-pooled encoder states.
    pub fn classify<T: Real>(&self, tape: &mut Tape<T>, ids: &[usize], head: &ClassHeadVars) -> Result<Var> {
        if self.cfg.is_causal() {
            return Err(Error::Config("classification needs bidirectional_encoder mode".into()));
        }
        let h = self.hidden(tape, ids)?;
        let pooled = tape.mean_rows(h)?;
        let logits = tape.matmul(pooled, head.weight)?;
        tape.broadcast_add_row(logits, head.bias)
    }

    fn block<T: Real>(&self, tape: &mut Tape<T>, x: Var, index: usize, w: &LayerVars) -> Result<Var> {
        let eps = T::of(self.cfg.rmsnorm_eps);
        let h = tape.rmsnorm(x, w.attn_norm, eps)?;
        let attn = self.attention(tape, h, index, w)?;
        let x = tape.add(x, attn)?;
        let h = tape.rmsnorm(x, w.ffn_norm, eps)?;
        let a = tape.matmul(h, w.w1)?;
        let a = tape.silu(a);
        let b = tape.matmul(h, w.w3)?;
        let ab = tape.mul(a, b)?;
        let f = tape.matmul(ab, w.w2)?;
        tape.add(x, f)
    }

    fn attention<T: Real>(&self, tape: &mut Tape<T>, h: Var, index: usize, w: &LayerVars) -> Result<Var> {
        let cfg = self.cfg;
        let (heads, hd) = (cfg.n_heads, cfg.head_dim());
        let m = tape.shape(h)[0];
        let mut q = tape.matmul(h, w.wq)?;
        let mut k = tape.matmul(h, w.wk)?;
        let v = tape.matmul(h, w.wv)?;
        if cfg.is_causal() {
            let positions: Vec<usize> = (0..m).collect();
            q = tape.rope(q, &positions, hd)?;
            k = tape.rope(k, &positions, hd)?;
        }
        let slot = self.adapter.and_then(|a| a.slot(index).map(|s| (a, s)));
        let (k, v, prompt_len) = match slot {
            Some((a, s)) => {
                let mut p = a.prompts[s];
                if let Some(vis) = self.visual {
                    p = tape.broadcast_add_row(p, vis)?;
                }
                let pk = tape.matmul(p, w.wk)?;
                let pv = tape.matmul(p, w.wv)?;
                let k_len = tape.shape(p)[0];
                (tape.concat_rows(&[pk, k])?, tape.concat_rows(&[pv, v])?, k_len)
            }
            None => (k, v, 0),
        };
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = tape.slice_cols(q, head * hd, hd)?;
            let kh = tape.slice_cols(k, head * hd, hd)?;
            let vh = tape.slice_cols(v, head * hd, hd)?;
            let s = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(s, scale);
            let norm = match slot {
                Some((a, s)) => a.norm(s, head, heads),
                None => AttnNorm::Joint,
            };
            let p = tape.prefix_attention(s, prompt_len, cfg.is_causal(), norm)?;
            outs.push(tape.matmul(p, vh)?);
        }
        let o = tape.concat_cols(&outs)?;
        tape.matmul(o, w.wo)
    }
}
