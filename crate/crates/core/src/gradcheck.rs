//! Central finite-difference oracle for tape gradients.
//!
//! Checks always run at 64-bit precision. For each parameter the report holds
//! the largest relative error `|analytic − numeric| / max(|analytic|, |numeric|, floor)`
//! over the entries examined.

use std::fmt;

use crate::adapter::{AdapterState, AdapterVars, InitMode};
use crate::error::{Error, Result};
use crate::model::forward::Bound;
use crate::model::{AttentionMode, BaseVars, BaseWeights, ClassHead, ClassHeadVars, ModelConfig};
use crate::multimodal::{ProjectionNet, ProjectionVars, VisualFeatureSet};
use crate::params::{Parameters, TrainableMask};
use crate::rng::Rng;
use crate::tape::{AttnNorm, Tape, Var};
use crate::tensor::Tensor;
use crate::train::trainer::EncoderAdapter;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// Denominator floor so entries whose true gradient is ~0 are compared
    /// absolutely.
    pub floor: f64,
    /// Check at most this many entries per parameter (sampled without
    /// replacement); `None` checks all.
    pub max_entries: Option<usize>,
    pub seed: u64,
    /// Multiply tape gradients by this factor (negative control).
    pub fault: Option<f64>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-5,
            max_entries: None,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "  {:<32} entries={:<5} max_rel_err={:.3e} {}",
                p.name,
                p.entries,
                p.max_rel_err,
                if p.max_rel_err <= self.tol { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Compare tape gradients of `f` against central differences.
///
/// `f` receives a fresh tape and one leaf per entry of `params` (in order) and
/// must return a scalar. It is called once with gradient tracking and twice per
/// examined entry with constant leaves.
pub fn grad_check<F>(f: F, params: &[(String, Tensor<f64>)], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = match cfg.fault {
        Some(k) => Tape::new().with_fault(k),
        None => Tape::new(),
    };
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let l0 = tape.value(loss).data()[0];
    if !l0.is_finite() {
        return Err(Error::NonFinite("grad_check objective"));
    }
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::<f64>::new();
        let vs: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let out = f(&mut t, &vs)?;
        let y = t.value(out).data()[0];
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::NonFinite("grad_check objective"))
        }
    };

    let mut rng = Rng::new(cfg.seed);
    let mut values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport {
        tol: cfg.tol,
        params: Vec::with_capacity(params.len()),
    };
    for (pi, (name, _)) in params.iter().enumerate() {
        let analytic = grads.wrt(vars[pi]);
        let n = values[pi].len();
        let mut idx: Vec<usize> = (0..n).collect();
        if let Some(limit) = cfg.max_entries {
            if limit < n {
                rng.shuffle(&mut idx);
                idx.truncate(limit);
                idx.sort_unstable();
            }
        }
        let mut worst = 0.0f64;
        for &j in &idx {
            let orig = values[pi].data()[j];
            values[pi].data_mut()[j] = orig + cfg.h;
            let fp = eval(&values)?;
            values[pi].data_mut()[j] = orig - cfg.h;
            let fm = eval(&values)?;
            values[pi].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(cfg.floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
        report.params.push(ParamCheck {
            name: name.clone(),
            entries: idx.len(),
            max_rel_err: worst,
        });
    }
    Ok(report)
}

/// Reduce any matrix to a scalar through a fixed random projection and a
/// cross-entropy against fixed targets, so every output entry matters.
pub fn scalarize(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let (rows, cols) = tape.value(y).matrix_dims("scalarize")?;
    let mut rng = Rng::new(seed);
    let w = tape.constant(Tensor::randn(&[cols, 3], 1.0, &mut rng));
    let z = tape.matmul(y, w)?;
    let targets: Vec<usize> = (0..rows).map(|_| rng.below(3)).collect();
    tape.cross_entropy(z, &targets, usize::MAX)
}

type Objective = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn rand_dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Every tape primitive on randomized shapes up to 8×8.
pub fn primitive_suite(seed: u64, fault: Option<f64>) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = Rng::new(seed);
    let cfg = GradCheckConfig {
        fault,
        seed,
        ..GradCheckConfig::default()
    };
    let mut out = Vec::new();
    let randm = |rng: &mut Rng, r: usize, c: usize| Tensor::<f64>::randn(&[r, c], 1.0, rng);

    let (m, k, n) = (rand_dim(&mut rng, 1, 8), rand_dim(&mut rng, 1, 8), rand_dim(&mut rng, 1, 8));
    let mut cases: Vec<(&str, Vec<(String, Tensor<f64>)>, Objective)> = Vec::new();
    cases.push((
        "matmul",
        vec![("a".into(), randm(&mut rng, m, k)), ("b".into(), randm(&mut rng, k, n))],
        Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            scalarize(t, y, 11)
        }),
    ));
    cases.push((
        "matmul_nt",
        vec![("a".into(), randm(&mut rng, m, k)), ("b".into(), randm(&mut rng, n, k))],
        Box::new(|t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            scalarize(t, y, 12)
        }),
    ));
    cases.push((
        "add_mul_scale",
        vec![("a".into(), randm(&mut rng, m, n)), ("b".into(), randm(&mut rng, m, n))],
        Box::new(|t, v| {
            let s = t.add(v[0], v[1])?;
            let p = t.mul(s, v[1])?;
            let y = t.scale(p, 0.7);
            scalarize(t, y, 13)
        }),
    ));
    cases.push((
        "silu",
        vec![("x".into(), randm(&mut rng, m, n))],
        Box::new(|t, v| {
            let y = t.silu(v[0]);
            scalarize(t, y, 14)
        }),
    ));
    let (r1, r2) = (rand_dim(&mut rng, 1, 4), rand_dim(&mut rng, 1, 4));
    cases.push((
        "concat_slice_rows",
        vec![("p".into(), randm(&mut rng, r1, n)), ("w".into(), randm(&mut rng, r2, n))],
        Box::new(move |t, v| {
            let c = t.concat_rows(&[v[0], v[1]])?;
            let s = t.slice_rows(c, r1.saturating_sub(1), r2.min(r1 + r2 - r1.saturating_sub(1)))?;
            let y = t.concat_rows(&[c, s])?;
            scalarize(t, y, 15)
        }),
    ));
    let (c1, c2) = (rand_dim(&mut rng, 1, 4), rand_dim(&mut rng, 1, 4));
    cases.push((
        "concat_slice_cols",
        vec![("a".into(), randm(&mut rng, m, c1)), ("b".into(), randm(&mut rng, m, c2))],
        Box::new(move |t, v| {
            let c = t.concat_cols(&[v[0], v[1]])?;
            let s = t.slice_cols(c, c1 / 2, c2)?;
            let y = t.concat_cols(&[c, s])?;
            scalarize(t, y, 16)
        }),
    ));
    cases.push((
        "broadcast_add_row",
        vec![("x".into(), randm(&mut rng, m, n)), ("row".into(), randm(&mut rng, 1, n))],
        Box::new(|t, v| {
            let y = t.broadcast_add_row(v[0], v[1])?;
            scalarize(t, y, 17)
        }),
    ));
    cases.push((
        "softmax_rows",
        vec![("x".into(), randm(&mut rng, m, n))],
        Box::new(|t, v| {
            let y = t.softmax_rows(v[0])?;
            scalarize(t, y, 18)
        }),
    ));
    let mut w = randm(&mut rng, 1, n);
    w.data_mut().iter_mut().for_each(|x| *x += 1.5);
    cases.push((
        "rmsnorm",
        vec![("x".into(), randm(&mut rng, m, n)), ("w".into(), w.reshape(&[n])?)],
        Box::new(|t, v| {
            let y = t.rmsnorm(v[0], v[1], 1e-5)?;
            scalarize(t, y, 19)
        }),
    ));
    let hd = 2 * rand_dim(&mut rng, 1, 2);
    let heads = rand_dim(&mut rng, 1, 2);
    let positions: Vec<usize> = (0..m).map(|i| i * 3 + 1).collect();
    cases.push((
        "rope",
        vec![("x".into(), randm(&mut rng, m, hd * heads))],
        Box::new(move |t, v| {
            let y = t.rope(v[0], &positions, hd)?;
            scalarize(t, y, 20)
        }),
    ));
    let ids: Vec<usize> = (0..m).map(|_| rng.below(5)).collect();
    cases.push((
        "gather_rows",
        vec![("table".into(), randm(&mut rng, 5, n))],
        Box::new(move |t, v| {
            let y = t.gather_rows(v[0], &ids)?;
            scalarize(t, y, 21)
        }),
    ));
    cases.push((
        "mean_rows",
        vec![("x".into(), randm(&mut rng, m, n))],
        Box::new(|t, v| {
            let y = t.mean_rows(v[0])?;
            scalarize(t, y, 22)
        }),
    ));
    let targets: Vec<usize> = (0..m).map(|i| if i % 3 == 2 { 99 } else { i % n }).collect();
    cases.push((
        "cross_entropy",
        vec![("logits".into(), randm(&mut rng, m, n))],
        Box::new(move |t, v| {
            let mut tg = targets.clone();
            if tg.iter().all(|&x| x == 99) {
                tg[0] = 0;
            }
            t.cross_entropy(v[0], &tg, 99)
        }),
    ));
    let kp = rand_dim(&mut rng, 1, 3);
    let words = rand_dim(&mut rng, 1, 5);
    for (label, causal, joint) in [
        ("prefix_gated_causal", true, false),
        ("prefix_gated_full", false, false),
        ("prefix_joint_causal", true, true),
    ] {
        let mut gates = randm(&mut rng, 1, 3);
        gates.data_mut()[1] = 0.8;
        cases.push((
            label,
            vec![("scores".into(), randm(&mut rng, words, kp + words)), ("gates".into(), gates)],
            Box::new(move |t, v| {
                let norm = if joint {
                    AttnNorm::Joint
                } else {
                    AttnNorm::Gated { gates: v[1], index: 1 }
                };
                let y = t.prefix_attention(v[0], kp, causal, norm)?;
                let y = if joint {
                    // keep the gate leaf on the path so the report covers it
                    let g = t.slice_cols(v[1], 0, 1)?;
                    let g = t.scale(g, 0.0);
                    let gr = t.concat_cols(&vec![g; kp + words])?;
                    t.broadcast_add_row(y, gr)?
                } else {
                    y
                };
                scalarize(t, y, 23)
            }),
        ));
    }

    for (name, params, f) in cases {
        out.push((name.to_string(), grad_check(f, &params, &cfg)?));
    }
    Ok(out)
}

/// Geometry of the model-level checks: 2 layers, both adapted.
pub fn tiny_config(mode: AttentionMode) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        dim: 8,
        n_heads: 2,
        n_layers: 2,
        adapted_layers: 2,
        prompt_len: 3,
        max_seq: 16,
        ffn_hidden: 12,
        mode,
        rmsnorm_eps: 1e-5,
    }
}

/// Adapter with nonzero gates so every prompt gradient is live.
fn live_adapter(cfg: &ModelConfig, rng: &mut Rng) -> Result<AdapterState<f64>> {
    let mut a = AdapterState::<f64>::init(cfg, InitMode::ZeroInit, rng.next_u64())?;
    a.prompts = a.prompts.iter().map(|p| Tensor::randn(p.shape(), 0.7, rng)).collect();
    a.gates = Tensor::randn(a.gates.shape(), 0.7, rng);
    Ok(a)
}

fn constants(tape: &mut Tape<f64>, p: &dyn Parameters<f64>) -> Vec<(String, Var)> {
    p.bind(tape, &TrainableMask::new())
}

fn named_params(p: &dyn Parameters<f64>) -> Vec<(String, Tensor<f64>)> {
    p.named().into_iter().map(|(n, t)| (n, t.clone())).collect()
}

fn relabel(names: &[(String, Tensor<f64>)], vars: &[Var]) -> Vec<(String, Var)> {
    names.iter().map(|(n, _)| n.clone()).zip(vars.iter().copied()).collect()
}

/// Tape gradients of whole-model losses with respect to adapter parameters.
///
/// Groups: a single adapted layer, a 2-layer decoder and a 2-layer encoder
/// with its class head.
pub fn adapter_suite(seed: u64, fault: Option<f64>) -> Result<Vec<(String, GradCheckReport)>> {
    let check = GradCheckConfig {
        fault,
        seed,
        ..GradCheckConfig::default()
    };
    let mut rng = Rng::new(seed).split(0xAD);
    let mut out = Vec::new();

    for (label, layers) in [("adapted_attention_layer", 1usize), ("adapter_decoder", 2)] {
        let cfg = ModelConfig {
            n_layers: layers,
            adapted_layers: layers,
            ..tiny_config(AttentionMode::CausalDecoder)
        };
        let base = BaseWeights::<f64>::init(&cfg, rng.next_u64())?;
        let adapter = live_adapter(&cfg, &mut rng)?;
        let ids: Vec<usize> = (0..6).map(|_| rng.below(cfg.vocab_size)).collect();
        let targets: Vec<usize> = (0..6)
            .map(|i| if i < 2 { usize::MAX } else { rng.below(cfg.vocab_size) })
            .collect();
        let params = named_params(&adapter);
        let names = params.clone();
        let f = move |t: &mut Tape<f64>, v: &[Var]| {
            let bb = constants(t, &base);
            let base_vars = BaseVars::from_bound(&bb, cfg.n_layers);
            let ad = AdapterVars::from_bound(&relabel(&names, v), &adapter);
            let bound = Bound {
                cfg: &cfg,
                base: &base_vars,
                adapter: Some(&ad),
                visual: None,
            };
            let logits = bound.logits(t, &ids)?;
            t.cross_entropy(logits, &targets, usize::MAX)
        };
        out.push((label.to_string(), grad_check(f, &params, &check)?));
    }

    let cfg = tiny_config(AttentionMode::BidirectionalEncoder);
    let base = BaseWeights::<f64>::init(&cfg, rng.next_u64())?;
    let model = EncoderAdapter {
        adapter: live_adapter(&cfg, &mut rng)?,
        head: ClassHead::init(cfg.dim, 3, rng.next_u64()),
    };
    let ids: Vec<usize> = (0..5).map(|_| rng.below(cfg.vocab_size)).collect();
    let params = named_params(&model);
    let names = params.clone();
    let f = move |t: &mut Tape<f64>, v: &[Var]| {
        let bb = constants(t, &base);
        let base_vars = BaseVars::from_bound(&bb, cfg.n_layers);
        let bound_vars = relabel(&names, v);
        let ad = AdapterVars::from_bound(&bound_vars, &model.adapter);
        let head = ClassHeadVars::from_bound(&bound_vars);
        let bound = Bound {
            cfg: &cfg,
            base: &base_vars,
            adapter: Some(&ad),
            visual: None,
        };
        let logits = bound.classify(t, &ids, &head)?;
        t.cross_entropy(logits, &[1], usize::MAX)
    };
    out.push(("adapter_encoder".to_string(), grad_check(f, &params, &check)?));
    Ok(out)
}

/// The training loss end to end: features through the projection net into
/// fused prompts, response-masked cross-entropy; plus every base weight under
/// the pre-training loss. Large tensors are sampled.
pub fn full_suite(seed: u64, fault: Option<f64>) -> Result<Vec<(String, GradCheckReport)>> {
    let check = GradCheckConfig {
        fault,
        seed,
        max_entries: Some(12),
        ..GradCheckConfig::default()
    };
    let mut rng = Rng::new(seed).split(0xF0);
    let cfg = tiny_config(AttentionMode::CausalDecoder);
    let base = BaseWeights::<f64>::init(&cfg, rng.next_u64())?;
    let widths = VisualFeatureSet::default_widths(cfg.dim);
    let mut proj = ProjectionNet::<f64>::default_for(cfg.dim, rng.next_u64());
    for (_, b) in &mut proj.stages {
        *b = Tensor::randn(b.shape(), 0.3, &mut rng);
    }
    let adapter = live_adapter(&cfg, &mut rng)?.with_projection(proj);
    let fs = VisualFeatureSet::synthetic(rng.below(4), rng.next_u64(), &widths, 0.5);
    let ids: Vec<usize> = (0..7).map(|_| rng.below(cfg.vocab_size)).collect();
    let targets: Vec<usize> = (0..7)
        .map(|i| if i < 3 { usize::MAX } else { rng.below(cfg.vocab_size) })
        .collect();
    let mut out = Vec::new();

    let params = named_params(&adapter);
    let names = params.clone();
    let (cfg_c, base_c, ids_c, targets_c, adapter_c) =
        (cfg.clone(), base.clone(), ids.clone(), targets.clone(), adapter.clone());
    let f = move |t: &mut Tape<f64>, v: &[Var]| {
        let bb = constants(t, &base_c);
        let base_vars = BaseVars::from_bound(&bb, cfg_c.n_layers);
        let bound_vars = relabel(&names, v);
        let ad = AdapterVars::from_bound(&bound_vars, &adapter_c);
        let pv = ProjectionVars::from_bound(&bound_vars, 2);
        let visual = Some(pv.aggregate(t, &fs)?);
        let bound = Bound {
            cfg: &cfg_c,
            base: &base_vars,
            adapter: Some(&ad),
            visual,
        };
        let logits = bound.logits(t, &ids_c)?;
        t.cross_entropy(logits, &targets_c, usize::MAX)
    };
    out.push(("full_multimodal_loss".to_string(), grad_check(f, &params, &check)?));

    let params = named_params(&base);
    let names = params.clone();
    let check_base = GradCheckConfig {
        max_entries: Some(4),
        ..check
    };
    let f = move |t: &mut Tape<f64>, v: &[Var]| {
        let base_vars = BaseVars::from_bound(&relabel(&names, v), cfg.n_layers);
        let bound = Bound {
            cfg: &cfg,
            base: &base_vars,
            adapter: None,
            visual: None,
        };
        let logits = bound.logits(t, &ids)?;
        t.cross_entropy(logits, &targets, usize::MAX)
    };
    out.push(("base_pretraining_loss".to_string(), grad_check(f, &params, &check_base)?));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let params = vec![("x".to_string(), Tensor::<f64>::scalar(3.0))];
        let f = |t: &mut Tape<f64>, v: &[Var]| t.mul(v[0], v[0]);
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.backward(y).unwrap().wrt(x).data(), &[6.0]);
        let rep = grad_check(f, &params, &GradCheckConfig::default()).unwrap();
        assert!(rep.passed());
        assert!(rep.max_rel_err() < 1e-8);
    }

    #[test]
    fn doubled_backward_fails() {
        let params = vec![("x".to_string(), Tensor::<f64>::scalar(3.0))];
        let f = |t: &mut Tape<f64>, v: &[Var]| t.mul(v[0], v[0]);
        let cfg = GradCheckConfig {
            fault: Some(2.0),
            ..Default::default()
        };
        let rep = grad_check(f, &params, &cfg).unwrap();
        assert!(!rep.passed());
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let params = vec![("x".to_string(), Tensor::<f64>::scalar(f64::INFINITY))];
        let f = |t: &mut Tape<f64>, v: &[Var]| Ok(t.scale(v[0], 1.0));
        assert!(matches!(
            grad_check(f, &params, &GradCheckConfig::default()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn primitive_suite_passes_over_several_seeds() {
        for seed in 0..6 {
            for (name, rep) in primitive_suite(seed, None).unwrap() {
                assert!(rep.passed(), "seed {seed} {name}\n{rep}");
            }
        }
    }

    #[test]
    fn model_suites_pass_and_detect_faults() {
        for seed in 0..2 {
            for (name, rep) in adapter_suite(seed, None).unwrap().into_iter().chain(full_suite(seed, None).unwrap()) {
                assert!(rep.passed(), "seed {seed} {name}\n{rep}");
            }
        }
        assert!(adapter_suite(0, Some(2.0)).unwrap().iter().all(|(_, r)| !r.passed()));
        assert!(full_suite(0, Some(2.0)).unwrap().iter().all(|(_, r)| !r.passed()));
    }

    #[test]
    fn primitive_suite_detects_fault() {
        let reps = primitive_suite(1, Some(2.0)).unwrap();
        assert!(reps.iter().all(|(_, r)| !r.passed()));
    }
}
