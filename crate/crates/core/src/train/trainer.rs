//! The masked fine-tuning loop and its objectives.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterState, AdapterVars, InitMode};
use crate::data::{exact_match_accuracy, Dataset, Sample, DEFAULT_FEATURE_NOISE};
use crate::error::{Error, Result};
use crate::generation::{respond, DecodeConfig};
use crate::model::forward::Bound;
use crate::model::{BaseVars, BaseWeights, ClassHead, ClassHeadVars, ModelConfig, Session};
use crate::multimodal::{aggregate_features, ProjectionVars, VisualFeatureSet};
use crate::params::{Parameters, TrainableMask};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

use super::metrics::{MetricsLog, StepRecord};
use super::optim::AdamW;
use super::schedule::lr_schedule;

/// Target id meaning "no loss at this position".
pub const IGNORE: usize = usize::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub init_mode: InitMode,
    /// Replaces the model's adapted-layer count `L`.
    pub layers_override: Option<usize>,
    /// Evaluate every this many steps and at the last step; 0 disables.
    pub eval_every: usize,
    /// Caps the step count implied by `epochs`.
    pub max_steps: Option<usize>,
    /// Caps the validation samples scored per evaluation.
    pub eval_samples: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            epochs: 10,
            warmup_epochs: 1,
            batch_size: 16,
            peak_lr: 1e-2,
            weight_decay: 0.02,
            seed: 0,
            init_mode: InitMode::ZeroInit,
            layers_override: None,
            eval_every: 0,
            max_steps: None,
            eval_samples: None,
        }
    }

    /// The full-scale instruction-tuning settings.
    pub fn full_scale() -> Self {
        Self {
            epochs: 5,
            warmup_epochs: 2,
            batch_size: 64,
            peak_lr: 0.009,
            weight_decay: 0.02,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.peak_lr > 0.0) || self.batch_size == 0 || self.weight_decay < 0.0 {
            return Err(Error::Config("peak_lr and batch_size must be positive".into()));
        }
        Ok(())
    }

    /// `(total, warmup)` steps for a training set of `n` samples.
    pub fn steps(&self, n: usize) -> (usize, usize) {
        if n == 0 || self.epochs == 0 {
            return (0, 0);
        }
        let per_epoch = n.div_ceil(self.batch_size);
        let full = self.epochs * per_epoch;
        let total = self.max_steps.map_or(full, |m| m.min(full));
        let warmup = (total as f64 * self.warmup_epochs as f64 / self.epochs as f64).round() as usize;
        (total, warmup)
    }

    /// Model config with `layers_override` applied.
    pub fn model_config(&self, cfg: &ModelConfig) -> Result<ModelConfig> {
        let mut c = cfg.clone();
        if let Some(l) = self.layers_override {
            c.adapted_layers = l;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Loss of one training item: the loss node and every bound parameter.
pub type ItemLoss = (Var, Vec<(String, Var)>);

/// Mini-batch AdamW over `params`, updating exactly the names in `mask`.
///
/// `loss` records item `i` on a fresh tape; `eval` runs at evaluation steps.
pub fn optimize<T, P, F, E>(
    params: &mut P,
    mask: &TrainableMask,
    n_items: usize,
    tcfg: &TrainConfig,
    mut loss: F,
    mut eval: E,
) -> Result<(MetricsLog, AdamW<T>)>
where
    T: Real,
    P: Parameters<T>,
    F: FnMut(&P, &mut Tape<T>, usize) -> Result<ItemLoss>,
    E: FnMut(&P) -> Result<(f64, f64)>,
{
    tcfg.validate()?;
    let (total, warmup) = tcfg.steps(n_items);
    let mut opt = AdamW::new(params, mask, tcfg.weight_decay);
    let mut log = MetricsLog::new();
    let mut rng = Rng::new(tcfg.seed).split(0x0BDE);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0;
    let batch = tcfg.batch_size.min(n_items.max(1));
    for step in 1..=total {
        let mut items = Vec::with_capacity(batch);
        while items.len() < batch {
            if cursor == order.len() {
                if !order.is_empty() {
                    epoch += 1;
                }
                order = (0..n_items).collect();
                rng.shuffle(&mut order);
                cursor = 0;
            }
            items.push(order[cursor]);
            cursor += 1;
        }
        let mut acc: BTreeMap<String, Vec<T>> = BTreeMap::new();
        let mut loss_sum = 0.0;
        for &i in &items {
            let mut tape = Tape::new();
            let (l, vars) = loss(params, &mut tape, i)?;
            loss_sum += tape.value(l).data()[0].f64();
            let mut grads = tape.backward(l)?;
            for (name, v) in vars {
                if !mask.contains(&name) {
                    continue;
                }
                let g = grads.take(v);
                match acc.get_mut(&name) {
                    Some(a) => a.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => {
                        acc.insert(name, g);
                    }
                }
            }
        }
        let inv = T::one() / T::of(items.len() as f64);
        acc.values_mut().for_each(|g| g.iter_mut().for_each(|x| *x *= inv));
        let train_loss = loss_sum / items.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::NumericAbort {
                step,
                param: "loss".into(),
            });
        }
        let lr = lr_schedule(step, total, warmup, tcfg.peak_lr);
        opt.step(params, &acc, lr)?;
        let evaluate = tcfg.eval_every > 0 && (step % tcfg.eval_every == 0 || step == total);
        let (val_loss, val_acc) = if evaluate {
            let (l, a) = eval(params)?;
            (Some(l), Some(a))
        } else {
            (None, None)
        };
        log.push(StepRecord {
            step,
            epoch,
            lr,
            train_loss,
            val_loss,
            val_acc,
        })?;
    }
    Ok((log, opt))
}

/// Next-token targets for `ids` with positions before `start` ignored.
pub fn shifted_targets(ids: &[usize], start: usize) -> (Vec<usize>, Vec<usize>) {
    let inputs = ids[..ids.len() - 1].to_vec();
    let targets = (1..ids.len()).map(|j| if j >= start { ids[j] } else { IGNORE }).collect();
    (inputs, targets)
}

/// Synthetic features of a labelled sample.
pub fn sample_features(sample: &Sample, widths: &[usize]) -> Option<VisualFeatureSet> {
    let noise = sample.feature_noise.unwrap_or(DEFAULT_FEATURE_NOISE);
    Some(VisualFeatureSet::synthetic(sample.label?, sample.feature_seed?, widths, noise))
}

/// Response-token cross-entropy of one sample with the base frozen.
///
/// Features reach the model only when the adapter carries a projection.
pub fn sample_loss<T: Real>(
    cfg: &ModelConfig,
    base: &BaseWeights<T>,
    adapter: &AdapterState<T>,
    sample: &Sample,
    tape: &mut Tape<T>,
) -> Result<ItemLoss> {
    let bb = base.bind(tape, &TrainableMask::new());
    let ab = adapter.bind(tape, &adapter.trainable_mask());
    let base_vars = BaseVars::from_bound(&bb, cfg.n_layers);
    let ad = AdapterVars::from_bound(&ab, adapter);
    let visual = match &adapter.projection {
        Some(p) => match sample_features(sample, &feature_widths(p.in_width(), cfg.dim)) {
            Some(fs) => Some(ProjectionVars::from_bound(&ab, p.stages.len()).aggregate(tape, &fs)?),
            None => None,
        },
        None => None,
    };
    let bound = Bound {
        cfg,
        base: &base_vars,
        adapter: Some(&ad),
        visual,
    };
    let (ids, start) = sample.tokens();
    let (inputs, targets) = shifted_targets(&ids, start);
    let logits = bound.logits(tape, &inputs)?;
    let l = tape.cross_entropy(logits, &targets, IGNORE)?;
    Ok((l, ab))
}

/// Widths of the synthetic scales feeding a projection of input width `total`.
pub fn feature_widths(total: usize, dim: usize) -> Vec<usize> {
    let default = VisualFeatureSet::default_widths(dim);
    if default.iter().sum::<usize>() == total {
        default
    } else {
        vec![total]
    }
}

/// Projected visual row of a sample, when the adapter can use it.
pub fn sample_visual<T: Real>(cfg: &ModelConfig, adapter: &AdapterState<T>, sample: &Sample) -> Result<Option<Tensor<T>>> {
    let Some(p) = &adapter.projection else { return Ok(None) };
    match sample_features(sample, &feature_widths(p.in_width(), cfg.dim)) {
        Some(fs) => Ok(Some(aggregate_features(&fs, p)?)),
        None => Ok(None),
    }
}

/// Mean cross-entropy between logits rows and targets, skipping [`IGNORE`].
pub fn masked_nll<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (row, &t) in logits.data().chunks_exact(logits.cols()).zip(targets) {
        if t == IGNORE {
            continue;
        }
        let max = row.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|x| (x.f64() - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[t].f64();
        count += 1;
    }
    total / count.max(1) as f64
}

/// Mean response loss and greedy exact-match accuracy over `samples`.
pub fn evaluate<T: Real>(
    cfg: &ModelConfig,
    base: &BaseWeights<T>,
    adapter: &AdapterState<T>,
    samples: &[Sample],
) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut outputs = Vec::with_capacity(samples.len());
    for s in samples {
        let visual = sample_visual(cfg, adapter, s)?;
        let (ids, start) = s.tokens();
        let (inputs, targets) = shifted_targets(&ids, start);
        let logits = Session::new(cfg, base, Some(adapter), visual.as_ref())?.feed(&inputs)?;
        loss += masked_nll(&logits, &targets);
        let decode = DecodeConfig::greedy(s.response.chars().count() + 1);
        outputs.push(respond(
            cfg,
            base,
            Some(adapter),
            visual.as_ref(),
            &s.instruction,
            s.input.as_deref(),
            &decode,
        )?);
    }
    let refs: Vec<&str> = samples.iter().map(|s| s.response.as_str()).collect();
    let acc = exact_match_accuracy(&outputs, &refs)?;
    Ok((loss / samples.len().max(1) as f64, acc))
}

/// Result of an adapter fine-tuning run.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Real = f32> {
    pub adapter: AdapterState<T>,
    pub log: MetricsLog,
    pub optimizer: AdamW<T>,
}

/// Fine-tune `adapter` on `data.train` with the base frozen.
pub fn train<T: Real>(
    cfg: &ModelConfig,
    base: &BaseWeights<T>,
    adapter: AdapterState<T>,
    data: &Dataset,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    adapter.check_compatible(cfg)?;
    let mut adapter = adapter;
    let mask = adapter.trainable_mask();
    let val = &data.val[..tcfg.eval_samples.map_or(data.val.len(), |n| n.min(data.val.len()))];
    let (log, optimizer) = optimize(
        &mut adapter,
        &mask,
        data.train.len(),
        tcfg,
        |a, tape, i| sample_loss(cfg, base, a, &data.train[i], tape),
        |a| evaluate(cfg, base, a, val),
    )?;
    Ok(TrainOutcome {
        adapter,
        log,
        optimizer,
    })
}

/// Adapter plus a class head, trained together for encoder classification.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderAdapter<T: Real = f32> {
    pub adapter: AdapterState<T>,
    pub head: ClassHead<T>,
}

impl<T: Real> Parameters<T> for EncoderAdapter<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = self.adapter.named();
        v.extend(self.head.named());
        v
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = self.adapter.named_mut();
        v.extend(self.head.named_mut());
        v
    }
}

/// Class cross-entropy of one labelled sequence.
pub fn classify_loss<T: Real>(
    cfg: &ModelConfig,
    base: &BaseWeights<T>,
    model: &EncoderAdapter<T>,
    ids: &[usize],
    class: usize,
    tape: &mut Tape<T>,
) -> Result<ItemLoss> {
    let bb = base.bind(tape, &TrainableMask::new());
    let bound_params = model.bind(tape, &TrainableMask::all(model));
    let base_vars = BaseVars::from_bound(&bb, cfg.n_layers);
    let ad = AdapterVars::from_bound(&bound_params, &model.adapter);
    let head = ClassHeadVars::from_bound(&bound_params);
    let bound = Bound {
        cfg,
        base: &base_vars,
        adapter: Some(&ad),
        visual: None,
    };
    let logits = bound.classify(tape, ids, &head)?;
    let l = tape.cross_entropy(logits, &[class], IGNORE)?;
    Ok((l, bound_params))
}

/// Fraction of `data` whose argmax class is correct.
pub fn classification_accuracy<T: Real>(
    cfg: &ModelConfig,
    base: &BaseWeights<T>,
    model: &EncoderAdapter<T>,
    data: &[(Vec<usize>, usize)],
) -> Result<f64> {
    let mut hits = 0;
    for (ids, class) in data {
        let logits = crate::model::encoder_classify(cfg, base, Some(&model.adapter), &model.head, ids)?;
        if crate::generation::argmax(logits.data()) == *class {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// Train prompts, gates and the class head of an encoder.
pub fn train_classifier<T: Real>(
    cfg: &ModelConfig,
    base: &BaseWeights<T>,
    model: EncoderAdapter<T>,
    train_set: &[(Vec<usize>, usize)],
    val_set: &[(Vec<usize>, usize)],
    tcfg: &TrainConfig,
) -> Result<(EncoderAdapter<T>, MetricsLog)> {
    model.adapter.check_compatible(cfg)?;
    let mut model = model;
    let mask = TrainableMask::all(&model);
    let (log, _) = optimize(
        &mut model,
        &mask,
        train_set.len(),
        tcfg,
        |m, tape, i| classify_loss(cfg, base, m, &train_set[i].0, train_set[i].1, tape),
        |m| Ok((0.0, classification_accuracy(cfg, base, m, val_set)?)),
    )?;
    Ok((model, log))
}

/// Next-token training of every base parameter on token sequences; each item
/// is `(ids, first target index)`.
pub fn pretrain<T: Real>(
    cfg: &ModelConfig,
    base: BaseWeights<T>,
    corpus: &[(Vec<usize>, usize)],
    tcfg: &TrainConfig,
) -> Result<(BaseWeights<T>, MetricsLog)> {
    let mut base = base;
    let mask = TrainableMask::all(&base);
    let (log, _) = optimize(
        &mut base,
        &mask,
        corpus.len(),
        tcfg,
        |b, tape, i| {
            let bound_params = b.bind(tape, &mask);
            let vars = BaseVars::from_bound(&bound_params, cfg.n_layers);
            let bound = Bound {
                cfg,
                base: &vars,
                adapter: None,
                visual: None,
            };
            let (ids, start) = &corpus[i];
            let (inputs, targets) = shifted_targets(ids, *start);
            let logits = bound.logits(tape, &inputs)?;
            Ok((tape.cross_entropy(logits, &targets, IGNORE)?, bound_params))
        },
        |_| Ok((f64::NAN, f64::NAN)),
    )?;
    Ok((base, log))
}
