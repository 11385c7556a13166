//! Toy-scale ablations: zero-init against rand-init attention, the number of
//! adapted layers, and robustness to over-training.

use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterState, InitMode};
use crate::data::{make_dataset, Dataset, TaskKind, ToyTask};
use crate::error::{Error, Result};
use crate::model::{BaseWeights, ModelConfig};
use crate::multimodal::ProjectionNet;

use super::metrics::MetricsLog;
use super::trainer::{train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSpec {
    InitModeCompare,
    LayersSweep,
    OverfitProbe,
}

impl AblationSpec {
    pub const ALL: [AblationSpec; 3] = [Self::InitModeCompare, Self::LayersSweep, Self::OverfitProbe];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::InitModeCompare => "init_mode_compare",
            Self::LayersSweep => "layers_sweep",
            Self::OverfitProbe => "overfit_probe",
        }
    }
}

impl fmt::Display for AblationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown ablation `{s}`; expected init_mode_compare, layers_sweep or overfit_probe")))
    }
}

/// Validation samples held out by the overfit probe.
pub const OVERFIT_VAL: usize = 128;

/// One ablation run. Seed `i` trains with `train.seed + i`; the dataset is
/// drawn once from `train.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub spec: AblationSpec,
    pub seeds: usize,
    pub task: TaskKind,
    /// Train plus validation samples; `None` takes the task's default.
    pub samples: Option<usize>,
    /// Feature noise of `label_from_feature`; `None` takes the task's default.
    pub feature_noise: Option<f64>,
    pub train: TrainConfig,
    /// Multiplies the overfit probe's step budget.
    pub overfit_factor: usize,
}

impl AblationConfig {
    /// Settings under which each ablation finishes in minutes on one core.
    pub fn new(spec: AblationSpec) -> Self {
        let train = TrainConfig {
            epochs: 1000,
            warmup_epochs: 0,
            max_steps: Some(300),
            ..TrainConfig::toy()
        };
        match spec {
            AblationSpec::InitModeCompare => Self {
                spec,
                seeds: 5,
                task: TaskKind::Copy,
                samples: None,
                feature_noise: None,
                train,
                overfit_factor: 1,
            },
            AblationSpec::LayersSweep => Self {
                spec,
                seeds: 1,
                task: TaskKind::Modadd,
                samples: None,
                feature_noise: None,
                train: TrainConfig {
                    eval_every: 100,
                    eval_samples: Some(64),
                    ..train
                },
                overfit_factor: 1,
            },
            // noisy features keep the labels learnable but not separable
            // from 128 samples
            AblationSpec::OverfitProbe => Self {
                spec,
                seeds: 1,
                task: TaskKind::LabelFromFeature,
                samples: Some(128),
                feature_noise: Some(3.0),
                train: TrainConfig {
                    max_steps: Some(150),
                    eval_every: 20,
                    eval_samples: Some(OVERFIT_VAL),
                    peak_lr: 3e-2,
                    weight_decay: 0.0,
                    ..train
                },
                overfit_factor: 4,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 || self.overfit_factor == 0 {
            return Err(Error::Config("seeds and overfit_factor must be positive".into()));
        }
        self.train.validate()
    }

    fn dataset(&self) -> Result<Dataset> {
        let mut task = ToyTask::new(self.task, self.train.seed);
        if let Some(n) = self.samples {
            task.samples = n;
        }
        if let Some(noise) = self.feature_noise {
            task.feature_noise = noise;
        }
        if self.spec == AblationSpec::OverfitProbe {
            // a fixed-size validation set next to the training set
            task.samples += OVERFIT_VAL;
            task.val_fraction = OVERFIT_VAL as f64 / task.samples as f64;
        }
        make_dataset(&task)
    }

    /// Fresh adapter for one run; feature tasks get a projection net.
    fn adapter(&self, cfg: &ModelConfig, mode: InitMode, seed: u64) -> Result<AdapterState<f32>> {
        let a = AdapterState::init(cfg, mode, seed)?;
        Ok(match self.task {
            TaskKind::LabelFromFeature => a.with_projection(ProjectionNet::default_for(cfg.dim, seed)),
            _ => a,
        })
    }

    fn seeded(&self, i: usize) -> TrainConfig {
        TrainConfig {
            seed: self.train.seed + i as u64,
            ..self.train.clone()
        }
    }
}

/// Mean of the trailing `window` train losses ending at each step.
pub fn smoothed_losses(log: &MetricsLog, window: usize) -> Vec<f64> {
    let l = log.train_losses();
    let w = window.max(1);
    (0..l.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            l[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Smoothing window for a run of `n` steps: a twentieth of the run.
pub fn loss_window(n: usize) -> usize {
    (n / 20).max(1)
}

/// Final loss of a run, averaged over the last [`loss_window`] steps.
pub fn final_loss(log: &MetricsLog) -> f64 {
    smoothed_losses(log, loss_window(log.len())).last().copied().unwrap_or(f64::NAN)
}

/// First step whose smoothed loss is at or below `target`.
pub fn steps_to_reach(log: &MetricsLog, target: f64) -> Option<usize> {
    let s = smoothed_losses(log, loss_window(log.len()));
    s.iter().position(|&x| x <= target).map(|i| log.records()[i].step)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedPair {
    pub seed: u64,
    pub zero_final: f64,
    pub rand_final: f64,
    /// Step at which zero-init first matched rand-init's final loss.
    pub zero_reaches_rand: Option<usize>,
    pub steps: usize,
}

impl SeedPair {
    /// `zero_reaches_rand` as a fraction of the run; 1 if never reached.
    pub fn reach_fraction(&self) -> f64 {
        self.zero_reaches_rand.map_or(1.0, |s| s as f64 / self.steps.max(1) as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerResult {
    pub layers: usize,
    /// Mean over seeds of the final validation accuracy and loss.
    pub val_acc: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AblationOutcome {
    InitModeCompare { pairs: Vec<SeedPair> },
    LayersSweep { layers: Vec<LayerResult> },
    /// Evaluations `(step, train_loss, val_loss, val_acc)` of seed 0.
    OverfitProbe { trajectory: Vec<(usize, f64, f64, f64)> },
}

impl AblationOutcome {
    /// Seeds where zero-init ends strictly below rand-init.
    pub fn zero_init_wins(&self) -> Option<(usize, usize)> {
        match self {
            Self::InitModeCompare { pairs } => {
                Some((pairs.iter().filter(|p| p.zero_final < p.rand_final).count(), pairs.len()))
            }
            _ => None,
        }
    }

    /// Median over seeds of [`SeedPair::reach_fraction`].
    pub fn median_reach_fraction(&self) -> Option<f64> {
        let Self::InitModeCompare { pairs } = self else { return None };
        let mut f: Vec<f64> = pairs.iter().map(SeedPair::reach_fraction).collect();
        f.sort_by(f64::total_cmp);
        let n = f.len();
        match n {
            0 => None,
            _ if n % 2 == 1 => Some(f[n / 2]),
            _ => Some((f[n / 2 - 1] + f[n / 2]) / 2.0),
        }
    }

    /// Peak, final validation accuracy and minimum, final validation loss.
    pub fn overfit_extremes(&self) -> Option<(f64, f64, f64, f64)> {
        let Self::OverfitProbe { trajectory } = self else { return None };
        let last = trajectory.last()?;
        let peak = trajectory.iter().map(|t| t.3).fold(f64::NEG_INFINITY, f64::max);
        let min = trajectory.iter().map(|t| t.2).fold(f64::INFINITY, f64::min);
        Some((peak, last.3, min, last.2))
    }

    fn summary(&self) -> Vec<Vec<String>> {
        let f = |x: f64| format!("{x}");
        match self {
            Self::InitModeCompare { pairs } => {
                let mut rows = vec![vec!["seed".into(), "zero_final".into(), "rand_final".into(), "zero_reaches_rand".into(), "steps".into()]];
                for p in pairs {
                    rows.push(vec![
                        p.seed.to_string(),
                        f(p.zero_final),
                        f(p.rand_final),
                        p.zero_reaches_rand.map_or_else(|| "never".into(), |s| s.to_string()),
                        p.steps.to_string(),
                    ]);
                }
                let (wins, of) = self.zero_init_wins().unwrap_or_default();
                rows.push(vec!["zero_init_wins".into(), wins.to_string(), "of".into(), of.to_string()]);
                rows.push(vec!["median_reach_fraction".into(), f(self.median_reach_fraction().unwrap_or(f64::NAN))]);
                rows
            }
            Self::LayersSweep { layers } => {
                let mut rows = vec![vec!["layers".into(), "val_acc".into(), "val_loss".into()]];
                rows.extend(layers.iter().map(|l| vec![l.layers.to_string(), f(l.val_acc), f(l.val_loss)]));
                rows
            }
            Self::OverfitProbe { trajectory } => {
                let mut rows = vec![vec!["step".into(), "train_loss".into(), "val_loss".into(), "val_acc".into()]];
                rows.extend(trajectory.iter().map(|t| vec![t.0.to_string(), f(t.1), f(t.2), f(t.3)]));
                rows
            }
        }
    }
}

/// Curves of every run plus the aggregated outcome.
#[derive(Clone, Debug)]
pub struct AblationReport {
    pub spec: AblationSpec,
    /// `(file stem, log)` per training run.
    pub curves: Vec<(String, MetricsLog)>,
    pub outcome: AblationOutcome,
}

impl AblationReport {
    pub fn summary(&self) -> Vec<Vec<String>> {
        self.outcome.summary()
    }

    /// Writes `<stem>.csv` per curve and `summary.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (stem, log) in &self.curves {
            log.write_csv(BufWriter::new(File::create(dir.join(format!("{stem}.csv")))?))?;
        }
        let mut w = csv::WriterBuilder::new().flexible(true).from_path(dir.join("summary.csv"))?;
        for row in self.summary() {
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Adapted-layer counts of the sweep: `{1, N/2, N-2}`, deduplicated and
/// clipped to `[1, N]`.
pub fn sweep_layers(n_layers: usize) -> Vec<usize> {
    let mut v: Vec<usize> = [1, n_layers / 2, n_layers.saturating_sub(2)]
        .into_iter()
        .map(|l| l.clamp(1, n_layers.max(1)))
        .collect();
    v.dedup();
    v
}

/// Runs the ablation on a frozen `base`.
pub fn run_ablation(cfg: &ModelConfig, base: &BaseWeights<f32>, acfg: &AblationConfig) -> Result<AblationReport> {
    acfg.validate()?;
    let data = acfg.dataset()?;
    let mut curves = Vec::new();
    let outcome = match acfg.spec {
        AblationSpec::InitModeCompare => {
            let mut pairs = Vec::new();
            for i in 0..acfg.seeds {
                let tcfg = acfg.seeded(i);
                let mut finals = Vec::new();
                for mode in [InitMode::ZeroInit, InitMode::RandInit] {
                    let tcfg = TrainConfig { init_mode: mode, ..tcfg.clone() };
                    let mcfg = tcfg.model_config(cfg)?;
                    let out = train(&mcfg, base, acfg.adapter(&mcfg, mode, tcfg.seed)?, &data, &tcfg)?;
                    curves.push((format!("seed{i}_{}", mode.as_str()), out.log.clone()));
                    finals.push(out.log);
                }
                let rand_final = final_loss(&finals[1]);
                pairs.push(SeedPair {
                    seed: tcfg.seed,
                    zero_final: final_loss(&finals[0]),
                    rand_final,
                    zero_reaches_rand: steps_to_reach(&finals[0], rand_final),
                    steps: finals[0].len(),
                });
            }
            AblationOutcome::InitModeCompare { pairs }
        }
        AblationSpec::LayersSweep => {
            let mut layers = Vec::new();
            for l in sweep_layers(cfg.n_layers) {
                let (mut acc, mut loss) = (0.0, 0.0);
                for i in 0..acfg.seeds {
                    let tcfg = TrainConfig {
                        layers_override: Some(l),
                        eval_every: acfg.train.eval_every.max(1),
                        ..acfg.seeded(i)
                    };
                    let mcfg = tcfg.model_config(cfg)?;
                    let out = train(&mcfg, base, acfg.adapter(&mcfg, tcfg.init_mode, tcfg.seed)?, &data, &tcfg)?;
                    let (_, vl, va) = out.log.evals().last().copied().unwrap_or((0, f64::NAN, f64::NAN));
                    acc += va;
                    loss += vl;
                    curves.push((format!("seed{i}_layers{l}"), out.log));
                }
                layers.push(LayerResult {
                    layers: l,
                    val_acc: acc / acfg.seeds as f64,
                    val_loss: loss / acfg.seeds as f64,
                });
            }
            AblationOutcome::LayersSweep { layers }
        }
        AblationSpec::OverfitProbe => {
            let mut trajectory = Vec::new();
            for i in 0..acfg.seeds {
                let base_cfg = acfg.seeded(i);
                let tcfg = TrainConfig {
                    max_steps: base_cfg.max_steps.map(|s| s * acfg.overfit_factor),
                    epochs: base_cfg.epochs * acfg.overfit_factor,
                    eval_every: base_cfg.eval_every.max(1),
                    ..base_cfg
                };
                let mcfg = tcfg.model_config(cfg)?;
                let out = train(&mcfg, base, acfg.adapter(&mcfg, tcfg.init_mode, tcfg.seed)?, &data, &tcfg)?;
                if i == 0 {
                    let smooth = smoothed_losses(&out.log, loss_window(out.log.len()));
                    trajectory = out
                        .log
                        .records()
                        .iter()
                        .zip(&smooth)
                        .filter_map(|(r, &tl)| Some((r.step, tl, r.val_loss?, r.val_acc?)))
                        .collect();
                }
                curves.push((format!("seed{i}_overfit"), out.log));
            }
            AblationOutcome::OverfitProbe { trajectory }
        }
    };
    Ok(AblationReport {
        spec: acfg.spec,
        curves,
        outcome,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::metrics::StepRecord;

    fn log_of(losses: &[f64]) -> MetricsLog {
        let mut log = MetricsLog::new();
        for (i, &l) in losses.iter().enumerate() {
            log.push(StepRecord {
                step: i + 1,
                epoch: 0,
                lr: 0.0,
                train_loss: l,
                val_loss: None,
                val_acc: None,
            })
            .unwrap();
        }
        log
    }

    #[test]
    fn unknown_spec_is_usage_error() {
        assert!(matches!("fig5".parse::<AblationSpec>(), Err(Error::Usage(_))));
        for s in AblationSpec::ALL {
            assert_eq!(s.as_str().parse::<AblationSpec>().unwrap(), s);
        }
    }

    #[test]
    fn sweep_layers_match_geometry() {
        assert_eq!(sweep_layers(6), vec![1, 3, 4]);
        assert_eq!(sweep_layers(32), vec![1, 16, 30]);
        assert_eq!(sweep_layers(2), vec![1]);
    }

    #[test]
    fn smoothing_and_reach() {
        // 40 steps: window 2
        let losses: Vec<f64> = (0..40).map(|i| 40.0 - i as f64).collect();
        let log = log_of(&losses);
        assert_eq!(final_loss(&log), 1.5);
        // step s has loss 41 - s, so the trailing mean is 41.5 - s from step 2 on
        assert_eq!(steps_to_reach(&log, 10.5), Some(31));
        assert_eq!(steps_to_reach(&log, 0.0), None);
    }

    #[test]
    fn wins_and_median() {
        let pair = |z: f64, r: f64, reach: Option<usize>| SeedPair {
            seed: 0,
            zero_final: z,
            rand_final: r,
            zero_reaches_rand: reach,
            steps: 100,
        };
        let o = AblationOutcome::InitModeCompare {
            pairs: vec![pair(0.1, 0.5, Some(20)), pair(0.6, 0.5, None), pair(0.2, 0.3, Some(40)), pair(0.5, 0.5, Some(100))],
        };
        assert_eq!(o.zero_init_wins(), Some((2, 4)));
        // fractions 0.2, 1.0, 0.4, 1.0 -> median (0.4 + 1.0) / 2
        assert!((o.median_reach_fraction().unwrap() - 0.7).abs() < 1e-12);
        let rows = o.summary();
        assert!(rows.contains(&vec!["zero_init_wins".to_string(), "2".into(), "of".into(), "4".into()]));
    }
}
