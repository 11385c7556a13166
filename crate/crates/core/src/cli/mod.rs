//! Subcommands behind the `zadapt` binary.
//!
//! Exit codes: 0 success, 1 gradient check failed, 2 configuration or usage
//! error, 3 numeric abort, 4 checkpoint or file error.

pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{AdapterSection, RunConfig, TaskSection};

use crate::adapter::AdapterState;
use crate::data::make_dataset;
use crate::error::{Error, Result};
use crate::generation::{respond, DecodeMethod};
use crate::gradcheck::{adapter_suite, full_suite, primitive_suite};
use crate::model::{BaseWeights, ModelConfig};
use crate::multimodal::{aggregate_features, ProjectionNet, VisualFeatureSet};
use crate::params::Parameters;
use crate::train::ablation::{run_ablation, AblationConfig, AblationSpec};
use crate::train::pretrain::pretrained_base;
use crate::train::{train, Checkpoint, CheckpointKind};

#[derive(Debug, Parser)]
#[command(name = "zadapt", version, about = "Zero-initialized gated adapters on a toy transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fine-tune an adapter; writes full.zadp, adapter.zadp, metrics.csv and config.json.
    Train(TrainArgs),
    /// Run an ablation; writes one curve CSV per run and summary.csv.
    Ablate(AblateArgs),
    /// Decode a response from a checkpoint.
    Generate(GenerateArgs),
    /// Finite-difference gradient checks in 64-bit.
    Gradcheck(GradcheckArgs),
    /// Per-layer, per-head gate and prompt statistics as CSV.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct BaseArgs {
    /// Run configuration (JSON); defaults to the toy setup.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Take the frozen base from this full checkpoint instead of pre-training one.
    #[arg(long)]
    pub base: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: BaseArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: BaseArgs,
    /// init_mode_compare, layers_sweep or overfit_probe.
    #[arg(long)]
    pub spec: String,
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Overrides the per-run step budget (before the overfit multiplier).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Greedy,
    TopP,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: BaseArgs,
    /// Full or adapter-only checkpoint; adapter-only needs --base.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub instruction: String,
    #[arg(long)]
    pub input: Option<String>,
    /// Visual feature file (ZAFT) for adapters with a projection.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Scope {
    Primitives,
    Adapter,
    Full,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "primitives")]
    pub scope: Scope,
    /// Scale every tape gradient by 2 (negative control; must fail).
    #[arg(long)]
    pub corrupt_backward: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Verify the checkpoint against this run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NumericAbort { .. } | Error::NonFinite(_) => 3,
        Error::Incompatible(_) | Error::Parse { .. } | Error::Io(_) | Error::Csv(_) => 4,
        _ => 2,
    }
}

/// Parses the process arguments, runs, and maps errors to exit codes.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    match run(&cli, &mut stdout) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Runs one subcommand; `Ok` carries the exit code.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<u8> {
    match &cli.command {
        Command::Train(a) => cmd_train(a, out).map(|_| 0),
        Command::Ablate(a) => cmd_ablate(a, out).map(|_| 0),
        Command::Generate(a) => cmd_generate(a, out).map(|_| 0),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Inspect(a) => cmd_inspect(a, out).map(|_| 0),
    }
}

fn load_run(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn frozen_base(run: &RunConfig, base: Option<&Path>, out: &mut dyn Write) -> Result<BaseWeights<f32>> {
    match base {
        Some(p) => Checkpoint::load(p)?.shared_base(&run.model),
        None => {
            let t = Instant::now();
            let (base, log) = pretrained_base(&run.model, &run.pretrain)?;
            if let Some(last) = log.train_losses().last() {
                writeln!(out, "pretrain_steps {} final_loss {last:.4} wall_time_s {:.1}", log.len(), t.elapsed().as_secs_f64())?;
            }
            Ok(base)
        }
    }
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let run = load_run(a.common.config.as_deref())?;
    let cfg = run.model_config()?;
    let data = make_dataset(&run.task.toy_task())?;
    std::fs::create_dir_all(&a.out)?;
    let base = frozen_base(&run, a.common.base.as_deref(), out)?;
    let mut adapter = AdapterState::init(&cfg, run.train.init_mode, run.adapter.seed)?;
    if run.adapter.multimodal {
        adapter = adapter.with_projection(ProjectionNet::default_for(cfg.dim, run.adapter.seed ^ 0x9E37));
    }
    let before = base.param_digest();
    writeln!(out, "trainable_params {}", adapter.num_params())?;
    let t = Instant::now();
    let outcome = train(&cfg, &base, adapter, &data, &run.train)?;
    let wall = t.elapsed().as_secs_f64();
    debug_assert_eq!(before, base.param_digest());
    Checkpoint::full(&cfg, &base, &outcome.adapter, Some(&outcome.optimizer)).save(a.out.join("full.zadp"))?;
    Checkpoint::adapter(&cfg, &outcome.adapter).save(a.out.join("adapter.zadp"))?;
    outcome.log.write_csv(std::fs::File::create(a.out.join("metrics.csv"))?)?;
    std::fs::write(a.out.join("config.json"), run.canonical_text() + "\n")?;
    writeln!(out, "wall_time_s {wall:.2}")?;
    if let Some(l) = outcome.log.train_losses().last() {
        writeln!(out, "final_train_loss {l:.6}")?;
    }
    if let Some((_, vl, va)) = outcome.log.evals().last() {
        writeln!(out, "val_loss {vl:.6} val_acc {va:.4}")?;
    }
    writeln!(out, "base_digest {}", hex::encode(before))?;
    writeln!(out, "config_digest {}", hex::encode(run.digest()))?;
    Ok(())
}

fn cmd_ablate(a: &AblateArgs, out: &mut dyn Write) -> Result<()> {
    let spec: AblationSpec = a.spec.parse()?;
    let run = load_run(a.common.config.as_deref())?;
    let mut acfg = AblationConfig::new(spec);
    if let Some(s) = a.seeds {
        acfg.seeds = s;
    }
    if let Some(s) = a.steps {
        acfg.train.max_steps = Some(s);
    }
    acfg.validate()?;
    let base = frozen_base(&run, a.common.base.as_deref(), out)?;
    let report = run_ablation(&run.model, &base, &acfg)?;
    report.write(&a.out)?;
    for row in report.summary() {
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

fn cmd_generate(a: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let run = load_run(a.common.config.as_deref())?;
    let cfg = run.model_config()?;
    let ck = Checkpoint::load(&a.ckpt)?;
    let adapter = ck.adapter_state(&cfg)?;
    let base = match (ck.kind, &a.common.base) {
        (CheckpointKind::Full, _) => ck.base_weights(&cfg)?,
        (CheckpointKind::AdapterOnly, Some(p)) => Checkpoint::load(p)?.shared_base(&cfg)?,
        (CheckpointKind::AdapterOnly, None) => {
            return Err(Error::Usage("an adapter-only checkpoint needs --base <full checkpoint>".into()))
        }
    };
    let visual = match &a.features {
        Some(p) => {
            let fs = VisualFeatureSet::load(p)?;
            let proj = adapter
                .projection
                .as_ref()
                .ok_or_else(|| Error::Usage("--features given but the adapter has no projection".into()))?;
            Some(aggregate_features(&fs, proj)?)
        }
        None => None,
    };
    let mut decode = run.decode.clone();
    if let Some(m) = a.method {
        decode.method = match m {
            MethodArg::Greedy => DecodeMethod::Greedy,
            MethodArg::TopP => DecodeMethod::TopP,
        };
    }
    decode.temperature = a.temperature.unwrap_or(decode.temperature);
    decode.top_p = a.top_p.unwrap_or(decode.top_p);
    decode.max_new_tokens = a.max_new_tokens.unwrap_or(decode.max_new_tokens);
    decode.seed = a.seed.unwrap_or(decode.seed);
    let text = respond(&cfg, &base, Some(&adapter), visual.as_ref(), &a.instruction, a.input.as_deref(), &decode)?;
    if !text.is_empty() {
        writeln!(out, "{text}")?;
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<u8> {
    let fault = a.corrupt_backward.then_some(2.0);
    let groups = match a.scope {
        Scope::Primitives => primitive_suite(a.seed, fault)?,
        Scope::Adapter => adapter_suite(a.seed, fault)?,
        Scope::Full => {
            let mut g = adapter_suite(a.seed, fault)?;
            g.extend(full_suite(a.seed, fault)?);
            g
        }
    };
    let mut failed = 0;
    for (name, report) in &groups {
        let ok = report.passed();
        failed += usize::from(!ok);
        writeln!(out, "{name:<28} max_rel_err={:.3e} {}", report.max_rel_err(), if ok { "pass" } else { "FAIL" })?;
        if !ok {
            write!(out, "{report}")?;
        }
    }
    writeln!(out, "{} of {} groups passed", groups.len() - failed, groups.len())?;
    Ok(if failed == 0 { 0 } else { 1 })
}

/// Rows `(layer, head, gate, prompt norm)`: the prompt norm is the mean L2
/// norm of the head's slice of each prompt row. Ungated adapters report gate 1.
pub fn gate_statistics(cfg_heads: usize, adapter: &AdapterState<f32>) -> Vec<(usize, usize, f32, f32)> {
    let mut rows = Vec::new();
    for (slot, p) in adapter.prompts.iter().enumerate() {
        let hd = p.cols() / cfg_heads;
        for h in 0..cfg_heads {
            let norm: f32 = (0..p.rows())
                .map(|r| p.row(r)[h * hd..(h + 1) * hd].iter().map(|x| x * x).sum::<f32>().sqrt())
                .sum::<f32>()
                / p.rows().max(1) as f32;
            let gate = if adapter.is_gated() { adapter.gates.row(slot)[h] } else { 1.0 };
            rows.push((adapter.layer_offset + slot, h, gate, norm));
        }
    }
    rows
}

fn cmd_inspect(a: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let cfg = match &a.config {
        Some(p) => {
            let cfg = RunConfig::load(p)?.model_config()?;
            ck.check(&cfg)?;
            cfg
        }
        None => geometry_of(&ck)?,
    };
    let adapter = ck.adapter_state(&cfg)?;
    eprintln!(
        "kind={:?} digest={} init_mode={} layers={} prompt_len={} dim={} heads={} projection={}",
        ck.kind,
        hex::encode(ck.digest),
        adapter.init_mode.as_str(),
        adapter.prompts.len(),
        cfg.prompt_len,
        cfg.dim,
        cfg.n_heads,
        adapter.projection.is_some()
    );
    writeln!(out, "layer,head,gate,abs_gate,prompt_norm")?;
    for (l, h, g, n) in gate_statistics(cfg.n_heads, &adapter) {
        writeln!(out, "{l},{h},{g},{},{n}", g.abs())?;
    }
    Ok(())
}

/// Model geometry recovered from tensor shapes; the digest then decides
/// whether the remaining fields were the toy defaults.
fn geometry_of(ck: &Checkpoint) -> Result<ModelConfig> {
    let prompts: Vec<_> = (0..).map_while(|i| ck.get(&format!("adapter.prompts.{i}"))).collect();
    let first = prompts
        .first()
        .ok_or_else(|| Error::Incompatible("checkpoint holds no adaption prompts".into()))?;
    let mut cfg = ModelConfig {
        dim: first.cols(),
        prompt_len: first.rows(),
        adapted_layers: prompts.len(),
        ..ModelConfig::toy()
    };
    if let Some(g) = ck.get("adapter.gates") {
        cfg.n_heads = g.cols();
    }
    if ck.digest != cfg.digest() {
        return Err(Error::Incompatible(
            "checkpoint is not for a toy-geometry model; pass --config".into(),
        ));
    }
    Ok(cfg)
}
