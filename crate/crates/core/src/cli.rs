//! Command-line entry points: synthesize sessions, train RL and supervised
//! models, evaluate checkpoints and sweep the tracer weight.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::env::ActionSpace;
use crate::eval::{evaluate, EvalReport, Mode};
use crate::model::{Network, NetworkConfig, Variant};
use crate::numerics::Scalar;
use crate::preproc::{prepare_session, FilterSpec, PrepSpec, PreparedSession, RtSmoothingSpec};
use crate::sessions::{generate_session, load_latent, load_session, save_latent, save_session, SynthConfig, LATENT_FILE};
use crate::trainer::{train_rl, train_supervised, RlTrainConfig, SlTrainConfig};

/// Session length written by `synth` unless configured otherwise.
pub const DEFAULT_SYNTH_DURATION_S: f64 = 5400.0;
pub const DEFAULT_SWEEP_BETAS: [f64; 5] = [0.2, 0.4, 0.6, 0.75, 0.8];

/// Arithmetic used for training and inference; checkpoints are always
/// stored in 64-bit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Everything a command can be configured with; loaded from `--config`
/// and overridden by explicit flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub rl: RlTrainConfig,
    pub sl: SlTrainConfig,
    pub actions: ActionSpace,
    pub filter: FilterSpec,
    pub smoothing: RtSmoothingSpec,
    pub network: NetworkConfig,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthConfig {
                duration_s: DEFAULT_SYNTH_DURATION_S,
                ..SynthConfig::default()
            },
            rl: RlTrainConfig::default(),
            sl: SlTrainConfig::default(),
            actions: ActionSpace::default(),
            filter: FilterSpec::default(),
            smoothing: RtSmoothingSpec::default(),
            network: NetworkConfig::default(),
            precision: Precision::default(),
        }
    }
}

impl RunConfig {
    /// Parse a JSON configuration. Unknown keys are rejected; a `synth`
    /// section without `duration_s` keeps the command-line default.
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let mut value: serde_json::Value = serde_json::from_str(text)?;
        if let Some(synth) = value.get_mut("synth").and_then(|s| s.as_object_mut()) {
            synth
                .entry("duration_s")
                .or_insert(serde_json::json!(DEFAULT_SYNTH_DURATION_S));
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                RunConfig::from_json(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    pub fn prep(&self) -> PrepSpec {
        PrepSpec {
            filter: self.filter,
            smoothing: self.smoothing,
        }
    }

    fn validate(&self) -> anyhow::Result<()> {
        self.synth.validate()?;
        self.rl.validate()?;
        self.sl.validate()?;
        self.network.validate()?;
        if self.actions.min() > self.rl.initial_trt || self.rl.initial_trt > self.actions.max() {
            bail!(
                "initial traced RT {} lies outside the proposal range [{}, {}]",
                self.rl.initial_trt,
                self.actions.min(),
                self.actions.max()
            );
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "drowsy", version, about = "Reaction-time tracing from EEG with deep Q-learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic session with a known drowsiness trace.
    Synth(SynthArgs),
    /// Train a Q-network on one or more sessions.
    TrainRl(TrainRlArgs),
    /// Train the supervised regression baseline on pre-event windows.
    TrainSl(TrainSlArgs),
    /// Evaluate a checkpoint on a test session.
    Eval(EvalArgs),
    /// Train and evaluate once per tracer weight.
    SweepBeta(SweepArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// JSON run configuration; explicit flags take precedence.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub duration_s: Option<f64>,
    #[arg(long)]
    pub subject_id: Option<String>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainRlArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    /// Training session directories.
    #[arg(long, required = true, num_args = 1.., value_name = "DIR")]
    pub train: Vec<PathBuf>,
    /// Validation session used to pick the best episode.
    #[arg(long, value_name = "DIR")]
    pub val: Option<PathBuf>,
    /// Checkpoint directory (best network; the final one goes to `final/`).
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainSlArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    #[arg(long, required = true, num_args = 1.., value_name = "DIR")]
    pub train: Vec<PathBuf>,
    /// Session evaluated after training; its report lands next to the checkpoint.
    #[arg(long, value_name = "DIR")]
    pub val: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, value_name = "DIR")]
    pub model: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub session: PathBuf,
    #[arg(long)]
    pub mode: Mode,
    /// Tracer weight; defaults to the one the checkpoint was trained with.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    /// Report path; the per-segment CSV is written beside it.
    #[arg(long, value_name = "FILE")]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SWEEP_BETAS.to_vec())]
    pub values: Vec<f64>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    #[arg(long, required = true, num_args = 1.., value_name = "DIR")]
    pub train: Vec<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub val: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub test: PathBuf,
    /// Directory receiving `sweep.csv`, `sweep.json` and per-beta reports.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

/// Load, preprocess and (when ground truth is present) annotate a session.
pub fn load_prepared(dir: &Path, spec: &PrepSpec) -> anyhow::Result<PreparedSession> {
    let session = load_session(dir)?;
    let prepared = prepare_session(&session, spec).with_context(|| format!("preprocessing {}", dir.display()))?;
    if dir.join(LATENT_FILE).exists() {
        Ok(prepared.with_latent(&load_latent(dir)?))
    } else {
        Ok(prepared)
    }
}

fn load_all(dirs: &[PathBuf], spec: &PrepSpec) -> anyhow::Result<Vec<PreparedSession>> {
    dirs.iter().map(|d| load_prepared(d, spec)).collect()
}

pub fn cmd_synth(args: &SynthArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(args.config.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.synth.seed = seed;
    }
    if let Some(d) = args.duration_s {
        cfg.synth.duration_s = d;
    }
    if let Some(id) = &args.subject_id {
        cfg.synth.subject_id = id.clone();
    }
    cfg.synth.validate()?;
    let (session, latent) = generate_session(&cfg.synth)?;
    save_session(&session, &args.out)?;
    save_latent(&latent, &args.out)?;
    Ok(())
}

fn checkpoint_meta(cfg: &RunConfig, kind: &str, episode: Option<usize>) -> serde_json::Value {
    serde_json::json!({
        "kind": kind,
        "beta": cfg.rl.beta,
        "initial_trt": cfg.rl.initial_trt,
        "actions": cfg.actions,
        "precision": cfg.precision,
        "episode": episode,
    })
}

fn run_train_rl<T: Scalar>(cfg: &RunConfig, train: &[PreparedSession], val: Option<&PreparedSession>, out: &Path) -> anyhow::Result<()> {
    let outcome = train_rl::<T>(train, val, &cfg.actions, &cfg.network, &cfg.rl)?;
    outcome
        .best_net
        .save(out, checkpoint_meta(cfg, "best", outcome.log.best_episode))?;
    outcome
        .final_net
        .save(&out.join("final"), checkpoint_meta(cfg, "final", Some(cfg.rl.episodes)))?;
    outcome.log.write(out)?;
    Ok(())
}

pub fn cmd_train_rl(args: &TrainRlArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(args.config.config.as_deref())?;
    if let Some(v) = args.variant {
        cfg.rl.variant = v;
    }
    if let Some(b) = args.beta {
        cfg.rl.beta = b;
    }
    if let Some(e) = args.episodes {
        cfg.rl.episodes = e;
    }
    if let Some(s) = args.seed {
        cfg.rl.seed = s;
    }
    if let Some(p) = args.precision {
        cfg.precision = p;
    }
    cfg.validate()?;
    let prep = cfg.prep();
    let train = load_all(&args.train, &prep)?;
    let val = args.val.as_deref().map(|d| load_prepared(d, &prep)).transpose()?;
    match cfg.precision {
        Precision::F32 => run_train_rl::<f32>(&cfg, &train, val.as_ref(), &args.out),
        Precision::F64 => run_train_rl::<f64>(&cfg, &train, val.as_ref(), &args.out),
    }
}

fn run_train_sl<T: Scalar>(cfg: &RunConfig, train: &[PreparedSession], val: Option<&PreparedSession>, out: &Path) -> anyhow::Result<()> {
    let trials: Vec<_> = train.iter().flat_map(|s| s.trials.iter()).collect();
    let (net, log) = train_supervised::<T>(&trials, &cfg.network, &cfg.sl)?;
    let meta = serde_json::json!({
        "kind": "final",
        "trials": trials.len(),
        "precision": cfg.precision,
        "iterations": cfg.sl.iterations,
    });
    net.save(out, meta)?;
    log.write(out)?;
    if let Some(v) = val {
        evaluate(&net, v, Mode::Sl, &cfg.actions, cfg.rl.beta, cfg.rl.initial_trt)?.write(&out.join("val_report.json"))?;
    }
    Ok(())
}

pub fn cmd_train_sl(args: &TrainSlArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(args.config.config.as_deref())?;
    if let Some(i) = args.iterations {
        cfg.sl.iterations = i;
    }
    if let Some(lr) = args.lr {
        cfg.sl.learning_rate = lr;
    }
    if let Some(s) = args.seed {
        cfg.sl.seed = s;
    }
    if let Some(p) = args.precision {
        cfg.precision = p;
    }
    cfg.validate()?;
    let prep = cfg.prep();
    let train = load_all(&args.train, &prep)?;
    let val = args.val.as_deref().map(|d| load_prepared(d, &prep)).transpose()?;
    match cfg.precision {
        Precision::F32 => run_train_sl::<f32>(&cfg, &train, val.as_ref(), &args.out),
        Precision::F64 => run_train_sl::<f64>(&cfg, &train, val.as_ref(), &args.out),
    }
}

/// Tracer settings stored with an RL checkpoint.
#[derive(Debug, Deserialize)]
struct TracerMeta {
    beta: f64,
    initial_trt: f64,
    actions: ActionSpace,
}

pub fn cmd_eval(args: &EvalArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(args.config.config.as_deref())?;
    if let Some(p) = args.precision {
        cfg.precision = p;
    }
    let (net, meta) = Network::<f64>::load(&args.model)?;
    if let Ok(t) = serde_json::from_value::<TracerMeta>(meta) {
        cfg.rl.beta = t.beta;
        cfg.rl.initial_trt = t.initial_trt;
        cfg.actions = t.actions;
    }
    if let Some(b) = args.beta {
        cfg.rl.beta = b;
    }
    cfg.validate()?;
    let session = load_prepared(&args.session, &cfg.prep())?;
    let report = match cfg.precision {
        Precision::F32 => evaluate(&net.cast::<f32>(), &session, args.mode, &cfg.actions, cfg.rl.beta, cfg.rl.initial_trt)?,
        Precision::F64 => evaluate(&net, &session, args.mode, &cfg.actions, cfg.rl.beta, cfg.rl.initial_trt)?,
    };
    report.write(&args.report)?;
    Ok(())
}

/// One line of the tracer-weight sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub rmse: Option<f64>,
    pub correlation: Option<f64>,
    pub latent_correlation: Option<f64>,
}

fn sweep_one<T: Scalar>(
    cfg: &RunConfig,
    train: &[PreparedSession],
    val: Option<&PreparedSession>,
    test: &PreparedSession,
) -> anyhow::Result<EvalReport> {
    let outcome = train_rl::<T>(train, val, &cfg.actions, &cfg.network, &cfg.rl)?;
    Ok(evaluate(&outcome.best_net, test, Mode::Rl, &cfg.actions, cfg.rl.beta, cfg.rl.initial_trt)?)
}

pub fn cmd_sweep_beta(args: &SweepArgs) -> anyhow::Result<Vec<SweepRow>> {
    let mut cfg = RunConfig::load(args.config.config.as_deref())?;
    if let Some(v) = args.variant {
        cfg.rl.variant = v;
    }
    if let Some(e) = args.episodes {
        cfg.rl.episodes = e;
    }
    if let Some(s) = args.seed {
        cfg.rl.seed = s;
    }
    if let Some(p) = args.precision {
        cfg.precision = p;
    }
    if args.values.is_empty() {
        bail!("no beta values given");
    }
    cfg.validate()?;
    let prep = cfg.prep();
    let train = load_all(&args.train, &prep)?;
    let val = args.val.as_deref().map(|d| load_prepared(d, &prep)).transpose()?;
    let test = load_prepared(&args.test, &prep)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let mut rows = Vec::with_capacity(args.values.len());
    for &beta in &args.values {
        let mut run = cfg.clone();
        run.rl.beta = beta;
        run.validate()?;
        let report = match run.precision {
            Precision::F32 => sweep_one::<f32>(&run, &train, val.as_ref(), &test)?,
            Precision::F64 => sweep_one::<f64>(&run, &train, val.as_ref(), &test)?,
        };
        report.write(&args.out.join(format!("report_beta_{beta}.json")))?;
        rows.push(SweepRow {
            beta,
            rmse: report.rmse,
            correlation: report.correlation,
            latent_correlation: report.latent_correlation,
        });
    }

    let csv_path = args.out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    let json_path = args.out.join("sweep.json");
    fs::write(&json_path, serde_json::to_string_pretty(&rows)? + "\n")
        .with_context(|| format!("writing {}", json_path.display()))?;
    Ok(rows)
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::TrainRl(a) => cmd_train_rl(a),
        Command::TrainSl(a) => cmd_train_sl(a),
        Command::Eval(a) => cmd_eval(a),
        Command::SweepBeta(a) => cmd_sweep_beta(a).map(|_| ()),
    }
}

/// Collapse a possibly multi-line message onto one line.
pub fn one_line(message: &str) -> String {
    message.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Process entry point: returns the exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let message = text.split("\n\nUsage").next().unwrap_or(&text);
            eprintln!("{}", one_line(message));
            return 2;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            1
        }
    }
}
