//! Operator surface: dataset ingestion, pretraining, frozen-backbone
//! evaluation, embedding export, one-axis sweeps, and plotting.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error. Failures print one machine-readable JSON object to stderr:
//! `{"error": <kind>, "message": <text>}`.

mod plot;
mod sweep;

use clap::{Parser, Subcommand, ValueEnum};
use ressl_core::checkpoint::load_checkpoint_meta;
use ressl_core::config::{ExperimentConfig, Objective, Precision, TeacherAugmentation};
use ressl_core::data::{ingest, open_split, DatasetName, IngestOptions, Split};
use ressl_core::error::Error as CoreError;
use ressl_core::eval::{export_embeddings, knn_eval, linear_eval, LinearEvalConfig};
use ressl_core::metrics::MetricsWriter;
use ressl_core::model::StudentTeacherPair;
use ressl_core::scalar::Scalar;
use ressl_core::trainer::{load_encoder_pair, train};
use serde::{Deserialize, Serialize};
use std::fmt::Display;
use std::path::{Path, PathBuf};

/// Errors split by exit class: usage/config problems exit 2, runtime
/// failures exit 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(CoreError),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn to_json(&self) -> String {
        let (kind, message) = match self {
            CliError::Usage(m) => ("usage", m.clone()),
            CliError::Runtime(e) => (e.kind(), e.to_string()),
        };
        serde_json::json!({ "error": kind, "message": message }).to_string()
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Runtime(e)
    }
}

pub(crate) fn usage(msg: impl Display) -> CliError {
    CliError::Usage(msg.to_string())
}

/// Runs `body` with the scalar type matching `precision`.
macro_rules! dispatch_precision {
    ($precision:expr, $S:ident => $body:expr) => {
        match $precision {
            Precision::F32 => {
                type $S = f32;
                $body
            }
            Precision::F64 => {
                type $S = f64;
                $body
            }
        }
    };
}
pub(crate) use dispatch_precision;

/// Which encoder of a checkpoint to evaluate. The evaluation protocol
/// reads the student backbone by default; the momentum (teacher) side is
/// available for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderChoice {
    #[default]
    Student,
    Teacher,
}

#[derive(Parser)]
#[command(
    name = "ressl",
    version,
    about = "Relational self-supervised pretraining: teacher/student encoders matched on similarity distributions over a memory queue"
)]
struct Cli {
    /// Experiment configuration file (TOML)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the experiment seed
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory for artifacts
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Continue from the latest checkpoint in the output directory
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a raw dataset archive or directory into packed splits
    Ingest(IngestArgs),
    /// Pretrain the student/teacher encoders
    Pretrain(PretrainArgs),
    /// Train a linear classifier on frozen backbone features
    LinearEval(EvalArgs),
    /// Weighted-vote nearest-neighbor evaluation of backbone features
    Knn(KnnArgs),
    /// Export backbone features for every record of a split
    ExportEmbeddings(ExportArgs),
    /// Run a one-axis grid of pretraining runs, each followed by an eval
    Sweep(SweepArgs),
    /// Render metrics or sweep results as a deterministic SVG + CSV pair
    Plot(PlotArgs),
    /// Internal: execute a single sweep row in a child process
    #[command(hide = true)]
    SweepRow(SweepRowArgs),
}

#[derive(clap::Args)]
struct IngestArgs {
    /// Dataset to ingest: cifar10, cifar100, stl10, tiny_imagenet
    #[arg(long)]
    dataset: String,
    /// Source archive or extracted directory
    #[arg(long, value_name = "PATH")]
    source: PathBuf,
    /// Directory receiving the packed splits
    #[arg(long, value_name = "DIR", default_value = "data")]
    data_dir: PathBuf,
    /// Abort unless the source archive has this SHA-256 (hex)
    #[arg(long, value_name = "HEX")]
    expected_sha256: Option<String>,
}

#[derive(clap::Args)]
struct PretrainArgs {
    /// Override the number of pretraining epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the batch size
    #[arg(long)]
    batch_size: Option<usize>,
    /// Override the teacher (sharpening) temperature
    #[arg(long, value_name = "X")]
    tau_t: Option<f64>,
    /// Override the student temperature
    #[arg(long, value_name = "X")]
    tau_s: Option<f64>,
    /// Override the queue capacity
    #[arg(long, value_name = "K")]
    queue_capacity: Option<usize>,
    /// Override the teacher momentum
    #[arg(long, value_name = "M")]
    ema_momentum: Option<f64>,
    /// Teacher view policy: weak or contrastive
    #[arg(long, value_name = "POLICY")]
    teacher_augmentation: Option<String>,
    /// Objective: ressl, info_nce, or byol_style
    #[arg(long, value_name = "NAME")]
    objective: Option<String>,
    /// Run the nearest-neighbor monitor every N epochs (0 = off)
    #[arg(long, value_name = "N")]
    knn_monitor_every: Option<usize>,
    /// Override the packed-dataset directory
    #[arg(long, value_name = "DIR")]
    data_dir: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Pretraining checkpoint to evaluate
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Classifier epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Classifier batch size
    #[arg(long)]
    batch_size: Option<usize>,
    /// Classifier peak learning rate (default 30 x batch/256)
    #[arg(long, value_name = "X")]
    base_lr: Option<f64>,
    /// Encoder to evaluate
    #[arg(long, value_enum, default_value_t = EncoderChoice::Student)]
    encoder: EncoderChoice,
    /// Override the packed-dataset directory
    #[arg(long, value_name = "DIR")]
    data_dir: Option<PathBuf>,
}

#[derive(clap::Args)]
struct KnnArgs {
    /// Pretraining checkpoint to evaluate
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Number of neighbors
    #[arg(long, default_value_t = 200)]
    k: usize,
    /// Vote temperature
    #[arg(long, default_value_t = 0.07)]
    temperature: f64,
    /// Encoder to evaluate
    #[arg(long, value_enum, default_value_t = EncoderChoice::Student)]
    encoder: EncoderChoice,
    /// Override the packed-dataset directory
    #[arg(long, value_name = "DIR")]
    data_dir: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ExportArgs {
    /// Pretraining checkpoint to export from
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Split to export: train, test, or pretrain
    #[arg(long)]
    split: String,
    /// Encoder whose backbone features are exported
    #[arg(long, value_enum, default_value_t = EncoderChoice::Student)]
    encoder: EncoderChoice,
    /// Override the packed-dataset directory
    #[arg(long, value_name = "DIR")]
    data_dir: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct SweepArgs {
    /// Sweep specification file (TOML)
    #[arg(long, value_name = "PATH")]
    spec: PathBuf,
    /// Maximum concurrent rows (independent child processes)
    #[arg(long, default_value_t = 1, value_name = "N")]
    parallel: usize,
}

#[derive(clap::Args)]
pub struct SweepRowArgs {
    #[arg(long, value_name = "PATH")]
    spec: PathBuf,
    #[arg(long, value_name = "DIR")]
    sweep_dir: PathBuf,
    #[arg(long)]
    index: usize,
}

#[derive(clap::Args)]
pub struct PlotArgs {
    /// What to render
    #[arg(long, value_enum)]
    kind: plot::PlotKind,
    /// Metrics JSONL (curves) or sweep results CSV (sweep_bar)
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("{}", e.to_json());
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest(ref args) => cmd_ingest(args),
        Command::Pretrain(ref args) => cmd_pretrain(&cli, args),
        Command::LinearEval(ref args) => cmd_linear_eval(&cli, args),
        Command::Knn(ref args) => cmd_knn(&cli, args),
        Command::ExportEmbeddings(ref args) => cmd_export(&cli, args),
        Command::Sweep(ref args) => sweep::cmd_sweep(&cli.out, args),
        Command::SweepRow(ref args) => sweep::cmd_sweep_row(args),
        Command::Plot(ref args) => plot::cmd_plot(&cli.out, args),
    }
}

fn parse_dataset(s: &str) -> Result<DatasetName, CliError> {
    s.parse::<DatasetName>().map_err(usage)
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        "pretrain" => Ok(Split::Pretrain),
        other => Err(usage(format!(
            "unknown split '{other}' (expected train, test, or pretrain)"
        ))),
    }
}

fn parse_teacher_augmentation(s: &str) -> Result<TeacherAugmentation, CliError> {
    match s {
        "weak" => Ok(TeacherAugmentation::Weak),
        "contrastive" => Ok(TeacherAugmentation::Contrastive),
        other => Err(usage(format!(
            "unknown teacher augmentation '{other}' (expected weak or contrastive)"
        ))),
    }
}

fn parse_objective(s: &str) -> Result<Objective, CliError> {
    match s {
        "ressl" => Ok(Objective::Ressl),
        "info_nce" => Ok(Objective::InfoNce),
        "byol_style" => Ok(Objective::ByolStyle),
        other => Err(usage(format!(
            "unknown objective '{other}' (expected ressl, info_nce, or byol_style)"
        ))),
    }
}

pub(crate) fn print_json<T: Serialize>(value: &T) {
    match serde_json::to_string_pretty(value) {
        Ok(s) => println!("{s}"),
        Err(e) => eprintln!("{{\"error\":\"format\",\"message\":\"{e}\"}}"),
    }
}

fn cmd_ingest(args: &IngestArgs) -> Result<(), CliError> {
    let dataset = parse_dataset(&args.dataset)?;
    let options = IngestOptions {
        expected_archive_sha256: args.expected_sha256.clone(),
    };
    let manifests = ingest(dataset, &args.source, &args.data_dir, &options)?;
    let summary: Vec<serde_json::Value> = manifests
        .iter()
        .map(|m| {
            serde_json::json!({
                "split": m.split,
                "count": m.count,
                "unlabeled": m.unlabeled_count,
                "sha256": m.packed_sha256,
            })
        })
        .collect();
    print_json(&serde_json::json!({ "dataset": dataset.as_str(), "splits": summary }));
    Ok(())
}

/// Loads the config file and applies flag overrides; validation failures
/// are usage errors.
fn effective_config(cli: &Cli, args: &PretrainArgs) -> Result<ExperimentConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| usage("pretrain requires --config PATH"))?;
    let mut cfg = ExperimentConfig::load_toml(path).map_err(usage)?;
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.tau_t {
        cfg.teacher_temperature = v;
    }
    if let Some(v) = args.tau_s {
        cfg.student_temperature = v;
    }
    if let Some(v) = args.queue_capacity {
        cfg.queue_capacity = Some(v);
    }
    if let Some(v) = args.ema_momentum {
        cfg.ema_momentum = Some(v);
    }
    if let Some(v) = &args.teacher_augmentation {
        cfg.teacher_augmentation = parse_teacher_augmentation(v)?;
    }
    if let Some(v) = &args.objective {
        cfg.objective = parse_objective(v)?;
    }
    if let Some(v) = args.knn_monitor_every {
        cfg.knn_monitor_every = v;
    }
    if let Some(v) = &args.data_dir {
        cfg.data_dir = v.clone();
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn cmd_pretrain(cli: &Cli, args: &PretrainArgs) -> Result<(), CliError> {
    let cfg = effective_config(cli, args)?;
    let out = cli
        .out
        .as_ref()
        .ok_or_else(|| usage("pretrain requires --out DIR"))?;
    let report =
        dispatch_precision!(cfg.precision, S => train::<S>(&cfg, out, cli.resume))?;
    print_json(&report);
    Ok(())
}

/// Context shared by the evaluation commands: the checkpoint's stored
/// configuration plus the dataset statistics the encoder was trained on.
struct EvalContext {
    config: ExperimentConfig,
    data_dir: PathBuf,
    stats: ressl_core::data::NormStats,
    view_side: usize,
}

fn eval_context(
    checkpoint: &Path,
    data_dir_override: &Option<PathBuf>,
) -> Result<EvalContext, CliError> {
    let meta = load_checkpoint_meta(checkpoint)?;
    let data_dir = data_dir_override
        .clone()
        .unwrap_or_else(|| meta.config.data_dir.clone());
    let (_, pretrain_manifest) = open_split(&data_dir, meta.config.dataset, Split::Pretrain)?;
    Ok(EvalContext {
        view_side: meta.config.resolved_view_side(),
        stats: pretrain_manifest.stats,
        data_dir,
        config: meta.config,
    })
}

fn pick_encoder<S: Scalar>(
    pair: StudentTeacherPair<S>,
    which: EncoderChoice,
) -> ressl_core::model::EncoderNet<S> {
    match which {
        EncoderChoice::Student => pair.student,
        EncoderChoice::Teacher => pair.teacher,
    }
}

fn cmd_linear_eval(cli: &Cli, args: &EvalArgs) -> Result<(), CliError> {
    let ctx = eval_context(&args.checkpoint, &args.data_dir)?;
    let mut ecfg = LinearEvalConfig::default();
    if let Some(v) = args.epochs {
        // Keep the decay points at the same fractions of the run that
        // the defaults occupy, so shorter probes stay valid.
        let default_epochs = ecfg.epochs;
        ecfg.milestones = ecfg
            .milestones
            .iter()
            .map(|&m| m * v / default_epochs)
            .filter(|&m| m > 0)
            .collect();
        ecfg.milestones.dedup();
        ecfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        ecfg.batch_size = v;
    }
    if args.base_lr.is_some() {
        ecfg.base_lr = args.base_lr;
    }
    if let Some(v) = cli.seed {
        ecfg.seed = v;
    }
    ecfg.validate().map_err(usage)?;

    let mut metrics = match &cli.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
            Some(MetricsWriter::append(
                &dir.join("linear_eval_metrics.jsonl"),
            )?)
        }
        None => None,
    };
    let report = dispatch_precision!(ctx.config.precision, S => {
        let (_, pair) = load_encoder_pair::<S>(&args.checkpoint)?;
        let mut encoder = pick_encoder(pair, args.encoder);
        linear_eval(
            &mut encoder,
            ctx.config.dataset,
            &ctx.data_dir,
            &ctx.stats,
            ctx.view_side,
            &ecfg,
            ctx.config.hash(),
            args.checkpoint.display().to_string(),
            metrics.as_mut(),
        )
    })?;
    if let Some(dir) = &cli.out {
        report.save(&dir.join("eval_report.json"))?;
    }
    print_json(&report);
    Ok(())
}

fn cmd_knn(cli: &Cli, args: &KnnArgs) -> Result<(), CliError> {
    let ctx = eval_context(&args.checkpoint, &args.data_dir)?;
    let top1 = dispatch_precision!(ctx.config.precision, S => {
        let (_, pair) = load_encoder_pair::<S>(&args.checkpoint)?;
        let mut encoder = pick_encoder(pair, args.encoder);
        knn_eval(
            &mut encoder,
            ctx.config.dataset,
            &ctx.data_dir,
            &ctx.stats,
            ctx.view_side,
            args.k,
            args.temperature,
            ctx.config.batch_size,
        )
    })?;
    let summary = serde_json::json!({
        "top1": top1,
        "k": args.k,
        "temperature": args.temperature,
        "encoder": args.encoder,
        "config_hash": ctx.config.hash(),
        "checkpoint": args.checkpoint.display().to_string(),
    });
    print_json(&summary);
    if let Some(dir) = &cli.out {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let path = dir.join("knn_report.json");
        std::fs::write(&path, format!("{summary:#}\n")).map_err(|e| CoreError::io(&path, e))?;
    }
    Ok(())
}

fn cmd_export(cli: &Cli, args: &ExportArgs) -> Result<(), CliError> {
    let split = parse_split(&args.split)?;
    let ctx = eval_context(&args.checkpoint, &args.data_dir)?;
    let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir).map_err(|e| CoreError::io(&out_dir, e))?;
    let out_path = out_dir.join(format!(
        "embeddings_{}_{}.emb",
        ctx.config.dataset.as_str(),
        args.split
    ));
    let (count, dim) = dispatch_precision!(ctx.config.precision, S => {
        let (_, pair) = load_encoder_pair::<S>(&args.checkpoint)?;
        let mut encoder = pick_encoder(pair, args.encoder);
        let (dataset, _) = open_split(&ctx.data_dir, ctx.config.dataset, split)?;
        export_embeddings(
            &mut encoder,
            &dataset,
            &ctx.stats,
            ctx.view_side,
            ctx.config.batch_size,
            &out_path,
        )
    })?;
    print_json(&serde_json::json!({
        "path": out_path.display().to_string(),
        "count": count,
        "dim": dim,
        "encoder": args.encoder,
    }));
    Ok(())
}
