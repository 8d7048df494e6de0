//! One-axis sweep driver: derives one configuration per axis value,
//! pretrains and evaluates each sequentially (or in child processes),
//! records per-row outcomes durably, and aggregates a CSV plus a
//! rendered text table ordered by axis value.

use crate::{dispatch_precision, usage, CliError, EncoderChoice, SweepArgs, SweepRowArgs};
use ressl_core::config::{ExperimentConfig, Precision, TeacherAugmentation};
use ressl_core::data::{open_split, Split};
use ressl_core::error::Error as CoreError;
use ressl_core::eval::{knn_eval, linear_eval, LinearEvalConfig};
use ressl_core::trainer::{load_encoder_pair, train, KNN_MONITOR_K, KNN_MONITOR_TEMPERATURE};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    TauT,
    QueueCapacity,
    TeacherAugmentation,
}

impl SweepAxis {
    fn as_str(self) -> &'static str {
        match self {
            SweepAxis::TauT => "tau_t",
            SweepAxis::QueueCapacity => "queue_capacity",
            SweepAxis::TeacherAugmentation => "teacher_augmentation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalProtocol {
    #[default]
    Linear,
    Knn,
}

impl EvalProtocol {
    fn as_str(self) -> &'static str {
        match self {
            EvalProtocol::Linear => "linear",
            EvalProtocol::Knn => "knn",
        }
    }
}

/// A sweep: one base configuration, one axis, several values, a common
/// epoch budget, and the evaluation protocol applied to every run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<toml::Value>,
    pub budget_epochs: usize,
    #[serde(default)]
    pub eval: EvalProtocol,
    #[serde(default)]
    pub eval_encoder: EncoderChoice,
    /// Classifier epochs for the linear protocol (default 100).
    #[serde(default)]
    pub eval_epochs: Option<usize>,
    pub base: ExperimentConfig,
}

/// One axis value made concrete: a display label and, when the value is
/// numeric, a sort key.
#[derive(Debug, Clone)]
pub struct AxisValue {
    pub label: String,
    pub numeric: Option<f64>,
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read sweep spec {}: {e}", path.display())))?;
        let spec: SweepSpec = toml::from_str(&text)
            .map_err(|e| usage(format!("invalid sweep spec {}: {e}", path.display())))?;
        if spec.values.is_empty() {
            return Err(usage("sweep spec needs at least one value"));
        }
        if spec.budget_epochs == 0 {
            return Err(usage("budget_epochs must be positive"));
        }
        Ok(spec)
    }

    /// The configuration for row `index`: the base with the axis value
    /// applied and the epoch budget installed.
    pub fn derived(&self, index: usize) -> Result<(ExperimentConfig, AxisValue), CliError> {
        let value = self
            .values
            .get(index)
            .ok_or_else(|| usage(format!("row index {index} out of range")))?;
        let mut cfg = self.base.clone();
        cfg.epochs = self.budget_epochs;
        let axis_value = apply_axis(&mut cfg, self.axis, value)?;
        cfg.validate()
            .map_err(|e| usage(format!("row {index} ({}): {e}", axis_value.label)))?;
        Ok((cfg, axis_value))
    }
}

fn apply_axis(
    cfg: &mut ExperimentConfig,
    axis: SweepAxis,
    value: &toml::Value,
) -> Result<AxisValue, CliError> {
    match axis {
        SweepAxis::TauT => {
            let v = value
                .as_float()
                .or_else(|| value.as_integer().map(|i| i as f64))
                .ok_or_else(|| usage(format!("tau_t value must be a number, got {value}")))?;
            cfg.teacher_temperature = v;
            Ok(AxisValue {
                label: format!("{v}"),
                numeric: Some(v),
            })
        }
        SweepAxis::QueueCapacity => {
            let v = value
                .as_integer()
                .filter(|&i| i > 0)
                .ok_or_else(|| {
                    usage(format!("queue_capacity value must be a positive integer, got {value}"))
                })?;
            cfg.queue_capacity = Some(v as usize);
            Ok(AxisValue {
                label: format!("{v}"),
                numeric: Some(v as f64),
            })
        }
        SweepAxis::TeacherAugmentation => {
            let s = value.as_str().ok_or_else(|| {
                usage(format!("teacher_augmentation value must be a string, got {value}"))
            })?;
            cfg.teacher_augmentation = match s {
                "weak" => TeacherAugmentation::Weak,
                "contrastive" => TeacherAugmentation::Contrastive,
                other => {
                    return Err(usage(format!(
                        "unknown teacher augmentation '{other}' (expected weak or contrastive)"
                    )))
                }
            };
            Ok(AxisValue {
                label: s.to_string(),
                numeric: None,
            })
        }
    }
}

/// Durable outcome of one row, written as `row.json` in the row's
/// directory so interrupted sweeps resume without repeating work.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RowRecord {
    pub index: usize,
    pub axis: String,
    pub value: String,
    pub numeric_value: Option<f64>,
    pub config_hash: String,
    pub status: String,
    pub top1: Option<f64>,
    pub error: Option<String>,
}

impl RowRecord {
    fn path(row_dir: &Path) -> PathBuf {
        row_dir.join("row.json")
    }

    fn load(row_dir: &Path) -> Option<Self> {
        let text = std::fs::read_to_string(Self::path(row_dir)).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn save(&self, row_dir: &Path) -> Result<(), CoreError> {
        let path = Self::path(row_dir);
        let text = serde_json::to_string_pretty(self).map_err(|e| CoreError::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        std::fs::write(&path, text).map_err(|e| CoreError::io(&path, e))
    }

    fn ok(&self) -> bool {
        self.status == "ok"
    }
}

fn row_dir_name(spec: &SweepSpec, index: usize, value: &AxisValue) -> String {
    let safe: String = value
        .label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '-' })
        .collect();
    format!("row-{index:02}-{}-{safe}", spec.axis.as_str())
}

/// Pretrains and evaluates one row; all failures are recorded in the
/// returned record rather than propagated, so the sweep continues.
pub fn run_row(spec: &SweepSpec, sweep_dir: &Path, index: usize) -> Result<RowRecord, CliError> {
    let (cfg, value) = spec.derived(index)?;
    let row_dir = sweep_dir.join(row_dir_name(spec, index, &value));
    if let Some(prev) = RowRecord::load(&row_dir) {
        if prev.ok() {
            return Ok(prev);
        }
    }
    std::fs::create_dir_all(&row_dir).map_err(|e| CoreError::io(&row_dir, e))?;
    let outcome = pretrain_and_eval(spec, &cfg, &row_dir);
    let record = match outcome {
        Ok(top1) => RowRecord {
            index,
            axis: spec.axis.as_str().to_string(),
            value: value.label.clone(),
            numeric_value: value.numeric,
            config_hash: cfg.hash(),
            status: "ok".to_string(),
            top1: Some(top1),
            error: None,
        },
        Err(e) => RowRecord {
            index,
            axis: spec.axis.as_str().to_string(),
            value: value.label.clone(),
            numeric_value: value.numeric,
            config_hash: cfg.hash(),
            status: "failed".to_string(),
            top1: None,
            error: Some(e.to_string()),
        },
    };
    record.save(&row_dir)?;
    Ok(record)
}

fn pretrain_and_eval(
    spec: &SweepSpec,
    cfg: &ExperimentConfig,
    row_dir: &Path,
) -> Result<f64, CoreError> {
    // Rows always resume: an interrupted row continues from its last
    // checkpoint on the next sweep invocation.
    let report = dispatch_precision!(cfg.precision, S => train::<S>(cfg, row_dir, true))?;
    let checkpoint = PathBuf::from(&report.final_checkpoint);
    let (_, pretrain_manifest) = open_split(&cfg.data_dir, cfg.dataset, Split::Pretrain)?;
    let view_side = cfg.resolved_view_side();
    dispatch_precision!(cfg.precision, S => {
        let (_, pair) = load_encoder_pair::<S>(&checkpoint)?;
        let mut encoder = match spec.eval_encoder {
            EncoderChoice::Student => pair.student,
            EncoderChoice::Teacher => pair.teacher,
        };
        match spec.eval {
            EvalProtocol::Knn => {
                let (train_split, _) = open_split(&cfg.data_dir, cfg.dataset, Split::Train)?;
                let k = KNN_MONITOR_K.min(train_split.count());
                drop(train_split);
                knn_eval(
                    &mut encoder,
                    cfg.dataset,
                    &cfg.data_dir,
                    &pretrain_manifest.stats,
                    view_side,
                    k,
                    KNN_MONITOR_TEMPERATURE,
                    cfg.batch_size,
                )
            }
            EvalProtocol::Linear => {
                let mut ecfg = LinearEvalConfig {
                    seed: cfg.seed,
                    ..LinearEvalConfig::default()
                };
                if let Some(epochs) = spec.eval_epochs {
                    ecfg.epochs = epochs;
                }
                let report = linear_eval(
                    &mut encoder,
                    cfg.dataset,
                    &cfg.data_dir,
                    &pretrain_manifest.stats,
                    view_side,
                    &ecfg,
                    cfg.hash(),
                    checkpoint.display().to_string(),
                    None,
                )?;
                report.save(&row_dir.join("eval_report.json"))?;
                Ok(report.top1)
            }
        }
    })
}

pub fn cmd_sweep(out: &Option<PathBuf>, args: &SweepArgs) -> Result<(), CliError> {
    let spec = SweepSpec::load(&args.spec)?;
    let sweep_dir = out
        .as_ref()
        .ok_or_else(|| usage("sweep requires --out DIR"))?;
    // Surface configuration problems in any row before running the first.
    for i in 0..spec.values.len() {
        spec.derived(i)?;
    }
    std::fs::create_dir_all(sweep_dir).map_err(|e| CoreError::io(sweep_dir, e))?;
    let spec_copy = sweep_dir.join("sweep_spec.toml");
    let spec_text = toml::to_string_pretty(&spec)
        .map_err(|e| usage(format!("cannot serialize sweep spec: {e}")))?;
    std::fs::write(&spec_copy, spec_text).map_err(|e| CoreError::io(&spec_copy, e))?;

    let records = if args.parallel <= 1 {
        let mut records = Vec::with_capacity(spec.values.len());
        for i in 0..spec.values.len() {
            log::info!("sweep row {i} of {} starting", spec.values.len());
            records.push(run_row(&spec, sweep_dir, i)?);
        }
        records
    } else {
        run_rows_in_children(&spec, &spec_copy, sweep_dir, args.parallel)?
    };

    let (csv_path, table_path, table) = aggregate(&spec, &records, sweep_dir)?;
    println!("{table}");
    log::info!(
        "sweep results written to {} and {}",
        csv_path.display(),
        table_path.display()
    );
    if records.iter().all(|r| !r.ok()) {
        return Err(CliError::Runtime(CoreError::Training(
            "every sweep row failed; see the per-row records".to_string(),
        )));
    }
    Ok(())
}

/// Runs rows as independent child processes, at most `parallel` at once.
fn run_rows_in_children(
    spec: &SweepSpec,
    spec_path: &Path,
    sweep_dir: &Path,
    parallel: usize,
) -> Result<Vec<RowRecord>, CliError> {
    let exe = std::env::current_exe()
        .map_err(|e| CliError::Runtime(CoreError::io("current-exe", e)))?;
    let total = spec.values.len();
    let mut next = 0usize;
    let mut active: Vec<(usize, std::process::Child)> = Vec::new();
    while next < total || !active.is_empty() {
        while next < total && active.len() < parallel {
            let child = std::process::Command::new(&exe)
                .arg("sweep-row")
                .arg("--spec")
                .arg(spec_path)
                .arg("--sweep-dir")
                .arg(sweep_dir)
                .arg("--index")
                .arg(next.to_string())
                .spawn()
                .map_err(|e| CliError::Runtime(CoreError::io(&exe, e)))?;
            log::info!("sweep row {next} of {total} started (pid {})", child.id());
            active.push((next, child));
            next += 1;
        }
        let mut still_active = Vec::new();
        for (idx, mut child) in active {
            match child.try_wait() {
                Ok(Some(status)) => {
                    log::info!("sweep row {idx} exited with {status}");
                }
                Ok(None) => still_active.push((idx, child)),
                Err(e) => {
                    log::warn!("sweep row {idx}: wait failed: {e}");
                }
            }
        }
        active = still_active;
        if !active.is_empty() {
            std::thread::sleep(std::time::Duration::from_millis(200));
        }
    }
    // Outcomes live in the row records the children wrote.
    let mut records = Vec::with_capacity(total);
    for i in 0..total {
        let (_, value) = spec.derived(i)?;
        let row_dir = sweep_dir.join(row_dir_name(spec, i, &value));
        records.push(RowRecord::load(&row_dir).unwrap_or(RowRecord {
            index: i,
            axis: spec.axis.as_str().to_string(),
            value: value.label,
            numeric_value: value.numeric,
            config_hash: String::new(),
            status: "failed".to_string(),
            top1: None,
            error: Some("row process terminated without writing a record".to_string()),
        }));
    }
    Ok(records)
}

pub fn cmd_sweep_row(args: &SweepRowArgs) -> Result<(), CliError> {
    let spec = SweepSpec::load(&args.spec)?;
    let record = run_row(&spec, &args.sweep_dir, args.index)?;
    if record.ok() {
        Ok(())
    } else {
        Err(CliError::Runtime(CoreError::Training(
            record.error.unwrap_or_else(|| "row failed".to_string()),
        )))
    }
}

/// Writes `results.csv` and `results.txt`, rows ordered by axis value
/// (numeric axes ascending, string axes in spec order). Returns the two
/// paths and the rendered table.
fn aggregate(
    spec: &SweepSpec,
    records: &[RowRecord],
    sweep_dir: &Path,
) -> Result<(PathBuf, PathBuf, String), CliError> {
    let mut ordered: Vec<&RowRecord> = records.iter().collect();
    ordered.sort_by(|a, b| match (a.numeric_value, b.numeric_value) {
        (Some(x), Some(y)) => x.partial_cmp(&y).unwrap_or(std::cmp::Ordering::Equal),
        _ => a.index.cmp(&b.index),
    });

    let mut csv = String::from("axis,value,top1,status,config_hash,error\n");
    for r in &ordered {
        let top1 = r.top1.map(|v| format!("{v:.4}")).unwrap_or_default();
        let error = r
            .error
            .as_deref()
            .unwrap_or("")
            .replace([',', '\n'], ";");
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.axis, r.value, top1, r.status, r.config_hash, error
        ));
    }
    let csv_path = sweep_dir.join("results.csv");
    std::fs::write(&csv_path, &csv).map_err(|e| CoreError::io(&csv_path, e))?;

    let mut table = format!(
        "sweep axis={} eval={} budget_epochs={}\n{:<16} {:>8}  {:<8} {:<16}  error\n",
        spec.axis.as_str(),
        spec.eval.as_str(),
        spec.budget_epochs,
        "value",
        "top1",
        "status",
        "config_hash"
    );
    for r in &ordered {
        let top1 = r
            .top1
            .map(|v| format!("{v:8.2}"))
            .unwrap_or_else(|| format!("{:>8}", "-"));
        table.push_str(&format!(
            "{:<16} {}  {:<8} {:<16}  {}\n",
            r.value,
            top1,
            r.status,
            r.config_hash,
            r.error.as_deref().unwrap_or("")
        ));
    }
    let table_path = sweep_dir.join("results.txt");
    std::fs::write(&table_path, &table).map_err(|e| CoreError::io(&table_path, e))?;
    Ok((csv_path, table_path, table))
}
