//! Experiment orchestration for each CLI subcommand.
//!
//! Every subcommand writes into its own directory. On error the directory
//! keeps whatever was already written plus a `FAILED` marker holding the
//! message.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use hybridfit_core::compound::{
    build_and_fit_lower, forgetting_metrics, train_sequence, CompoundModel, LowerMode, LowerTier, TaskStream,
};
use hybridfit_core::datapath::{
    count_direct_ops, cost_report_for, emulate_direct_solve, CostReport, FixedPointFormat, Workload,
};
use hybridfit_core::lower_tier::{accumulate_streaming, one_hot, predict, NormalEqAccumulator};
use hybridfit_core::Error as CoreError;
use serde::Serialize;

use crate::config::{DataSource, ExperimentConfig};
use crate::data::{load_csv, write_dataset_csv, LabelMapping};
use crate::error::{HarnessError, InModule, Result};
use crate::report::{self, write_json, write_text};
use crate::streams::{gen_task_stream, stream_from_dataset, StreamParams};

pub const LABEL_MAPPING_JSON: &str = "label_mapping.json";
pub const SUMMARY_JSON: &str = "summary.json";
pub const EMULATION_JSON: &str = "emulation_report.json";
pub const FIT_REPORT_JSON: &str = "fit_report.json";

/// Output directory of one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
}

impl RunArtifacts {
    pub fn path(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }
}

/// Timestamped log written to `log.txt` and, unless quiet, to stderr.
pub struct RunLog {
    file: File,
    quiet: bool,
}

impl RunLog {
    pub fn create(dir: &Path, quiet: bool) -> Result<Self> {
        let path = dir.join(report::LOG_TXT);
        let file = File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
        Ok(Self { file, quiet })
    }

    pub fn line(&mut self, msg: impl AsRef<str>) {
        let stamp = chrono::Local::now().format("%Y-%m-%dT%H:%M:%S%.3f");
        let line = format!("[{stamp}] {}", msg.as_ref());
        // Logging is best effort; a full disk shows up on the next artifact write.
        let _ = writeln!(self.file, "{line}");
        if !self.quiet {
            eprintln!("{line}");
        }
    }
}

/// A config with data-dependent fields filled in, plus its task stream.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub stream: TaskStream,
    pub labels: Option<LabelMapping>,
}

/// Loads or generates the task stream. For CSV input, `d_in` and `k` are
/// taken from the file.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let mut config = cfg.clone();
    match &cfg.data_source {
        DataSource::Synthetic => {
            let stream = gen_task_stream(&StreamParams::from_config(&config))?;
            Ok(Prepared {
                config,
                stream,
                labels: None,
            })
        }
        DataSource::Csv { path, label_column } => {
            let loaded = load_csv(path, label_column)?;
            config.d_in = loaded.dataset.d_in();
            config.k = loaded.labels.classes.len();
            config.validate()?;
            let stream = stream_from_dataset(&loaded.dataset, config.k, &StreamParams::from_config(&config))?;
            Ok(Prepared {
                config,
                stream,
                labels: Some(loaded.labels),
            })
        }
    }
}

/// Runs `body` inside `dir`, leaving a `FAILED` marker if it errors.
fn with_run_dir<T>(dir: &Path, quiet: bool, body: impl FnOnce(&mut RunLog) -> Result<T>) -> Result<T> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let _ = fs::remove_file(dir.join(report::FAILED_MARKER));
    let mut log = RunLog::create(dir, quiet)?;
    let out = body(&mut log);
    if let Err(e) = &out {
        log.line(format!("failed: {e}"));
        write_text(&dir.join(report::FAILED_MARKER), &format!("{e}\n"))?;
    }
    out
}

fn write_prepared(dir: &Path, prep: &Prepared, log: &mut RunLog) -> Result<()> {
    write_text(&dir.join(report::RESOLVED_CONFIG_JSON), &prep.config.to_json())?;
    if let Some(labels) = &prep.labels {
        write_json(&dir.join(LABEL_MAPPING_JSON), labels)?;
    }
    let c = &prep.config;
    log.line(format!(
        "stream {:?}: {} tasks, d_in={}, k={}, seed={}",
        prep.stream.kind(),
        prep.stream.len(),
        c.d_in,
        c.k,
        c.seed
    ));
    Ok(())
}

/// Normal equations of task 0's training split under the model's features.
fn task0_accumulator(model: &CompoundModel, stream: &TaskStream, chunk_rows: usize) -> Result<NormalEqAccumulator> {
    let train = &stream.tasks()[0].train;
    let targets = one_hot(&train.y, stream.num_classes()).in_module("lower_tier")?;
    accumulate_streaming(model.feature_map(), &train.x, &targets, chunk_rows).in_module("lower_tier")
}

fn workload(cfg: &ExperimentConfig, stream: &TaskStream) -> Workload {
    Workload {
        n: stream.tasks()[0].train.len(),
        d_in: cfg.d_in,
        h: cfg.h,
        k: cfg.k,
        epochs: cfg.epochs_per_task,
        head: cfg.head_shape(),
        chunk_rows: cfg.chunk_rows,
    }
}

/// Outcome of the fixed-point solve. A pivot that quantizes to zero or
/// below is a legitimate finding for a given format, so it is reported
/// rather than treated as a run failure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmulationSummary {
    pub schema_version: u32,
    pub format: FixedPointFormat,
    pub status: String,
    pub failed_pivot: Option<usize>,
    pub max_abs_err_vs_float: Option<f64>,
    pub saturations: Option<u64>,
    pub ops: Option<u64>,
    /// Factor plus solve count from the closed-form tally.
    pub expected_ops: u64,
}

pub fn emulate_summary(acc: &NormalEqAccumulator, cfg: &ExperimentConfig, n: usize) -> Result<EmulationSummary> {
    let counts = count_direct_ops(n, cfg.d_in, cfg.h, cfg.k).in_module("datapath")?;
    let mut s = EmulationSummary {
        schema_version: crate::config::SCHEMA_VERSION,
        format: cfg.fixed_format,
        status: "ok".into(),
        failed_pivot: None,
        max_abs_err_vs_float: None,
        saturations: None,
        ops: None,
        expected_ops: counts.solver_macs(),
    };
    match emulate_direct_solve(acc, cfg.lambda_ridge, cfg.fixed_format) {
        Ok(r) => {
            s.max_abs_err_vs_float = Some(r.max_abs_err_vs_float);
            s.saturations = Some(r.saturations);
            s.ops = Some(r.ops);
        }
        Err(CoreError::NotPositiveDefiniteQuantized { pivot }) => {
            s.status = "not_positive_definite_after_quantization".into();
            s.failed_pivot = Some(pivot);
        }
        Err(e) => return Err(e).in_module("datapath"),
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct Summary {
    schema_version: u32,
    avg_final_accuracy: f64,
    forgetting: Vec<f64>,
    backward_transfer: f64,
    lower_tier_frozen: bool,
}

/// Full pipeline: fit the lower tier, train the head over the stream,
/// count ops, emulate the fixed-point solve and write every artifact.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path, quiet: bool) -> Result<RunArtifacts> {
    with_run_dir(dir, quiet, |log| {
        let prep = prepare(cfg)?;
        write_prepared(dir, &prep, log)?;
        let c = &prep.config;

        let mut model = build_and_fit_lower(&prep.stream, &c.lower_config()).in_module("compound")?;
        let frozen = model.lower_tier_bytes();
        log.line(format!("lower tier fitted on {} rows", prep.stream.tasks()[0].train.len()));

        let outcome = train_sequence(&mut model, &prep.stream, &c.train_config()).in_module("compound")?;
        let lower_tier_frozen = model.lower_tier_bytes() == frozen;
        if !lower_tier_frozen {
            return Err(CoreError::State("lower tier changed during head training".into())).in_module("compound");
        }
        let metrics = forgetting_metrics(&outcome.accuracy).in_module("compound")?;
        log.line(format!(
            "avg final accuracy {:.4}, backward transfer {:.4}",
            metrics.avg_final_accuracy, metrics.backward_transfer
        ));

        let work = workload(c, &prep.stream);
        let cost = cost_report_for(&work, &c.cost_model).in_module("datapath")?;
        let acc = task0_accumulator(&model, &prep.stream, c.chunk_rows)?;
        let emu = emulate_summary(&acc, c, work.n)?;
        log.line(format!("fixed-point solve: {}", emu.status));

        report::emit_reports(dir, &outcome.epochs, &outcome.accuracy, &cost)?;
        write_json(&dir.join(EMULATION_JSON), &emu)?;
        write_json(
            &dir.join(SUMMARY_JSON),
            &Summary {
                schema_version: crate::config::SCHEMA_VERSION,
                avg_final_accuracy: metrics.avg_final_accuracy,
                forgetting: metrics.forgetting,
                backward_transfer: metrics.backward_transfer,
                lower_tier_frozen,
            },
        )?;
        log.line("done");
        Ok(RunArtifacts {
            run_dir: dir.to_path_buf(),
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub schema_version: u32,
    pub train_rows: usize,
    pub train_residual: f64,
    pub train_accuracy: f64,
    /// Ridge-readout accuracy on each task's test split.
    pub test_accuracy: Vec<f64>,
}

fn ridge_accuracy(
    map: &hybridfit_core::lower_tier::FeatureMap,
    sol: &hybridfit_core::lower_tier::RidgeSolution,
    data: &hybridfit_core::compound::Dataset,
) -> Result<f64> {
    let p = predict(map, sol, &data.x).in_module("lower_tier")?;
    let hits = p.labels.iter().zip(&data.y).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Lower tier only: closed-form ridge fit on task 0.
pub fn fit_direct(cfg: &ExperimentConfig, dir: &Path, quiet: bool) -> Result<RunArtifacts> {
    with_run_dir(dir, quiet, |log| {
        let prep = prepare(cfg)?;
        write_prepared(dir, &prep, log)?;
        let c = &prep.config;
        let mut lower = c.lower_config();
        lower.mode = LowerMode::Ridge;
        let model = build_and_fit_lower(&prep.stream, &lower).in_module("compound")?;
        let mut sol = match model.lower() {
            LowerTier::Ridge(sol) => sol.clone(),
            LowerTier::PassThrough => unreachable!("ridge mode requested"),
        };
        let train = &prep.stream.tasks()[0].train;
        let phi = model.feature_map().apply(&train.x).in_module("lower_tier")?;
        let targets = one_hot(&train.y, c.k).in_module("lower_tier")?;
        let residual = sol.attach_residual(&phi, &targets).in_module("lower_tier")?;
        let fit = FitReport {
            schema_version: crate::config::SCHEMA_VERSION,
            train_rows: train.len(),
            train_residual: residual,
            train_accuracy: ridge_accuracy(model.feature_map(), &sol, train)?,
            test_accuracy: prep
                .stream
                .tasks()
                .iter()
                .map(|t| ridge_accuracy(model.feature_map(), &sol, &t.test))
                .collect::<Result<_>>()?,
        };
        log.line(format!("train residual {:.6}, train accuracy {:.4}", fit.train_residual, fit.train_accuracy));
        write_json(&dir.join(FIT_REPORT_JSON), &fit)?;
        log.line("done");
        Ok(RunArtifacts {
            run_dir: dir.to_path_buf(),
        })
    })
}

/// Cost report and fixed-point emulation only; no head training.
pub fn emulate(cfg: &ExperimentConfig, dir: &Path, quiet: bool) -> Result<RunArtifacts> {
    with_run_dir(dir, quiet, |log| {
        let prep = prepare(cfg)?;
        write_prepared(dir, &prep, log)?;
        let c = &prep.config;
        let model = build_and_fit_lower(&prep.stream, &c.lower_config()).in_module("compound")?;
        let work = workload(c, &prep.stream);
        let cost: CostReport = cost_report_for(&work, &c.cost_model).in_module("datapath")?;
        let acc = task0_accumulator(&model, &prep.stream, c.chunk_rows)?;
        let emu = emulate_summary(&acc, c, work.n)?;
        log.line(format!(
            "direct {} MACs, sgd {} MACs, crossover at {} epochs; fixed-point solve: {}",
            cost.direct_macs, cost.sgd_macs, cost.crossover_epochs, emu.status
        ));
        write_json(&dir.join(report::COST_REPORT_JSON), &cost)?;
        write_json(&dir.join(EMULATION_JSON), &emu)?;
        log.line("done");
        Ok(RunArtifacts {
            run_dir: dir.to_path_buf(),
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct StreamManifest {
    schema_version: u32,
    kind: hybridfit_core::compound::StreamKind,
    tasks: Vec<TaskManifest>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct TaskManifest {
    train: String,
    test: String,
    classes: Vec<usize>,
    permutation: Option<Vec<usize>>,
}

/// Writes each task's splits as `task_<t>_train.csv` / `task_<t>_test.csv`.
pub fn gen_data(cfg: &ExperimentConfig, dir: &Path, quiet: bool) -> Result<RunArtifacts> {
    with_run_dir(dir, quiet, |log| {
        let prep = prepare(cfg)?;
        write_prepared(dir, &prep, log)?;
        let mut tasks = Vec::new();
        for (t, task) in prep.stream.tasks().iter().enumerate() {
            let train = format!("task_{t}_train.csv");
            let test = format!("task_{t}_test.csv");
            write_dataset_csv(&dir.join(&train), &task.train)?;
            write_dataset_csv(&dir.join(&test), &task.test)?;
            tasks.push(TaskManifest {
                train,
                test,
                classes: prep.stream.classes_of(t),
                permutation: task.permutation.clone(),
            });
        }
        write_json(
            &dir.join("stream.json"),
            &StreamManifest {
                schema_version: crate::config::SCHEMA_VERSION,
                kind: prep.stream.kind(),
                tasks,
            },
        )?;
        log.line("done");
        Ok(RunArtifacts {
            run_dir: dir.to_path_buf(),
        })
    })
}
