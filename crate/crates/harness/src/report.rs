//! Result files.

use std::fs;
use std::path::Path;

use hybridfit_core::compound::{AccuracyMatrix, EpochRecord};
use hybridfit_core::datapath::CostReport;
use serde::Serialize;

use crate::error::{HarnessError, Result};

pub const METRICS_CSV: &str = "metrics.csv";
pub const ACCURACY_CSV: &str = "accuracy_matrix.csv";
pub const COST_REPORT_JSON: &str = "cost_report.json";
pub const RESOLVED_CONFIG_JSON: &str = "resolved_config.json";
pub const LOG_TXT: &str = "log.txt";
pub const FAILED_MARKER: &str = "FAILED";

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    write_text(path, &s)
}

/// One row per epoch: `task,epoch,train_loss,ewc_penalty,test_acc`.
pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from("task,epoch,train_loss,ewc_penalty,test_acc\n");
    for r in records {
        s.push_str(&format!("{},{},{},{},{}\n", r.task, r.epoch, r.train_loss, r.ewc_penalty, r.test_acc));
    }
    s
}

/// Row `t` holds accuracy on each task after training through task `t`.
/// The header row and first column carry task ids; unevaluated cells are
/// left empty.
pub fn accuracy_csv(acc: &AccuracyMatrix) -> String {
    let n = acc.size();
    let mut s = String::from("after_task");
    for tau in 0..n {
        s.push_str(&format!(",{tau}"));
    }
    s.push('\n');
    for t in 0..n {
        s.push_str(&t.to_string());
        for tau in 0..n {
            s.push(',');
            if let Some(v) = acc.get(t, tau) {
                s.push_str(&v.to_string());
            }
        }
        s.push('\n');
    }
    s
}

/// Writes the three result files of a continual run into `dir`.
pub fn emit_reports(dir: &Path, records: &[EpochRecord], acc: &AccuracyMatrix, cost: &CostReport) -> Result<()> {
    write_text(&dir.join(METRICS_CSV), &metrics_csv(records))?;
    write_text(&dir.join(ACCURACY_CSV), &accuracy_csv(acc))?;
    write_json(&dir.join(COST_REPORT_JSON), cost)
}
