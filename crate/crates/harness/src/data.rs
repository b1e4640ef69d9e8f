//! CSV ingestion and export.

use std::path::Path;

use hybridfit_core::compound::Dataset;
use hybridfit_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Original label strings, indexed by their dense class id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMapping {
    pub schema_version: u32,
    pub label_column: String,
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCsv {
    pub dataset: Dataset,
    pub feature_names: Vec<String>,
    pub labels: LabelMapping,
}

/// Reads a headed CSV. Feature columns keep header order; labels become
/// `0..k` in order of first appearance. Rows are numbered from the header
/// (row 1), so the first data row is row 2.
pub fn load_csv(path: &Path, label_column: &str) -> Result<LoadedCsv> {
    let err = |reason: String| HarnessError::Data {
        path: path.to_path_buf(),
        reason,
    };
    if !path.is_file() {
        return Err(err("file not found".into()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| err(e.to_string()))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| err(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| err(format!("label column `{label_column}` not in header")))?;
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_idx)
        .map(|(_, h)| h.clone())
        .collect();
    if feature_names.is_empty() {
        return Err(err("no feature columns".into()));
    }

    let mut values = Vec::new();
    let mut y = Vec::new();
    let mut classes: Vec<String> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| err(format!("row {row}: {e}")))?;
        if rec.len() != header.len() {
            return Err(err(format!("row {row}: expected {} fields, found {}", header.len(), rec.len())));
        }
        for (j, cell) in rec.iter().enumerate() {
            if j == label_idx {
                let id = match classes.iter().position(|c| c == cell) {
                    Some(id) => id,
                    None => {
                        classes.push(cell.to_owned());
                        classes.len() - 1
                    }
                };
                y.push(id);
            } else {
                let v: f64 = cell
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| err(format!("row {row}, column `{}`: `{cell}` is not a finite number", header[j])))?;
                values.push(v);
            }
        }
    }
    if y.is_empty() {
        return Err(err("no data rows".into()));
    }
    let x = Matrix::from_vec(y.len(), feature_names.len(), values).map_err(|e| err(e.to_string()))?;
    let dataset = Dataset::new(x, y).map_err(|e| err(e.to_string()))?;
    Ok(LoadedCsv {
        dataset,
        feature_names,
        labels: LabelMapping {
            schema_version: crate::config::SCHEMA_VERSION,
            label_column: label_column.to_owned(),
            classes,
        },
    })
}

/// Writes `x0..x{d-1},label` rows; `load_csv(path, "label")` reads it back.
pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let io = |e: csv::Error| HarnessError::Data {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header: Vec<String> = (0..data.d_in()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(io)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.x.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(data.y[i].to_string());
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}
