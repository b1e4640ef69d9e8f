//! Experiment configuration.
//!
//! A run is described by one JSON document. Unknown keys are rejected and
//! every out-of-range value produces an error naming its field. Missing
//! keys take the defaults below; the resolved document written next to the
//! results lists every value, so it reproduces the run on its own.
//!
//! All randomness derives from `seed`. Each component draws from
//! `seed ^ TAG`, with the tags in [`seeds`].

use std::path::{Path, PathBuf};

use hybridfit_core::compound::{LowerConfig, LowerMode, StreamKind, TrainConfig};
use hybridfit_core::datapath::{CostModel, FixedPointFormat};
use hybridfit_core::lower_tier::Nonlinearity;
use hybridfit_core::upper_tier::HeadShape;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Component tags XORed into the master seed.
pub mod seeds {
    pub const STREAM: u64 = 0x5354_5245_414d_0001;
    pub const FEATURES: u64 = 0x4645_4154_5552_0002;
    pub const HEAD: u64 = 0x4845_4144_0000_0003;
    pub const SGD: u64 = 0x5347_4400_0000_0004;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic,
    Csv { path: PathBuf, label_column: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub d_in: usize,
    pub h: usize,
    pub k: usize,
    /// 0 selects a linear head.
    pub head_hidden: usize,
    pub nonlinearity: Nonlinearity,
    pub lower_mode: LowerMode,
    pub lambda_ridge: f64,
    pub lambda_ewc: f64,
    pub eta: f64,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub tasks: usize,
    pub samples_per_task: usize,
    pub chunk_rows: usize,
    pub stream_kind: StreamKind,
    /// Distance between class means and the origin.
    pub class_sep: f64,
    pub cluster_std: f64,
    /// Length of the per-task mean shift for drifting blobs.
    pub drift: f64,
    pub fisher_sample_cap: Option<usize>,
    pub fixed_format: FixedPointFormat,
    pub cost_model: CostModel,
    pub data_source: DataSource,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            d_in: 8,
            h: 64,
            k: 4,
            head_hidden: 0,
            nonlinearity: Nonlinearity::Tanh,
            lower_mode: LowerMode::Ridge,
            lambda_ridge: 1e-3,
            lambda_ewc: 10.0,
            eta: 0.1,
            epochs_per_task: 5,
            batch_size: 32,
            tasks: 2,
            samples_per_task: 400,
            chunk_rows: 64,
            stream_kind: StreamKind::DriftingBlobs,
            class_sep: 3.0,
            cluster_std: 1.0,
            drift: 6.0,
            fisher_sample_cap: None,
            fixed_format: FixedPointFormat::Q16_16,
            cost_model: CostModel::default(),
            data_source: DataSource::Synthetic,
        }
    }
}

fn count(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(HarnessError::config(field, "must be >= 1"));
    }
    Ok(())
}

fn positive(field: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(HarnessError::config(field, format!("must be a finite value > 0, got {v}")));
    }
    Ok(())
}

fn non_negative(field: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(HarnessError::config(field, format!("must be a finite value >= 0, got {v}")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(HarnessError::config(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        count("d_in", self.d_in)?;
        count("h", self.h)?;
        count("k", self.k)?;
        count("epochs_per_task", self.epochs_per_task)?;
        count("batch_size", self.batch_size)?;
        count("tasks", self.tasks)?;
        count("samples_per_task", self.samples_per_task)?;
        count("chunk_rows", self.chunk_rows)?;
        positive("eta", self.eta)?;
        positive("lambda_ridge", self.lambda_ridge)?;
        non_negative("lambda_ewc", self.lambda_ewc)?;
        non_negative("class_sep", self.class_sep)?;
        positive("cluster_std", self.cluster_std)?;
        non_negative("drift", self.drift)?;
        if let Some(cap) = self.fisher_sample_cap {
            count("fisher_sample_cap", cap)?;
        }
        if self.k < 2 {
            return Err(HarnessError::config("k", "a classifier needs at least 2 classes"));
        }
        if self.stream_kind == StreamKind::SplitClasses && self.tasks > self.k {
            return Err(HarnessError::config(
                "tasks",
                format!("split_classes needs tasks <= k, got {} > {}", self.tasks, self.k),
            ));
        }
        // Each task must leave at least one row on both sides of the split.
        if matches!(self.data_source, DataSource::Synthetic) && self.samples_per_task < 5 {
            return Err(HarnessError::config("samples_per_task", "must be >= 5 for an 80/20 split"));
        }
        self.fixed_format
            .validate()
            .map_err(|e| HarnessError::config("fixed_format", e.to_string()))?;
        self.cost_model
            .validate()
            .map_err(|e| HarnessError::config("cost_model", e.to_string()))?;
        if let DataSource::Csv { label_column, .. } = &self.data_source {
            if label_column.is_empty() {
                return Err(HarnessError::config("data_source.label_column", "must not be empty"));
            }
        }
        Ok(())
    }

    pub fn stream_seed(&self) -> u64 {
        self.seed ^ seeds::STREAM
    }

    pub fn head_shape(&self) -> HeadShape {
        HeadShape::from_hidden_units(self.head_hidden)
    }

    pub fn lower_config(&self) -> LowerConfig {
        LowerConfig {
            h: self.h,
            nonlinearity: self.nonlinearity,
            lambda_ridge: self.lambda_ridge,
            chunk_rows: self.chunk_rows,
            mode: self.lower_mode,
            head_shape: self.head_shape(),
            feature_seed: self.seed ^ seeds::FEATURES,
            head_seed: self.seed ^ seeds::HEAD,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            eta: self.eta,
            epochs_per_task: self.epochs_per_task,
            batch_size: self.batch_size,
            lambda_ewc: self.lambda_ewc,
            seed: self.seed ^ seeds::SGD,
            fisher_sample_cap: self.fisher_sample_cap,
        }
    }
}
