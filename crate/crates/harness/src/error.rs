use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Invalid configuration; `field` names the offending key.
    #[error("config: field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("config: {0}")]
    ConfigParse(String),

    #[error("data: {path}: {reason}")]
    Data { path: PathBuf, reason: String },

    #[error("{module}: {source}")]
    Core {
        module: &'static str,
        #[source]
        source: hybridfit_core::Error,
    },

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        HarnessError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Tags a core error with the module that raised it.
pub(crate) trait InModule<T> {
    fn in_module(self, module: &'static str) -> std::result::Result<T, HarnessError>;
}

impl<T> InModule<T> for std::result::Result<T, hybridfit_core::Error> {
    fn in_module(self, module: &'static str) -> std::result::Result<T, HarnessError> {
        self.map_err(|source| HarnessError::Core { module, source })
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
