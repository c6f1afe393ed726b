use std::path::PathBuf;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{source}")]
    Core {
        section: String,
        #[source]
        source: truthlab::Error,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Machine-readable error printed on stderr before a nonzero exit.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub error: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub message: String,
}

impl CliError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn core(section: &str, source: truthlab::Error) -> Self {
        CliError::Core {
            section: section.into(),
            source,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    /// Dotted path of the offending config field, when one is known.
    pub fn field(&self) -> Option<String> {
        match self {
            CliError::Config { field, .. } if !field.is_empty() => Some(field.clone()),
            CliError::Core {
                section,
                source: truthlab::Error::InvalidParameter { name, .. },
            } => Some(format!("{section}.{name}")),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "invalid_config",
            CliError::Core {
                source: truthlab::Error::InvalidParameter { .. },
                ..
            } => "invalid_config",
            CliError::Core { .. } => "runtime",
            CliError::Io { .. } => "io",
            CliError::Usage(_) => "usage",
            CliError::Json(_) => "format",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "invalid_config" | "usage" => 2,
            _ => 1,
        }
    }

    pub fn report(&self) -> ErrorReport {
        ErrorReport {
            error: self.kind(),
            field: self.field(),
            message: self.to_string(),
        }
    }
}
