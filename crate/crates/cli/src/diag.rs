//! Structured diagnostics shared by the CLI and the HTTP service.

use serde::Serialize;
use thiserror::Error;

use yolic_core::benchkit::BenchError;
use yolic_core::cellgeom::ConfigError;
use yolic_core::decode::DecodeError;
use yolic_core::evalkit::EvalError;
use yolic_core::imageio::ImageError;
use yolic_core::labelkit::LabelError;
use yolic_core::yolicnet::NetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Usage,
    Validation,
    NotFound,
    Conflict,
    Unavailable,
    Io,
}

#[derive(Debug, Clone, Error, Serialize)]
#[error("{message}")]
pub struct ToolError {
    pub kind: ErrorKind,
    pub message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub details: Vec<String>,
}

impl ToolError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
            details: Vec::new(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Usage, message)
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Validation, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::NotFound, message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Conflict, message)
    }

    pub fn unavailable(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Unavailable, message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Io, message)
    }

    /// Prefixes the message with where the problem was found.
    pub fn context(mut self, what: impl std::fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Usage | ErrorKind::Validation => 2,
            ErrorKind::NotFound => 3,
            ErrorKind::Conflict => 4,
            ErrorKind::Unavailable | ErrorKind::Io => 1,
        }
    }

    pub fn http_status(&self) -> u16 {
        match self.kind {
            ErrorKind::Usage | ErrorKind::Validation => 400,
            ErrorKind::NotFound => 404,
            ErrorKind::Conflict => 409,
            ErrorKind::Unavailable => 503,
            ErrorKind::Io => 500,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl From<std::io::Error> for ToolError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            Self::not_found(e.to_string())
        } else {
            Self::io(e.to_string())
        }
    }
}

impl From<ConfigError> for ToolError {
    fn from(e: ConfigError) -> Self {
        let details = match &e {
            ConfigError::Invalid(v) => v.iter().map(ToString::to_string).collect(),
            _ => Vec::new(),
        };
        Self {
            kind: ErrorKind::Validation,
            message: match &e {
                ConfigError::Invalid(v) => format!("invalid configuration: {} violation(s)", v.len()),
                other => other.to_string(),
            },
            details,
        }
    }
}

impl From<LabelError> for ToolError {
    fn from(e: LabelError) -> Self {
        match e {
            LabelError::LayoutMismatch { .. } | LabelError::DimensionMismatch { .. } => Self::conflict(e.to_string()),
            other => Self::validation(other.to_string()),
        }
    }
}

impl From<ImageError> for ToolError {
    fn from(e: ImageError) -> Self {
        Self::validation(e.to_string())
    }
}

impl From<DecodeError> for ToolError {
    fn from(e: DecodeError) -> Self {
        Self::validation(e.to_string())
    }
}

impl From<EvalError> for ToolError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::LayoutMismatch { .. } => Self::conflict(e.to_string()),
            other => Self::validation(other.to_string()),
        }
    }
}

impl From<NetError> for ToolError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::OutputMismatch { .. } => Self::conflict(e.to_string()),
            other => Self::validation(other.to_string()),
        }
    }
}

impl From<BenchError> for ToolError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Net(n) => n.into(),
            BenchError::Decode(d) => d.into(),
            other => Self::validation(other.to_string()),
        }
    }
}

pub type ToolResult<T> = Result<T, ToolError>;
