use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::identity::{Trait, Violation};

#[derive(Debug, Error)]
pub enum IdentityError {
    #[error("invalid argument: {trait_} level {level} is outside 1..=5")]
    LevelOutOfRange { trait_: Trait, level: u8 },
    #[error("descriptor table: {0}")]
    Table(String),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("provider timed out after {attempts} attempt(s)")]
    ProviderTimeout { attempts: u32 },
    #[error("provider error{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Provider { status: Option<u16>, message: String },
    #[error("fixture error: {0}")]
    Fixture(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("provider configuration: {0}")]
    Config(String),
}

impl GatewayError {
    /// Whether the caller may reasonably try again later.
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::ProviderTimeout { .. } => true,
            GatewayError::Provider { status, .. } => status.map_or(true, |s| s >= 500),
            _ => false,
        }
    }
}

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("namespace not found: {0}")]
    NotFound(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("embedding provider: {0}")]
    Provider(#[from] GatewayError),
    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),
    #[error("corrupt memory log {path}:{line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error, PartialEq)]
pub enum PerceptionError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum PlannerError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("frame of {declared} bytes exceeds the {max} byte limit")]
    FrameTooLarge { declared: usize, max: usize },
    #[error("truncated frame: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("malformed payload field `{field}`: {message}")]
    Malformed { field: String, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("backend rejected step {step}: {status}")]
    Rejected { step: usize, status: String },
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{field}: {message}")]
    Field { field: String, message: String },
    #[error("{0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl ConfigError {
    pub fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Field {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl From<Vec<Violation>> for ConfigError {
    fn from(v: Vec<Violation>) -> Self {
        match v.as_slice() {
            [one] => ConfigError::field(one.field.clone(), one.message.clone()),
            _ => ConfigError::Field {
                field: v.first().map(|x| x.field.clone()).unwrap_or_default(),
                message: v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; "),
            },
        }
    }
}

/// Crate-level error for operations that span modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
