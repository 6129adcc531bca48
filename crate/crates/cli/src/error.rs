use std::fmt;

use ontex::alignment::AlignmentError;
use ontex::checkpoint::CheckpointError;
use ontex::gateway::GatewayError;
use ontex::metrics::MetricsError;
use ontex::ontology::OntologyError;
use ontex::preference::PreferenceError;
use ontex::refine::RefineError;
use ontex::schema::SchemaError;

/// Failure of one command, classified by exit status.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    /// Bad flags, configuration or thresholds (exit 1).
    Usage(String),
    /// Unreadable, malformed or inconsistent input data (exit 2).
    Data(String),
    /// Generation service unavailable or misconfigured (exit 3).
    Service(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Service(_) => 3,
        }
    }

    pub fn data(context: impl fmt::Display, e: impl fmt::Display) -> Self {
        Self::Data(format!("{context}: {e}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "usage error: {m}"),
            Self::Data(m) => write!(f, "data error: {m}"),
            Self::Service(m) => write!(f, "service error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<SchemaError> for CliError {
    fn from(e: SchemaError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<OntologyError> for CliError {
    fn from(e: OntologyError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<PreferenceError> for CliError {
    fn from(e: PreferenceError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::InvalidThreshold => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<AlignmentError> for CliError {
    fn from(e: AlignmentError) -> Self {
        match e {
            AlignmentError::InvalidConfig(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<RefineError> for CliError {
    fn from(e: RefineError) -> Self {
        match e {
            RefineError::InvalidConfig(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        Self::Service(e.to_string())
    }
}
