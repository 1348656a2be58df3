use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("unsupported scene format version {0}")]
    UnsupportedVersion(u64),
    #[error("mismatched inputs: {0}")]
    MismatchedInputs(String),
    #[error("scene generation failed: {0}")]
    Synth(#[from] bevmine_core::synth::SynthError),
    #[error("toy experiment failed: {0}")]
    Harness(#[from] bevmine_core::gradproj::GradError),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Stable identifier for the machine-readable error object.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Io { .. } => "IoError",
            Self::InvalidConfig(_) => "InvalidConfig",
            Self::Parse { .. } => "ParseError",
            Self::UnsupportedVersion(_) => "UnsupportedVersion",
            Self::MismatchedInputs(_) => "MismatchedInputs",
            Self::Synth(_) => "SynthError",
            Self::Harness(_) => "HarnessError",
            Self::Usage(_) => "UsageError",
        }
    }

    /// `{"error": {"kind": ..., "message": ...}}`
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": { "kind": self.kind(), "message": self.to_string() } }).to_string()
    }
}
