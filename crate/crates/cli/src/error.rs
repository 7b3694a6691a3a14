use std::path::Path;

use metaper::encoders::{EncoderError, FormatError};
use metaper::experiment::ExperimentError;
use metaper::io::IoError;
use metaper::personalization::PersonalizationError;
use metaper::retrieval::RetrievalError;
use metaper::synthworld::SynthError;
use serde::Serialize;
use thiserror::Error;

/// Exit status for bad inputs, configuration or usage.
pub const EXIT_INPUT: i32 = 2;
/// Exit status for failures after inputs were accepted.
pub const EXIT_FAILURE: i32 = 1;

/// A command failure with a stable machine-readable code.
#[derive(Debug, Error, Serialize)]
#[error("{code}: {message}")]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
    #[serde(skip)]
    pub exit: i32,
}

impl CliError {
    pub fn new(code: &'static str, message: impl Into<String>, exit: i32) -> Self {
        Self {
            code,
            message: message.into(),
            exit,
        }
    }

    pub fn input(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(code, message, EXIT_INPUT)
    }

    pub fn invalid_config(message: impl Into<String>) -> Self {
        Self::input("INVALID_CONFIG", message)
    }

    pub fn not_found(code: &'static str, path: &Path, e: impl std::fmt::Display) -> Self {
        Self::input(code, format!("{}: {e}", path.display()))
    }

    /// `{"error": {"code": …, "message": …}}` on one line.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

/// Stable code of a binary-format failure.
pub fn format_code(e: &FormatError) -> &'static str {
    match e {
        FormatError::BadMagic { .. } => "BAD_MAGIC",
        FormatError::UnsupportedVersion(_) => "UNSUPPORTED_VERSION",
        FormatError::ChecksumMismatch { .. } => "CRC_MISMATCH",
        FormatError::Truncated(_) | FormatError::TrailingBytes(_) => "TRUNCATED",
        FormatError::Io(_) => "IO_ERROR",
        _ => "INVALID_FORMAT",
    }
}

pub fn encoder_code(e: &EncoderError) -> &'static str {
    match e {
        EncoderError::Format(f) => format_code(f),
        EncoderError::DimMismatch { .. } => "DIM_MISMATCH",
        EncoderError::MissingFrame(_) => "MISSING_FRAME",
        _ => "INVALID_INPUT",
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        Self::input(encoder_code(&e), e.to_string())
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match &e {
            IoError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                Self::input("INPUT_NOT_FOUND", e.to_string())
            }
            IoError::Io { .. } => Self::new("IO_ERROR", e.to_string(), EXIT_FAILURE),
            IoError::Parse { .. } => Self::input("INVALID_JSON", e.to_string()),
        }
    }
}

impl From<PersonalizationError> for CliError {
    fn from(e: PersonalizationError) -> Self {
        match e {
            PersonalizationError::Encoder(e) => e.into(),
            PersonalizationError::Format(f) => Self::input(format_code(&f), f.to_string()),
            PersonalizationError::InvalidConfig(_) => Self::invalid_config(e.to_string()),
            PersonalizationError::InvalidModel(_) => Self::input("INVALID_MODEL", e.to_string()),
            PersonalizationError::UnknownInstance(_) => {
                Self::input("UNKNOWN_INSTANCE", e.to_string())
            }
            PersonalizationError::UnknownCategory(_) | PersonalizationError::EmptyCategoryList => {
                Self::input("INVALID_CATEGORIES", e.to_string())
            }
            _ => Self::new("TRAINING_FAILED", e.to_string(), EXIT_FAILURE),
        }
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Personalization(e) => e.into(),
            RetrievalError::Encoder(e) => e.into(),
            RetrievalError::NoRelevantShots(_)
            | RetrievalError::DuplicateShot(_)
            | RetrievalError::EmptyCorpus => Self::input("INVALID_CORPUS", e.to_string()),
            _ => Self::new("RETRIEVAL_FAILED", e.to_string(), EXIT_FAILURE),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Encoder(e) => e.into(),
            ExperimentError::Personalization(e) => e.into(),
            ExperimentError::Retrieval(e) => e.into(),
            _ => Self::input("INVALID_INPUT", e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidSpec(_) => Self::invalid_config(e.to_string()),
            SynthError::InfeasibleMargin(_) => Self::input("INFEASIBLE_MARGIN", e.to_string()),
            SynthError::Encoder(e) => e.into(),
            SynthError::Io(_) => Self::new("IO_ERROR", e.to_string(), EXIT_FAILURE),
        }
    }
}
