//! CLI-level errors and the exit-code mapping.

use std::fmt;

use hieragg::dmkl::DmklError;
use hieragg::mkl_em::EmError;
use hieragg::svm::SvmError;

pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    EmptySplit(&'static str),
    MissingFeatures(String),
    ArtifactMismatch(String),
    ConfigMismatch(String),
    NoRuns(String),
    Invalid(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::EmptySplit(s) => write!(f, "the {s} split is empty"),
            CliError::MissingFeatures(m) => write!(f, "missing features: {m}"),
            CliError::ArtifactMismatch(m) => write!(f, "artifact does not match the manifest: {m}"),
            CliError::ConfigMismatch(m) => write!(f, "artifacts are incompatible: {m}"),
            CliError::NoRuns(d) => write!(f, "no completed runs (metrics.json) under {d}"),
            CliError::Invalid(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Solver failures exit with 3, everything else with 2.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|e| {
        if let Some(e) = e.downcast_ref::<EmError>() {
            e.is_numerical()
        } else if let Some(e) = e.downcast_ref::<DmklError>() {
            e.is_numerical()
        } else if let Some(e) = e.downcast_ref::<SvmError>() {
            e.is_numerical()
        } else {
            false
        }
    });
    if numerical {
        EXIT_NUMERICAL
    } else {
        EXIT_VALIDATION
    }
}

/// The error chain joined by ": ", skipping causes already quoted by the
/// message before them.
pub fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for e in err.chain() {
        let msg = e.to_string();
        if !prev.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
        prev = msg;
    }
    out
}
