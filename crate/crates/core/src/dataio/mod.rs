//! Reading and writing everything that crosses the process boundary:
//! frame-feature files, dataset manifests and trained model artifacts.

mod artifact;
mod features;
mod manifest;

use std::path::Path;

use thiserror::Error;

pub use artifact::{ArtifactConfig, ClassMachine, ModelArtifact, TrainerRoute, ARTIFACT_FORMAT};
pub use features::{
    check_rows_finite, load_feature_file, write_feature_file, Stream, StreamFeatureSequence, FEATURE_HEADER_LEN,
    FEATURE_MAGIC,
};
pub use manifest::{load_manifest, parse_manifest, write_manifest, DatasetManifest, Split, VideoRecord};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{file}: bad magic, expected GPF1")]
    BadMagic { file: String },
    #[error("{file}: truncated at byte offset {offset}")]
    Truncated { file: String, offset: usize },
    #[error("{file}: unexpected trailing bytes from offset {offset}")]
    TrailingBytes { file: String, offset: usize },
    #[error("{file}: non-finite value at byte offset {offset}")]
    NonFinite { file: String, offset: usize },
    #[error("{file}: sequence has zero frames")]
    ZeroFrames { file: String },
    #[error("{video_id}: feature dimension is zero")]
    ZeroDim { video_id: String },
    #[error("{video_id}: {len} values do not form rows of dimension {dim}")]
    RaggedRows { video_id: String, len: usize, dim: usize },
    #[error("{file}:{line}: {message}")]
    Manifest { file: String, line: usize, message: String },
    #[error("duplicate video id '{video_id}'")]
    DuplicateId { video_id: String },
    #[error("video '{video_id}' has label {label} outside the declared class set")]
    UnknownLabel { video_id: String, label: usize },
    #[error("class ids must be contiguous from 1; id {missing} is missing")]
    NonContiguousLabels { missing: usize },
    #[error("video '{video_id}' lists no stream path")]
    MissingPath { video_id: String },
    #[error("video '{video_id}' has no {stream} stream")]
    MissingStream { video_id: String, stream: Stream },
    #[error("model artifact: {0}")]
    Artifact(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
