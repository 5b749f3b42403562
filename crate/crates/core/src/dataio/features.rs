//! GPF1 per-frame feature files.
//!
//! Layout: `b"GPF1"`, `u32` dim, `u32` frame count, then `T * dim`
//! little-endian `f32` values in frame-major order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DataError;

pub const FEATURE_MAGIC: &[u8; 4] = b"GPF1";
pub const FEATURE_HEADER_LEN: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Appearance,
    Motion,
}

impl Stream {
    pub const ALL: [Stream; 2] = [Stream::Appearance, Stream::Motion];

    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Appearance => "appearance",
            Stream::Motion => "motion",
        }
    }
}

impl std::fmt::Display for Stream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stream {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "appearance" | "a" => Ok(Stream::Appearance),
            "motion" | "m" => Ok(Stream::Motion),
            other => Err(format!("unknown stream '{other}'")),
        }
    }
}

/// Per-frame feature vectors of one video in one stream.
///
/// Values are kept in the on-disk 32-bit representation so that a
/// write/load cycle is bit-exact; pooling widens them to the working
/// scalar type.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamFeatureSequence {
    video_id: String,
    stream: Stream,
    dim: usize,
    values: Vec<f32>,
}

impl StreamFeatureSequence {
    /// Builds a sequence from a flat frame-major buffer.
    pub fn new(video_id: impl Into<String>, stream: Stream, dim: usize, values: Vec<f32>) -> Result<Self, DataError> {
        let video_id = video_id.into();
        if dim == 0 {
            return Err(DataError::ZeroDim { video_id });
        }
        if values.is_empty() {
            return Err(DataError::ZeroFrames { file: video_id });
        }
        if !values.len().is_multiple_of(dim) {
            return Err(DataError::RaggedRows {
                video_id,
                len: values.len(),
                dim,
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite {
                file: video_id,
                offset: FEATURE_HEADER_LEN + 4 * pos,
            });
        }
        Ok(Self {
            video_id,
            stream,
            dim,
            values,
        })
    }

    pub fn from_rows(video_id: impl Into<String>, stream: Stream, rows: &[Vec<f32>]) -> Result<Self, DataError> {
        let video_id = video_id.into();
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(DataError::RaggedRows {
                video_id,
                len: rows.iter().map(Vec::len).sum(),
                dim,
            });
        }
        Self::new(video_id, stream, dim, rows.concat())
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn stream(&self) -> Stream {
        self.stream
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_count(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f32]> + '_ {
        self.values.chunks_exact(self.dim)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn with_video_id(mut self, video_id: impl Into<String>) -> Self {
        self.video_id = video_id.into();
        self
    }

    /// Encodes the sequence in the GPF1 layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.frame_count() as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes a GPF1 buffer. `source` names the buffer in error messages.
    pub fn from_bytes(
        bytes: &[u8],
        video_id: impl Into<String>,
        stream: Stream,
        source: &str,
    ) -> Result<Self, DataError> {
        if bytes.len() < FEATURE_HEADER_LEN {
            if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
                return Err(DataError::BadMagic {
                    file: source.to_string(),
                });
            }
            return Err(DataError::Truncated {
                file: source.to_string(),
                offset: bytes.len(),
            });
        }
        if &bytes[..4] != FEATURE_MAGIC {
            return Err(DataError::BadMagic {
                file: source.to_string(),
            });
        }
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let frames = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if frames == 0 {
            return Err(DataError::ZeroFrames {
                file: source.to_string(),
            });
        }
        if dim == 0 {
            return Err(DataError::ZeroDim {
                video_id: source.to_string(),
            });
        }
        let expected = FEATURE_HEADER_LEN + 4 * frames * dim;
        if bytes.len() < expected {
            return Err(DataError::Truncated {
                file: source.to_string(),
                offset: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(DataError::TrailingBytes {
                file: source.to_string(),
                offset: expected,
            });
        }
        let mut values = Vec::with_capacity(frames * dim);
        for (i, chunk) in bytes[FEATURE_HEADER_LEN..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(DataError::NonFinite {
                    file: source.to_string(),
                    offset: FEATURE_HEADER_LEN + 4 * i,
                });
            }
            values.push(v);
        }
        Ok(Self {
            video_id: video_id.into(),
            stream,
            dim,
            values,
        })
    }
}

/// Reads a GPF1 file. The video id defaults to the file stem.
pub fn load_feature_file(path: &Path, stream: Stream) -> Result<StreamFeatureSequence, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    StreamFeatureSequence::from_bytes(&bytes, id, stream, &path.display().to_string())
}

pub fn write_feature_file(seq: &StreamFeatureSequence, path: &Path) -> Result<(), DataError> {
    // Sequences can only be built through validating constructors, but the
    // check is repeated so the writer never emits a file the loader rejects.
    if let Some(pos) = seq.values.iter().position(|v| !v.is_finite()) {
        return Err(DataError::NonFinite {
            file: path.display().to_string(),
            offset: FEATURE_HEADER_LEN + 4 * pos,
        });
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| DataError::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    f.write_all(&seq.to_bytes()).map_err(|e| DataError::io(path, e))
}

/// Validates raw rows before they become a sequence, reporting NaN/Inf
/// with the offset the value would have in a GPF1 file.
pub fn check_rows_finite(rows: &[f32], source: &str) -> Result<(), DataError> {
    match rows.iter().position(|v| !v.is_finite()) {
        Some(pos) => Err(DataError::NonFinite {
            file: source.to_string(),
            offset: FEATURE_HEADER_LEN + 4 * pos,
        }),
        None => Ok(()),
    }
}

pub(crate) fn resolve(base: Option<&Path>, p: &Path) -> PathBuf {
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p.to_path_buf(),
    }
}
