//! JSON-lines dataset manifests.
//!
//! Each line is one record:
//! `{"video_id": "...", "label": 3, "appearance": "a/x.gpf", "motion": "m/x.gpf", "split": "train"}`.
//! An optional line `{"label_names": {"1": "walk", "2": "run"}}` declares
//! the class set; without it the class set is the set of labels used,
//! which must then be contiguous from 1.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::features::{load_feature_file, resolve, Stream, StreamFeatureSequence};
use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub appearance: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion: Option<PathBuf>,
    pub split: Split,
}

impl VideoRecord {
    pub fn stream_path(&self, stream: Stream) -> Option<&Path> {
        match stream {
            Stream::Appearance => self.appearance.as_deref(),
            Stream::Motion => self.motion.as_deref(),
        }
    }
}

#[derive(Deserialize)]
struct LabelHeader {
    label_names: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<VideoRecord>,
    /// Class id to display name, ids contiguous from 1.
    pub label_names: BTreeMap<usize, String>,
    /// Directory relative stream paths are resolved against.
    pub base_dir: Option<PathBuf>,
}

impl DatasetManifest {
    /// Validates records against an explicit or inferred class set.
    pub fn new(records: Vec<VideoRecord>, label_names: Option<BTreeMap<usize, String>>) -> Result<Self, DataError> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.video_id.as_str()) {
                return Err(DataError::DuplicateId {
                    video_id: r.video_id.clone(),
                });
            }
            if r.appearance.is_none() && r.motion.is_none() {
                return Err(DataError::MissingPath {
                    video_id: r.video_id.clone(),
                });
            }
        }
        let label_names = match label_names {
            Some(names) => names,
            None => records.iter().map(|r| (r.label, format!("class{}", r.label))).collect(),
        };
        for (expected, &id) in (1..).zip(label_names.keys()) {
            if id != expected {
                return Err(DataError::NonContiguousLabels { missing: expected });
            }
        }
        for r in &records {
            if !label_names.contains_key(&r.label) {
                return Err(DataError::UnknownLabel {
                    video_id: r.video_id.clone(),
                    label: r.label,
                });
            }
        }
        Ok(Self {
            records,
            label_names,
            base_dir: None,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoRecord> + '_ {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn get(&self, video_id: &str) -> Option<&VideoRecord> {
        self.records.iter().find(|r| r.video_id == video_id)
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        resolve(self.base_dir.as_deref(), p)
    }

    /// Loads one stream of one record.
    pub fn load_sequence(&self, record: &VideoRecord, stream: Stream) -> Result<StreamFeatureSequence, DataError> {
        let rel = record.stream_path(stream).ok_or_else(|| DataError::MissingStream {
            video_id: record.video_id.clone(),
            stream,
        })?;
        Ok(load_feature_file(&self.resolve_path(rel), stream)?.with_video_id(record.video_id.clone()))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let header: BTreeMap<String, &String> = self.label_names.iter().map(|(k, v)| (k.to_string(), v)).collect();
        out.push_str(&serde_json::json!({ "label_names": header }).to_string());
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

pub fn parse_manifest(text: &str, source: &str) -> Result<DatasetManifest, DataError> {
    let mut records = Vec::new();
    let mut label_names = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| DataError::Manifest {
            file: source.to_string(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        let bad = |message: String| DataError::Manifest {
            file: source.to_string(),
            line: lineno + 1,
            message,
        };
        if value.get("label_names").is_some() {
            let header: LabelHeader = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
            let mut names = BTreeMap::new();
            for (k, v) in header.label_names {
                let id: usize = k
                    .parse()
                    .map_err(|_| bad(format!("label id '{k}' is not an integer")))?;
                names.insert(id, v);
            }
            label_names = Some(names);
        } else {
            records.push(serde_json::from_value(value).map_err(|e| bad(e.to_string()))?);
        }
    }
    DatasetManifest::new(records, label_names)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut manifest = parse_manifest(&text, &path.display().to_string())?;
    manifest.base_dir = path.parent().map(Path::to_path_buf);
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    let mut f = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    f.write_all(manifest.to_jsonl().as_bytes())
        .map_err(|e| DataError::io(path, e))
}
