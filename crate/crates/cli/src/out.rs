//! Output directory that records every file it writes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

pub const FILES_MANIFEST: &str = "files.json";

pub struct OutDir {
    root: PathBuf,
    files: BTreeMap<String, u64>,
}

#[derive(Serialize)]
struct FileEntry<'a> {
    path: &'a str,
    bytes: u64,
}

#[derive(Serialize)]
struct FileList<'a> {
    files: Vec<FileEntry<'a>>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(&path, bytes.as_ref()).with_context(|| format!("writing {}", path.display()))?;
        self.record(rel)
    }

    pub fn write_json(&mut self, rel: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text)
    }

    /// Registers a file written by someone else.
    pub fn record(&mut self, rel: &str) -> Result<()> {
        let path = self.path(rel);
        let bytes = fs::metadata(&path)
            .with_context(|| format!("reading {}", path.display()))?
            .len();
        self.files.insert(rel.replace('\\', "/"), bytes);
        Ok(())
    }

    /// Writes the file list; the list itself is not part of it.
    pub fn finish(self) -> Result<PathBuf> {
        let list = FileList {
            files: self
                .files
                .iter()
                .map(|(path, &bytes)| FileEntry { path, bytes })
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&list)?;
        text.push('\n');
        let path = self.root.join(FILES_MANIFEST);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_list_is_sorted_and_sized() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutDir::create(&dir.path().join("o")).unwrap();
        out.write("b.txt", "12345").unwrap();
        out.write("a/x.csv", "1").unwrap();
        let list = out.finish().unwrap();
        assert_eq!(
            fs::read_to_string(list).unwrap(),
            "{\n  \"files\": [\n    {\n      \"path\": \"a/x.csv\",\n      \"bytes\": 1\n    },\n    {\n      \"path\": \"b.txt\",\n      \"bytes\": 5\n    }\n  ]\n}\n"
        );
    }
}
