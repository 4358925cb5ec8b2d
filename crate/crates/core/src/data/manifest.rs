use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use super::LabelVocabulary;
use crate::heads::LabelVector;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    /// Path relative to the manifest's directory; doubles as the image id.
    pub path: String,
    /// Sorted, deduplicated category indices.
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
    pub vocabulary: LabelVocabulary,
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, index: usize) -> PathBuf {
        self.root.join(&self.records[index].path)
    }

    pub fn label_vector(&self, index: usize) -> LabelVector {
        LabelVector::from_indices(self.vocabulary.len(), &self.records[index].labels)
    }

    /// Keeps only the records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> DatasetManifest {
        DatasetManifest {
            root: self.root.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            vocabulary: self.vocabulary.clone(),
            warnings: Vec::new(),
        }
    }

    /// `path<TAB>cat1,cat2,...` per record.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let names: Vec<&str> = r.labels.iter().map(|&c| self.vocabulary.name(c)).collect();
            out.push_str(&r.path);
            out.push('\t');
            out.push_str(&names.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn load_manifest(path: &Path, vocabulary: &LabelVocabulary) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, path, root, vocabulary, true)
}

pub(crate) fn parse_manifest(
    text: &str,
    origin: &Path,
    root: PathBuf,
    vocabulary: &LabelVocabulary,
    check_files: bool,
) -> Result<DatasetManifest> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (rel, cats) = line
            .split_once('\t')
            .ok_or_else(|| err(lineno, "expected `path<TAB>categories`".into()))?;
        let rel = rel.trim();
        if rel.is_empty() {
            return Err(err(lineno, "empty image path".into()));
        }
        if check_files && !root.join(rel).exists() {
            return Err(err(lineno, format!("image `{rel}` does not exist")));
        }
        if !seen.insert(rel.to_owned()) {
            warnings.push(format!("line {lineno}: duplicate image path `{rel}`"));
        }
        let mut labels = Vec::new();
        for name in cats.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            let c = vocabulary
                .index_of(name)
                .ok_or_else(|| err(lineno, format!("unknown category `{name}`")))?;
            if labels.contains(&c) {
                warnings.push(format!("line {lineno}: category `{name}` listed twice"));
            } else {
                labels.push(c);
            }
        }
        labels.sort_unstable();
        records.push(ManifestRecord {
            path: rel.to_owned(),
            labels,
        });
    }
    for w in &warnings {
        warn!("{}: {w}", origin.display());
    }
    Ok(DatasetManifest {
        root,
        records,
        vocabulary: vocabulary.clone(),
        warnings,
    })
}
