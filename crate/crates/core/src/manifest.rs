//! Dataset manifest: a JSON list of `{id, path, class, split, T, annotations?}`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::io::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// Ground truth for untrimmed videos.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotations {
    /// Frames `[start, end)` covered by the action.
    pub window: [usize; 2],
    /// Per 16-frame clip: does it intersect the action window?
    pub action_clips: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: String,
    pub class: usize,
    pub split: Split,
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<Annotations>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<Record>) -> Self {
        Manifest {
            root: root.into(),
            records,
        }
    }

    /// Loads and validates a manifest. File existence is checked eagerly.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let records: Vec<Record> = serde_json::from_str(&text).map_err(|e| CoreError::Manifest {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Manifest { root, records };
        m.validate(path)?;
        Ok(m)
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let err = |detail: String| CoreError::Manifest {
            path: path.to_path_buf(),
            detail,
        };
        if self.records.is_empty() {
            return Err(err("empty dataset: the manifest has no records".into()));
        }
        let mut seen = HashSet::new();
        let mut dups: Vec<&str> = Vec::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) && !dups.contains(&r.id.as_str()) {
                dups.push(&r.id);
            }
        }
        if !dups.is_empty() {
            return Err(err(format!("duplicate ids: {}", dups.join(", "))));
        }
        let dangling: Vec<&str> = self
            .records
            .iter()
            .filter(|r| !self.resolve(r).is_file())
            .map(|r| r.path.as_str())
            .collect();
        if !dangling.is_empty() {
            return Err(err(format!("missing files: {}", dangling.join(", "))));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(&self.records)
            .map_err(|e| CoreError::invalid("manifest", e.to_string()))?;
        write_atomic(path, s.as_bytes())
    }

    pub fn resolve(&self, r: &Record) -> PathBuf {
        let p = Path::new(&r.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// One more than the largest class id.
    pub fn num_classes(&self) -> usize {
        self.records.iter().map(|r| r.class + 1).max().unwrap_or(0)
    }

    pub fn counts(&self) -> BTreeMap<Split, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.split).or_insert(0) += 1;
        }
        m
    }
}

impl PartialOrd for Split {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Split {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}
