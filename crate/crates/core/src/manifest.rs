//! Dataset manifest: a JSON Lines file whose first line is a header carrying
//! the class list, followed by one [`SampleRecord`] per line.
//!
//! ```text
//! {"classes":["square","disk"]}
//! {"id":"in-000","path":"images/in-000.png","labels":[1,0],"split":"in_dist","gt_mask_path":"masks/in-000.png"}
//! {"id":"cand-000","path":"images/cand-000.png","labels":[0,0],"split":"ood_candidate"}
//! ```
//!
//! Relative paths are resolved against the directory containing the manifest.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, LineError, LineErrorKind, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    InDist,
    OodCandidate,
    OodHard,
}

impl Split {
    pub fn is_ood(self) -> bool {
        matches!(self, Split::OodCandidate | Split::OodHard)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::InDist => "in_dist",
            Split::OodCandidate => "ood_candidate",
            Split::OodHard => "ood_hard",
        }
    }
}

/// Ordered, unique, non-empty list of foreground class names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassList {
    names: Vec<String>,
}

impl ClassList {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::InvalidManifest("class list is empty".into()));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if name.is_empty() {
                return Err(Error::InvalidManifest("empty class name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidManifest(format!(
                    "duplicate class name `{name}`"
                )));
            }
        }
        Ok(ClassList { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

impl TryFrom<Vec<String>> for ClassList {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        ClassList::new(names)
    }
}

impl From<ClassList> for Vec<String> {
    fn from(list: ClassList) -> Self {
        list.names
    }
}

/// One image with its multi-hot label vector and provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    #[serde(default)]
    pub path: PathBuf,
    pub labels: Vec<u8>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask_path: Option<PathBuf>,
}

impl SampleRecord {
    pub fn positive_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(i, _)| i)
    }

    pub fn has_any_label(&self) -> bool {
        self.labels.iter().any(|&v| v == 1)
    }

    /// Checks the record against a class count, returning a human readable
    /// reason on failure.
    pub fn check(&self, num_classes: usize) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.labels.len() != num_classes {
            return Err(format!(
                "record `{}` has {} labels, expected {}",
                self.id,
                self.labels.len(),
                num_classes
            ));
        }
        if let Some(bad) = self.labels.iter().find(|&&v| v > 1) {
            return Err(format!("record `{}` has label value {bad}", self.id));
        }
        match self.split {
            Split::InDist if !self.has_any_label() => Err(format!(
                "in_dist record `{}` has no positive label",
                self.id
            )),
            Split::OodCandidate | Split::OodHard if self.has_any_label() => Err(format!(
                "{} record `{}` must have an all-zero label vector",
                self.split.as_str(),
                self.id
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    classes: ClassList,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub classes: ClassList,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn new(classes: ClassList, records: Vec<SampleRecord>) -> Result<Self> {
        let m = Manifest { classes, records };
        m.validate()?;
        Ok(m)
    }

    pub fn empty(classes: ClassList) -> Self {
        Manifest {
            classes,
            records: Vec::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for rec in &self.records {
            rec.check(self.classes.len()).map_err(Error::InvalidManifest)?;
            if !ids.insert(rec.id.as_str()) {
                return Err(Error::InvalidManifest(format!("duplicate id `{}`", rec.id)));
            }
        }
        Ok(())
    }

    pub fn by_split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Parses a manifest from JSONL text. All offending lines are reported.
    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| !l.trim().is_empty());

        let (header_line, header_text) = lines.next().ok_or_else(|| Error::Lines {
            file: file.to_string(),
            errors: vec![LineError {
                line: 1,
                kind: LineErrorKind::Parse,
                message: "missing header line".into(),
            }],
        })?;
        let header: Header = serde_json::from_str(header_text).map_err(|e| Error::Lines {
            file: file.to_string(),
            errors: vec![LineError {
                line: header_line,
                kind: LineErrorKind::Parse,
                message: format!("bad header: {e}"),
            }],
        })?;

        let num_classes = header.classes.len();
        let mut errors = Vec::new();
        let mut records = Vec::new();
        let mut ids = HashSet::new();
        for (line, text) in lines {
            let rec: SampleRecord = match serde_json::from_str(text) {
                Ok(r) => r,
                Err(e) => {
                    errors.push(LineError {
                        line,
                        kind: LineErrorKind::Parse,
                        message: e.to_string(),
                    });
                    continue;
                }
            };
            if let Err(message) = rec.check(num_classes) {
                errors.push(LineError {
                    line,
                    kind: LineErrorKind::Schema,
                    message,
                });
                continue;
            }
            if !ids.insert(rec.id.clone()) {
                errors.push(LineError {
                    line,
                    kind: LineErrorKind::Integrity,
                    message: format!("duplicate id `{}`", rec.id),
                });
                continue;
            }
            records.push(rec);
        }
        if !errors.is_empty() {
            return Err(Error::Lines {
                file: file.to_string(),
                errors,
            });
        }
        Ok(Manifest {
            classes: header.classes,
            records,
        })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        self.validate()?;
        let mut out = serde_json::to_string(&Header {
            classes: self.classes.clone(),
        })
        .expect("header serializes");
        out.push('\n');
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec).expect("record serializes"));
            out.push('\n');
        }
        Ok(out)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    Manifest::parse(&text, &path.display().to_string())
}

/// Writes `m` as JSONL. Invalid manifests are refused before anything touches
/// the filesystem.
pub fn save_manifest(m: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = m.to_jsonl()?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Resolves a record path relative to the manifest that names it.
pub fn resolve(manifest_path: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path
            .parent()
            .map(|d| d.join(p))
            .unwrap_or_else(|| p.to_path_buf())
    }
}
