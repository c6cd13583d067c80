use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Modality {
    Optical,
    Sar,
}

impl TryFrom<u8> for Modality {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Modality::Optical),
            1 => Ok(Modality::Sar),
            other => Err(format!("invalid modality {other} (expected 0 or 1)")),
        }
    }
}

impl From<Modality> for u8 {
    fn from(m: Modality) -> u8 {
        match m {
            Modality::Optical => 0,
            Modality::Sar => 1,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Optical => "optical",
            Modality::Sar => "sar",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Gallery,
    None,
}

/// One image with its identity label and modality flag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub image_ref: String,
    pub identity: usize,
    pub modality: Modality,
    pub split: Split,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn new(records: Vec<SampleRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Indices of records in `split`.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }

    /// Sub-manifest of one split, in original order.
    pub fn split(&self, split: Split) -> Manifest {
        Manifest::new(
            self.records
                .iter()
                .filter(|r| r.split == split)
                .cloned()
                .collect(),
        )
    }

    /// Record counts per (split, role, modality).
    pub fn counts(&self) -> BTreeMap<(Split, Role, Modality), usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry((r.split, r.role, r.modality)).or_insert(0) += 1;
        }
        out
    }

    /// Number of distinct identities among training records.
    pub fn num_train_identities(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.identity)
            .collect::<HashSet<_>>()
            .len()
    }

    /// Checks record-level invariants; every offending line is listed.
    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::Validation("empty manifest".into()));
        }
        let mut problems = Vec::new();
        let mut seen = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            let line = i + 1;
            if !seen.insert(r.image_ref.as_str()) {
                problems.push(format!("line {line}: duplicate image_ref `{}`", r.image_ref));
            }
            match (r.split, r.role) {
                (Split::Train, Role::Query | Role::Gallery) => {
                    problems.push(format!("line {line}: train record has role {:?}", r.role))
                }
                (Split::Test, Role::None) => {
                    problems.push(format!("line {line}: test record needs role query or gallery"))
                }
                _ => {}
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Parses JSON-lines text into a validated manifest.
pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut records = Vec::new();
    let mut problems = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<SampleRecord>(line) {
            Ok(r) => records.push(r),
            Err(e) => problems.push(format!("line {}: {e}", i + 1)),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems.join("; ")));
    }
    let manifest = Manifest::new(records);
    manifest.validate()?;
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = parse_manifest(&text)?;
    for ((split, role, modality), n) in manifest.counts() {
        log::info!("{}: {split:?}/{role:?}/{modality}: {n}", path.display());
    }
    Ok(manifest)
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    std::fs::write(path, manifest.to_jsonl()).map_err(|e| Error::io(path, e))
}

fn parse_hoss_name(name: &str) -> Option<(String, Modality)> {
    let stem = name.rsplit_once('.').map_or(name, |(s, _)| s);
    let mut parts = stem.split(['_', '-']);
    let id = parts.next()?.to_string();
    let modality = parts.find_map(|p| match p.to_ascii_lowercase().as_str() {
        "sar" => Some(Modality::Sar),
        "rgb" | "opt" | "optical" | "vis" => Some(Modality::Optical),
        _ => None,
    })?;
    Some((id, modality))
}

/// Maps a HOSS-style tree (`train/`, `query/`, `gallery/` holding files named
/// `<id>_<rgb|opt|sar>_<anything>.<ext>`) onto manifest records with
/// paths relative to `root`. Training identities are relabelled densely
/// from 0; test identities follow after them.
pub fn convert_hoss_tree(root: &Path) -> Result<Manifest> {
    let mut labels: BTreeMap<String, usize> = BTreeMap::new();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (dir, split, role) in [
        ("train", Split::Train, Role::None),
        ("query", Split::Test, Role::Query),
        ("gallery", Split::Test, Role::Gallery),
    ] {
        let path = root.join(dir);
        if !path.is_dir() {
            continue;
        }
        let mut names: Vec<String> = std::fs::read_dir(&path)
            .map_err(|e| Error::io(&path, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        names.sort();
        for name in names {
            let Some((id, modality)) = parse_hoss_name(&name) else {
                skipped.push(format!("{dir}/{name}"));
                continue;
            };
            let next = labels.len();
            let identity = *labels.entry(id).or_insert(next);
            records.push(SampleRecord {
                image_ref: format!("{dir}/{name}"),
                identity,
                modality,
                split,
                role,
            });
        }
    }
    if !skipped.is_empty() {
        log::warn!("skipped {} unrecognised files, e.g. {}", skipped.len(), skipped[0]);
    }
    let manifest = Manifest::new(records);
    manifest.validate()?;
    Ok(manifest)
}
