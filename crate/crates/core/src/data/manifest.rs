use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CevaeError, Result};

pub const MANIFEST_HEADER: [&str; 4] = ["patient_id", "slice_path", "mask_path", "split"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = CevaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(CevaeError::InvalidArgument(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    PatientZscore,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patient_id: String,
    /// Relative to the manifest directory.
    pub slice_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub resolution: usize,
    pub normalization: Normalization,
    /// Directory that entry paths are relative to.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, root: impl Into<PathBuf>) -> Self {
        DatasetManifest {
            entries,
            resolution: 64,
            normalization: Normalization::PatientZscore,
            root: root.into(),
        }
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    /// Patient ids per split, in first-appearance order.
    pub fn patients(&self, split: Split) -> Vec<String> {
        let mut seen = Vec::<String>::new();
        for e in self.entries.iter().filter(|e| e.split == split) {
            if !seen.contains(&e.patient_id) {
                seen.push(e.patient_id.clone());
            }
        }
        seen
    }

    /// Each patient id must belong to exactly one split.
    pub fn check_partition(&self) -> Result<()> {
        let mut owner: BTreeMap<&str, Split> = BTreeMap::new();
        for e in &self.entries {
            match owner.get(e.patient_id.as_str()) {
                Some(&s) if s != e.split => {
                    return Err(CevaeError::InvalidArgument(format!(
                        "patient {} appears in both {} and {} splits",
                        e.patient_id, s, e.split
                    )))
                }
                _ => {
                    owner.insert(&e.patient_id, e.split);
                }
            }
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(MANIFEST_HEADER)?;
        for e in &self.entries {
            w.write_record([
                e.patient_id.as_str(),
                &path_str(&e.slice_path),
                &e.mask_path.as_deref().map(path_str).unwrap_or_default(),
                e.split.as_str(),
            ])?;
        }
        w.flush().map_err(|err| CevaeError::io(path, err))?;
        Ok(())
    }
}

fn path_str(p: &Path) -> String {
    // forward slashes keep manifests portable
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Parses a manifest CSV and checks that every referenced file exists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CevaeError::MissingFile(path.to_path_buf())
        } else {
            CevaeError::io(path, e)
        }
    })?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(CevaeError::format(
            path,
            format!("expected header {}", MANIFEST_HEADER.join(",")),
        ));
    }
    let mut entries = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != 4 {
            return Err(CevaeError::format(
                path,
                format!("row {} has {} fields", line + 2, rec.len()),
            ));
        }
        let split: Split = rec[3]
            .parse()
            .map_err(|e: CevaeError| CevaeError::format(path, format!("row {}: {e}", line + 2)))?;
        entries.push(ManifestEntry {
            patient_id: rec[0].to_string(),
            slice_path: PathBuf::from(&rec[1]),
            mask_path: (!rec[2].is_empty()).then(|| PathBuf::from(&rec[2])),
            split,
        });
    }
    let manifest = DatasetManifest::new(entries, root);
    for e in &manifest.entries {
        for rel in std::iter::once(&e.slice_path).chain(e.mask_path.iter()) {
            let full = manifest.resolve(rel);
            if !full.is_file() {
                return Err(CevaeError::MissingFile(full));
            }
        }
    }
    manifest.check_partition()?;
    Ok(manifest)
}
