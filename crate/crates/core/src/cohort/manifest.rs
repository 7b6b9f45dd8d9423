//! CSV manifest: `slide_id,client_id,label,split,source_slide_id,path`.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::bagfile::{read_bag, FeatureBag};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Synthetic,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "synthetic" => Ok(Split::Synthetic),
            other => Err(Error::Manifest(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub client_id: usize,
    pub label: usize,
    pub split: Split,
    /// Empty for real slides.
    pub source_slide_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: String,
}

impl ManifestEntry {
    pub fn resolve(&self, base: &Path) -> PathBuf {
        base.join(&self.path)
    }

    /// Reads the referenced bag; errors name the manifest row (1-based,
    /// header excluded).
    pub fn load(&self, base: &Path, row: usize) -> Result<FeatureBag> {
        read_bag(self.resolve(base))
            .map_err(|e| Error::Manifest(format!("row {row} (slide {}): {e}", self.slide_id)))
    }
}

fn check_unique(entries: &[ManifestEntry]) -> Result<()> {
    let mut seen = HashSet::new();
    for (i, e) in entries.iter().enumerate() {
        if !seen.insert(e.slide_id.as_str()) {
            return Err(Error::Manifest(format!("duplicate slide_id {:?} at row {}", e.slide_id, i + 1)));
        }
    }
    Ok(())
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    check_unique(entries)?;
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for e in entries {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let expected = ["slide_id", "client_id", "label", "split", "source_slide_id", "path"];
    let headers = r.headers()?.clone();
    if headers.iter().ne(expected.iter().copied()) {
        return Err(Error::Manifest(format!("unexpected header {:?}", headers.iter().collect::<Vec<_>>())));
    }
    let entries: Vec<ManifestEntry> = r
        .deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::Manifest(format!("row {}: {e}", i + 1))))
        .collect::<Result<_>>()?;
    check_unique(&entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries() -> Vec<ManifestEntry> {
        vec![
            ManifestEntry {
                slide_id: "c0-s0000".into(),
                client_id: 0,
                label: 1,
                split: Split::Train,
                source_slide_id: String::new(),
                path: "bags/c0-s0000.bag".into(),
            },
            ManifestEntry {
                slide_id: "c0-s0000-syn".into(),
                client_id: 0,
                label: 1,
                split: Split::Synthetic,
                source_slide_id: "c0-s0000".into(),
                path: "synthetic/c0-s0000-syn.bag".into(),
            },
        ]
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        write_manifest(&path, &entries()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("slide_id,client_id,label,split,source_slide_id,path\n"));
        assert_eq!(read_manifest(&path).unwrap(), entries());
    }

    #[test]
    fn duplicates_rejected() {
        let mut e = entries();
        e[1].slide_id = e[0].slide_id.clone();
        let dir = tempfile::tempdir().unwrap();
        assert!(write_manifest(dir.path().join("m.csv"), &e).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn missing_bag_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let err = entries()[1].load(dir.path(), 2).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("c0-s0000-syn"), "{err}");
    }

    #[test]
    fn synthetic_rows_carry_source() {
        let e = entries();
        assert!(e.iter().filter(|x| x.split == Split::Synthetic).all(|x| !x.source_slide_id.is_empty()));
        assert!(e.iter().filter(|x| x.split != Split::Synthetic).all(|x| x.source_slide_id.is_empty()));
    }
}
