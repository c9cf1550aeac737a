//! Corpus manifests: one JSON document listing sessions, labels and the tensor
//! files holding each modality.
//!
//! ```json
//! {"sessions":[{"id":"s000","subject":"p00","labels":[0,1,...],
//!               "modalities":{"w2v":"s000/w2v.mmst"},"lengths":{"w2v":12}}]}
//! ```
//!
//! Modality paths are relative to the directory holding the manifest.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::symptom::SymptomVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub subject: String,
    pub labels: Vec<u8>,
    pub modalities: BTreeMap<String, String>,
    #[serde(default)]
    pub lengths: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub sessions: Vec<ManifestEntry>,
}

/// A validated session with modality paths resolved against the manifest directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub session_id: String,
    pub subject_id: String,
    pub labels: SymptomVector,
    pub modality_paths: BTreeMap<String, PathBuf>,
    pub true_lengths: BTreeMap<String, usize>,
}

impl Manifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let mut json = self.to_json()?;
        json.push('\n');
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Loads and validates a manifest. Session order is preserved.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<Session>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));

    let mut seen = HashSet::new();
    let mut sessions = Vec::with_capacity(manifest.sessions.len());
    for entry in manifest.sessions {
        if !seen.insert(entry.id.clone()) {
            return Err(Error::Validation(format!("duplicate session id {:?}", entry.id)));
        }
        let labels = SymptomVector::from_slice(&entry.labels)
            .map_err(|e| Error::Validation(format!("session {:?}: {e}", entry.id)))?;
        let mut modality_paths = BTreeMap::new();
        for (name, rel) in &entry.modalities {
            let resolved = base.join(rel);
            if !resolved.is_file() {
                return Err(Error::Validation(format!(
                    "session {:?}: modality {name:?} file {} not found",
                    entry.id,
                    resolved.display()
                )));
            }
            modality_paths.insert(name.clone(), resolved);
        }
        sessions.push(Session {
            session_id: entry.id,
            subject_id: entry.subject,
            labels,
            modality_paths,
            true_lengths: entry.lengths,
        });
    }
    Ok(sessions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{write_tensor, Tensor};

    fn entry(id: &str, labels: Vec<u8>) -> ManifestEntry {
        ManifestEntry {
            id: id.into(),
            subject: "p0".into(),
            labels,
            modalities: BTreeMap::from([("w2v".to_string(), format!("{id}.mmst"))]),
            lengths: BTreeMap::from([("w2v".to_string(), 2)]),
        }
    }

    fn setup(entries: Vec<ManifestEntry>) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        for e in &entries {
            write_tensor(&Tensor::zeros(vec![2, 4]).unwrap(), dir.path().join(format!("{}.mmst", e.id))).unwrap();
        }
        let path = dir.path().join("manifest.json");
        Manifest { sessions: entries }.write(&path).unwrap();
        (dir, path)
    }

    #[test]
    fn single_session_all_zero_labels() {
        let (_d, path) = setup(vec![entry("a", vec![0; 18])]);
        let s = load_manifest(&path).unwrap();
        assert_eq!(s.len(), 1);
        assert!(s[0].labels.classes().iter().all(|c| c.value() == 0));
        assert_eq!(s[0].true_lengths["w2v"], 2);
        assert!(s[0].modality_paths["w2v"].is_file());
    }

    #[test]
    fn duplicate_id_rejected() {
        let (_d, path) = setup(vec![entry("a", vec![0; 18]), entry("a", vec![0; 18])]);
        assert!(load_manifest(&path).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn wrong_label_length_rejected() {
        let (_d, path) = setup(vec![entry("a", vec![0; 17])]);
        assert!(matches!(load_manifest(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn missing_modality_file_rejected() {
        let (dir, path) = setup(vec![entry("a", vec![0; 18])]);
        fs::remove_file(dir.path().join("a.mmst")).unwrap();
        assert!(load_manifest(&path).unwrap_err().to_string().contains("not found"));
    }

    #[test]
    fn loading_is_order_preserving_and_idempotent() {
        let entries: Vec<_> = ["c", "a", "b"].iter().map(|id| entry(id, vec![1; 18])).collect();
        let (_d, path) = setup(entries);
        let first = load_manifest(&path).unwrap();
        let ids: Vec<_> = first.iter().map(|s| s.session_id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
        assert_eq!(load_manifest(&path).unwrap(), first);
    }
}
