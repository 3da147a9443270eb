//! The prompt library: task embeddings as keys, best prompts as values.
//!
//! A library is a JSON manifest plus the checkpoint files it references.
//! Paths in the manifest are relative to the manifest's directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{read_checkpoint, CheckpointError};
use crate::prompt::{Prompt, TaskEmbedding};
use crate::scalar::Scalar;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum LibraryError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest schema error{}: {message}", at(*.index))]
    Schema {
        index: Option<usize>,
        message: String,
    },
    #[error("entry {index}: {what} has shape {found:?}, library shape is {expected:?}")]
    ShapeMismatch {
        index: usize,
        what: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("entry {index}: duplicate (task, seed) = ({task}, {seed})")]
    DuplicateEntry { index: usize, task: String, seed: u32 },
    #[error("entry {index}: missing file {path}")]
    MissingFile { index: usize, path: PathBuf },
    #[error("entry {index}: bad checkpoint {path}: {source}")]
    Checkpoint {
        index: usize,
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
    #[error("entry {index}: {message}")]
    EntryMismatch { index: usize, message: String },
    #[error("cannot write manifest {path}: {message}")]
    Write { path: PathBuf, message: String },
}

fn at(index: Option<usize>) -> String {
    index.map(|i| format!(" in entry {i}")).unwrap_or_default()
}

/// On-disk manifest document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub embed_step: u64,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "E")]
    pub e: usize,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub task: String,
    pub seed: u32,
    pub embedding: String,
    pub best_prompt: String,
    pub best_step: u64,
    pub val_score: f64,
}

/// One validated (task, run) record of the library.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LibraryEntry {
    pub task_name: String,
    pub run_seed: u32,
    /// Absolute path to the task-embedding checkpoint (the key).
    pub embedding_path: PathBuf,
    /// Absolute path to the best-validation prompt checkpoint (the value).
    pub best_prompt_path: PathBuf,
    pub best_step: u64,
    pub validation_score: f64,
}

/// A validated library. Entries are sorted by `(task_name, run_seed)`.
/// Checkpoint payloads are loaded on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct Library {
    pub root: PathBuf,
    pub embed_step: u64,
    pub prompt_len: usize,
    pub width: usize,
    pub entries: Vec<LibraryEntry>,
}

impl Library {
    pub fn shape(&self) -> (usize, usize) {
        (self.prompt_len, self.width)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn embedding<T: Scalar>(&self, i: usize) -> Result<TaskEmbedding<T>, LibraryError> {
        let entry = &self.entries[i];
        let prompt = read_entry_checkpoint(i, &entry.embedding_path)?;
        TaskEmbedding::new(prompt, self.embed_step).map_err(|e| LibraryError::EntryMismatch {
            index: i,
            message: e.to_string(),
        })
    }

    pub fn best_prompt<T: Scalar>(&self, i: usize) -> Result<Prompt<T>, LibraryError> {
        read_entry_checkpoint(i, &self.entries[i].best_prompt_path)
    }

    /// Loads every embedding, paired with its entry, in listing order.
    pub fn load_embeddings<T: Scalar>(
        &self,
    ) -> Result<Vec<(LibraryEntry, TaskEmbedding<T>)>, LibraryError> {
        (0..self.len())
            .map(|i| Ok((self.entries[i].clone(), self.embedding(i)?)))
            .collect()
    }

    /// Distinct task names in listing order.
    pub fn task_names(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.task_name.clone()))
            .map(|e| e.task_name.clone())
            .collect()
    }
}

fn read_entry_checkpoint<T: Scalar>(index: usize, path: &Path) -> Result<Prompt<T>, LibraryError> {
    if !path.is_file() {
        return Err(LibraryError::MissingFile {
            index,
            path: path.to_path_buf(),
        });
    }
    read_checkpoint(path).map_err(|source| LibraryError::Checkpoint {
        index,
        path: path.to_path_buf(),
        source,
    })
}

/// Parses and fully validates a manifest, including every referenced
/// checkpoint. Violations name the offending entry index (file order).
pub fn load_library(manifest_path: &Path) -> Result<Library, LibraryError> {
    let text = std::fs::read_to_string(manifest_path).map_err(|source| LibraryError::Io {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let doc: ManifestFile = serde_json::from_str(&text).map_err(|e| LibraryError::Schema {
        index: None,
        message: e.to_string(),
    })?;
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    validate(doc, root)
}

/// Loads `DIR/manifest.json` when given a directory, else the file itself.
pub fn open_library(path: &Path) -> Result<Library, LibraryError> {
    if path.is_dir() {
        load_library(&path.join(MANIFEST_FILE))
    } else {
        load_library(path)
    }
}

fn validate(doc: ManifestFile, root: PathBuf) -> Result<Library, LibraryError> {
    if doc.l == 0 || doc.e == 0 {
        return Err(LibraryError::Schema {
            index: None,
            message: format!("library shape {}x{} has a zero dimension", doc.l, doc.e),
        });
    }
    let shape = (doc.l, doc.e);
    let mut seen = BTreeSet::new();
    let mut entries = Vec::with_capacity(doc.entries.len());
    for (index, raw) in doc.entries.into_iter().enumerate() {
        if !(raw.val_score.is_finite() && (0.0..=100.0).contains(&raw.val_score)) {
            return Err(LibraryError::Schema {
                index: Some(index),
                message: format!("val_score {} outside [0, 100]", raw.val_score),
            });
        }
        if !seen.insert((raw.task.clone(), raw.seed)) {
            return Err(LibraryError::DuplicateEntry {
                index,
                task: raw.task,
                seed: raw.seed,
            });
        }
        if raw.best_step < doc.embed_step {
            return Err(LibraryError::EntryMismatch {
                index,
                message: format!(
                    "best_step {} precedes embed_step {}",
                    raw.best_step, doc.embed_step
                ),
            });
        }
        let entry = LibraryEntry {
            embedding_path: root.join(&raw.embedding),
            best_prompt_path: root.join(&raw.best_prompt),
            task_name: raw.task,
            run_seed: raw.seed,
            best_step: raw.best_step,
            validation_score: raw.val_score,
        };
        let checks = [
            ("embedding", &entry.embedding_path, doc.embed_step),
            ("best prompt", &entry.best_prompt_path, entry.best_step),
        ];
        for (what, path, step) in checks {
            let p: Prompt<f64> = read_entry_checkpoint(index, path)?;
            if p.shape() != shape {
                return Err(LibraryError::ShapeMismatch {
                    index,
                    what,
                    expected: shape,
                    found: p.shape(),
                });
            }
            if p.task_name != entry.task_name || p.run_seed != entry.run_seed {
                return Err(LibraryError::EntryMismatch {
                    index,
                    message: format!(
                        "{what} checkpoint belongs to ({}, {}), entry is ({}, {})",
                        p.task_name, p.run_seed, entry.task_name, entry.run_seed
                    ),
                });
            }
            if p.step != step {
                return Err(LibraryError::EntryMismatch {
                    index,
                    message: format!("{what} checkpoint is at step {}, expected {step}", p.step),
                });
            }
        }
        entries.push(entry);
    }
    entries.sort_by(|a, b| (&a.task_name, a.run_seed).cmp(&(&b.task_name, b.run_seed)));
    Ok(Library {
        root,
        embed_step: doc.embed_step,
        prompt_len: doc.l,
        width: doc.e,
        entries,
    })
}

/// Writes a manifest document as pretty JSON.
pub fn write_manifest(doc: &ManifestFile, path: &Path) -> Result<(), LibraryError> {
    let json = serde_json::to_string_pretty(doc).map_err(|e| LibraryError::Write {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    std::fs::write(path, json + "\n").map_err(|e| LibraryError::Write {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::write_checkpoint;
    use crate::prompt::Matrix;

    fn write_pair(dir: &Path, task: &str, seed: u32, embed_step: u64, best_step: u64, shape: (usize, usize)) -> ManifestEntry {
        let m = Matrix::from_vec(shape.0, shape.1, vec![0.5; shape.0 * shape.1]).unwrap();
        let emb = format!("{task}-{seed}-emb.spot");
        let best = format!("{task}-{seed}-best.spot");
        write_checkpoint(&Prompt::new(m.clone(), task, seed, embed_step), &dir.join(&emb), true).unwrap();
        write_checkpoint(&Prompt::new(m, task, seed, best_step), &dir.join(&best), true).unwrap();
        ManifestEntry {
            task: task.into(),
            seed,
            embedding: emb,
            best_prompt: best,
            best_step,
            val_score: 75.0,
        }
    }

    fn manifest(entries: Vec<ManifestEntry>) -> ManifestFile {
        ManifestFile {
            embed_step: 100,
            l: 2,
            e: 3,
            entries,
        }
    }

    fn load(dir: &Path, doc: &ManifestFile) -> Result<Library, LibraryError> {
        let path = dir.join(MANIFEST_FILE);
        write_manifest(doc, &path).unwrap();
        load_library(&path)
    }

    #[test]
    fn empty_library_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let lib = load(dir.path(), &manifest(vec![])).unwrap();
        assert!(lib.is_empty());
    }

    #[test]
    fn listing_is_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            write_pair(dir.path(), "rte", 2, 100, 150, (2, 3)),
            write_pair(dir.path(), "boolq", 9, 100, 100, (2, 3)),
            write_pair(dir.path(), "rte", 1, 100, 400, (2, 3)),
        ];
        let lib = load(dir.path(), &manifest(entries)).unwrap();
        let keys: Vec<_> = lib
            .entries
            .iter()
            .map(|e| (e.task_name.as_str(), e.run_seed))
            .collect();
        assert_eq!(keys, [("boolq", 9), ("rte", 1), ("rte", 2)]);
        assert_eq!(lib.task_names(), ["boolq", "rte"]);
        let emb = lib.embedding::<f64>(0).unwrap();
        assert_eq!(emb.embed_step, 100);
    }

    #[test]
    fn duplicate_entry() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_pair(dir.path(), "rte", 1, 100, 150, (2, 3));
        let err = load(dir.path(), &manifest(vec![a.clone(), a])).unwrap_err();
        assert!(matches!(err, LibraryError::DuplicateEntry { index: 1, .. }));
    }

    #[test]
    fn missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = write_pair(dir.path(), "rte", 1, 100, 150, (2, 3));
        a.best_prompt = "nope.spot".into();
        let err = load(dir.path(), &manifest(vec![a])).unwrap_err();
        assert!(matches!(err, LibraryError::MissingFile { index: 0, .. }));
    }

    #[test]
    fn shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_pair(dir.path(), "rte", 1, 100, 150, (2, 3));
        let b = write_pair(dir.path(), "cb", 1, 100, 150, (3, 3));
        let err = load(dir.path(), &manifest(vec![a, b])).unwrap_err();
        assert!(matches!(err, LibraryError::ShapeMismatch { index: 1, .. }));
    }

    #[test]
    fn schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        for bad in [
            "not json",
            r#"{"embed_step": 1, "L": 2, "E": 3}"#,
            r#"{"embed_step": 1, "L": 2, "E": 3, "entries": [], "extra": 1}"#,
            r#"{"embed_step": -1, "L": 2, "E": 3, "entries": []}"#,
            r#"{"embed_step": 1, "L": 0, "E": 3, "entries": []}"#,
        ] {
            std::fs::write(&path, bad).unwrap();
            assert!(
                matches!(load_library(&path), Err(LibraryError::Schema { .. })),
                "{bad}"
            );
        }
        let mut a = write_pair(dir.path(), "rte", 1, 100, 150, (2, 3));
        a.val_score = 101.0;
        assert!(matches!(
            load(dir.path(), &manifest(vec![a])),
            Err(LibraryError::Schema { index: Some(0), .. })
        ));
    }

    #[test]
    fn entry_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        // embedding captured at the wrong step
        let a = write_pair(dir.path(), "rte", 1, 90, 150, (2, 3));
        assert!(matches!(
            load(dir.path(), &manifest(vec![a])),
            Err(LibraryError::EntryMismatch { index: 0, .. })
        ));
        // best step before the embedding step
        let mut b = write_pair(dir.path(), "cb", 1, 100, 150, (2, 3));
        b.best_step = 50;
        assert!(matches!(
            load(dir.path(), &manifest(vec![b])),
            Err(LibraryError::EntryMismatch { index: 0, .. })
        ));
        // checkpoint belongs to another task
        let mut c = write_pair(dir.path(), "wsc", 1, 100, 150, (2, 3));
        c.task = "copa".into();
        assert!(matches!(
            load(dir.path(), &manifest(vec![c])),
            Err(LibraryError::EntryMismatch { index: 0, .. })
        ));
    }

    #[test]
    fn corrupt_checkpoint_is_typed() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_pair(dir.path(), "rte", 1, 100, 150, (2, 3));
        std::fs::write(dir.path().join(&a.embedding), b"XXXXjunk").unwrap();
        assert!(matches!(
            load(dir.path(), &manifest(vec![a])),
            Err(LibraryError::Checkpoint {
                index: 0,
                source: CheckpointError::BadMagic { .. },
                ..
            })
        ));
    }
}
