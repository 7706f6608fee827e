//! Append-only JSONL log of annotation records with an in-memory index.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use cnseg_core::Label;
use serde::{Deserialize, Serialize};

use crate::error::{AnnotateError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sentence_id: String,
    pub annotator_id: String,
    pub label: Label,
    /// UTC milliseconds since the epoch.
    pub timestamp: u64,
}

/// Latest record per (sentence_id, annotator_id).
pub type Index = BTreeMap<(String, String), AnnotationRecord>;

/// Folds a log into its index; later records win.
pub fn fold(records: &[AnnotationRecord]) -> Index {
    let mut index = Index::new();
    for r in records {
        index.insert((r.sentence_id.clone(), r.annotator_id.clone()), r.clone());
    }
    index
}

struct Inner {
    file: File,
    log: Vec<AnnotationRecord>,
    index: Index,
}

pub struct AnnotationStore {
    path: PathBuf,
    inner: Mutex<Inner>,
}

/// Parses the log at `path`. A final line without a newline is the remains of
/// an interrupted append (never acknowledged) and is reported as torn rather
/// than as corruption. Returns the records and the byte length of the valid
/// prefix.
pub fn read_log(path: &Path) -> Result<(Vec<AnnotationRecord>, u64)> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(AnnotateError::io(path, e)),
    };
    let mut records = Vec::new();
    let mut valid = 0usize;
    for (i, line) in bytes.split_inclusive(|b| *b == b'\n').enumerate() {
        if line.last() != Some(&b'\n') {
            break;
        }
        let body = &line[..line.len() - 1];
        if !body.iter().all(u8::is_ascii_whitespace) {
            let record = serde_json::from_slice(body).map_err(|e| AnnotateError::CorruptLog {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            records.push(record);
        }
        valid += line.len();
    }
    Ok((records, valid as u64))
}

impl AnnotationStore {
    /// Opens or creates the log, replays it and drops a torn final line.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let (log, valid) = read_log(&path)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| AnnotateError::io(&path, e))?;
        let len = file.metadata().map_err(|e| AnnotateError::io(&path, e))?.len();
        if len > valid {
            file.set_len(valid).map_err(|e| AnnotateError::io(&path, e))?;
            file.sync_all().map_err(|e| AnnotateError::io(&path, e))?;
        }
        let index = fold(&log);
        Ok(AnnotationStore {
            path,
            inner: Mutex::new(Inner { file, log, index }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Appends and syncs the record, then updates the index. Returns the new
    /// log length. The caller may acknowledge once this returns.
    pub fn append(&self, record: AnnotationRecord) -> Result<usize> {
        let mut line = serde_json::to_vec(&record).map_err(|e| AnnotateError::Core(e.into()))?;
        line.push(b'\n');
        let mut inner = self.lock();
        inner
            .file
            .write_all(&line)
            .and_then(|_| inner.file.sync_data())
            .map_err(|e| AnnotateError::io(&self.path, e))?;
        inner.index.insert(
            (record.sentence_id.clone(), record.annotator_id.clone()),
            record.clone(),
        );
        inner.log.push(record);
        Ok(inner.log.len())
    }

    pub fn len(&self) -> usize {
        self.lock().log.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Runs `f` against the current index while holding the store lock.
    pub fn with_index<R>(&self, f: impl FnOnce(&Index) -> R) -> R {
        f(&self.lock().index)
    }

    pub fn index(&self) -> Index {
        self.lock().index.clone()
    }

    pub fn log(&self) -> Vec<AnnotationRecord> {
        self.lock().log.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(s: &str, a: &str, l: &str, t: u64) -> AnnotationRecord {
        AnnotationRecord {
            sentence_id: s.into(),
            annotator_id: a.into(),
            label: Label::canonical(l),
            timestamp: t,
        }
    }

    #[test]
    fn resubmission_logs_both_and_indexes_latest() {
        let dir = tempfile::tempdir().unwrap();
        let store = AnnotationStore::open(dir.path().join("log.jsonl")).unwrap();
        assert_eq!(store.append(rec("s1", "a", "SEX", 1)).unwrap(), 1);
        assert_eq!(store.append(rec("s1", "a", "OTHER", 2)).unwrap(), 2);
        let index = store.index();
        assert_eq!(index.len(), 1);
        assert_eq!(index[&("s1".into(), "a".into())].label.as_str(), "OTHER");
    }

    #[test]
    fn torn_tail_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        {
            let store = AnnotationStore::open(&path).unwrap();
            store.append(rec("s1", "a", "SEX", 1)).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"sentence_id":"s2","annot"#).unwrap();
        drop(f);
        let store = AnnotationStore::open(&path).unwrap();
        assert_eq!(store.len(), 1);
        store.append(rec("s3", "a", "SEX", 3)).unwrap();
        drop(store);
        let (records, _) = read_log(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[1].sentence_id, "s3");
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        std::fs::write(&path, "garbage\n{}\n").unwrap();
        assert!(matches!(
            AnnotationStore::open(&path),
            Err(AnnotateError::CorruptLog { line: 1, .. })
        ));
    }
}
