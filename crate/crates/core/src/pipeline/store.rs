//! JSONL and JSON persistence with atomic replacement.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::hashing::sha256_hex;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write `bytes` to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io(&tmp))?;
        f.write_all(bytes).map_err(io(&tmp))?;
        f.sync_all().map_err(io(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io(path))
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn save_records<T: Serialize>(records: &[T], path: &Path) -> Result<(), StoreError> {
    write_atomic(path, to_jsonl(records).as_bytes())
}

pub fn load_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let raw = fs::read_to_string(path).map_err(io(path))?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StoreError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<(), StoreError> {
    write_atomic(path, to_json(value).as_bytes())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let raw = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&raw).map_err(|e| StoreError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn save_text(text: &str, path: &Path) -> Result<(), StoreError> {
    write_atomic(path, text.as_bytes())
}

pub fn file_hash(path: &Path) -> Result<String, StoreError> {
    Ok(sha256_hex(&fs::read(path).map_err(io(path))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::{ScoreKind, ScorePhase, ScoreRecord};

    fn record(i: usize) -> ScoreRecord {
        ScoreRecord {
            profile_id: format!("p-{i:04}"),
            kind: if i.is_multiple_of(2) { ScoreKind::Profile } else { ScoreKind::Behavior },
            phase: ScorePhase::Propagated,
            value: 1.0 + i as f64 / 7.0,
            explanation: format!("line with \"quotes\" and\nnewline {i}"),
            scorer: "s".into(),
            timestamp: "1970-01-01T00:00:00Z".into(),
            repetition: i.is_multiple_of(3).then_some(i as u32),
            raw_value: None,
        }
    }

    #[test]
    fn round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.jsonl");
        let recs: Vec<_> = (0..100).map(record).collect();
        save_records(&recs, &path).unwrap();
        assert_eq!(load_records::<ScoreRecord>(&path).unwrap(), recs);

        save_records::<ScoreRecord>(&[], &path).unwrap();
        assert_eq!(fs::read(&path).unwrap().len(), 0);
        assert!(load_records::<ScoreRecord>(&path).unwrap().is_empty());
    }

    #[test]
    fn truncated_line_names_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.jsonl");
        let mut text = to_jsonl(&[record(0), record(1), record(2)]);
        text.truncate(text.len() - 20);
        fs::write(&path, text).unwrap();
        match load_records::<ScoreRecord>(&path) {
            Err(StoreError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
