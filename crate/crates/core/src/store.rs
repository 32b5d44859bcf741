//! File-backed artifact persistence.
//!
//! Every artifact is a JSONL file: a header line carrying the format name,
//! format version, record count and free-form metadata, followed by one JSON
//! record per line. Writes go to a temporary sibling and are renamed into
//! place, so readers see either the old file or the new one.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{format} artifact has version {found}, this build reads version {expected}")]
    MigrationRequired {
        format: String,
        found: u32,
        expected: u32,
    },
    #[error("corrupt artifact at byte {offset}: {reason}")]
    Integrity { offset: u64, reason: String },
    #[error("expected a {expected} artifact, found {found}")]
    WrongFormat { expected: String, found: String },
    #[error("serialization failed: {0}")]
    Serialize(String),
    #[error("not found: {0}")]
    NotFound(String),
}

impl StoreError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub meta: Map<String, Value>,
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| StoreError::io(dir, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "artifact".into());
    static SEQ: AtomicU64 = AtomicU64::new(0);
    let seq = SEQ.fetch_add(1, Ordering::Relaxed);
    let tmp = dir.join(format!(".{name}.{}.{seq}.tmp", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(StoreError::io(path, e));
    }
    Ok(())
}

pub fn encode_records<T: Serialize>(
    format: &str,
    version: u32,
    meta: Map<String, Value>,
    records: &[T],
) -> Result<String, StoreError> {
    let header = Header {
        format: format.to_string(),
        version,
        count: records.len(),
        meta,
    };
    let mut out = json_line(&header)?;
    for r in records {
        out.push_str(&json_line(r)?);
    }
    Ok(out)
}

fn json_line<T: Serialize + ?Sized>(value: &T) -> Result<String, StoreError> {
    let mut s = serde_json::to_string(value).map_err(|e| StoreError::Serialize(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Parses an artifact, checking the header and every record.
pub fn decode_records<T: DeserializeOwned>(
    text: &str,
    format: &str,
    version: u32,
) -> Result<(Header, Vec<T>), StoreError> {
    let mut offset = 0u64;
    let mut lines = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        match rest.find('\n') {
            Some(i) => {
                lines.push((offset, &rest[..i]));
                offset += i as u64 + 1;
                rest = &rest[i + 1..];
            }
            None => {
                return Err(StoreError::Integrity {
                    offset,
                    reason: "truncated record (missing line terminator)".into(),
                });
            }
        }
    }
    let Some(&(_, first)) = lines.first() else {
        return Err(StoreError::Integrity {
            offset: 0,
            reason: "empty file".into(),
        });
    };
    let header: Header = serde_json::from_str(first).map_err(|e| StoreError::Integrity {
        offset: 0,
        reason: format!("bad header: {e}"),
    })?;
    if header.format != format {
        return Err(StoreError::WrongFormat {
            expected: format.into(),
            found: header.format,
        });
    }
    if header.version != version {
        return Err(StoreError::MigrationRequired {
            format: header.format,
            found: header.version,
            expected: version,
        });
    }
    let mut records = Vec::with_capacity(header.count);
    for &(at, line) in &lines[1..] {
        let r = serde_json::from_str(line).map_err(|e| StoreError::Integrity {
            offset: at,
            reason: e.to_string(),
        })?;
        records.push(r);
    }
    if records.len() != header.count {
        return Err(StoreError::Integrity {
            offset,
            reason: format!("header declares {} records, found {}", header.count, records.len()),
        });
    }
    Ok((header, records))
}

pub fn save_records<T: Serialize>(
    path: &Path,
    format: &str,
    version: u32,
    meta: Map<String, Value>,
    records: &[T],
) -> Result<(), StoreError> {
    write_atomic(path, encode_records(format, version, meta, records)?.as_bytes())
}

pub fn load_records<T: DeserializeOwned>(
    path: &Path,
    format: &str,
    version: u32,
) -> Result<(Header, Vec<T>), StoreError> {
    let text = match fs::read(path) {
        Ok(bytes) => String::from_utf8(bytes).map_err(|e| StoreError::Integrity {
            offset: e.utf8_error().valid_up_to() as u64,
            reason: "invalid UTF-8".into(),
        })?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(StoreError::NotFound(path.display().to_string()))
        }
        Err(e) => return Err(StoreError::io(path, e)),
    };
    decode_records(&text, format, version)
}

/// Single-object artifact.
pub fn save_value<T: Serialize>(path: &Path, format: &str, version: u32, value: &T) -> Result<(), StoreError> {
    save_records(path, format, version, Map::new(), std::slice::from_ref(value))
}

pub fn load_value<T: DeserializeOwned>(path: &Path, format: &str, version: u32) -> Result<T, StoreError> {
    let (_, mut records) = load_records::<T>(path, format, version)?;
    match records.len() {
        1 => Ok(records.pop().unwrap()),
        n => Err(StoreError::Integrity {
            offset: 0,
            reason: format!("expected one record, found {n}"),
        }),
    }
}

/// Artifact kinds under a data directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Sessions,
    Runs,
    Indexes,
    Evals,
}

impl Kind {
    pub const ALL: [Kind; 4] = [Kind::Sessions, Kind::Runs, Kind::Indexes, Kind::Evals];

    pub fn dir_name(self) -> &'static str {
        match self {
            Kind::Sessions => "sessions",
            Kind::Runs => "runs",
            Kind::Indexes => "indexes",
            Kind::Evals => "evals",
        }
    }
}

/// `sessions/`, `runs/`, `indexes/` and `evals/` under one root.
#[derive(Debug, Clone)]
pub struct DataDir {
    root: PathBuf,
}

impl DataDir {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for k in Kind::ALL {
            let d = root.join(k.dir_name());
            fs::create_dir_all(&d).map_err(|e| StoreError::io(&d, e))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, kind: Kind, id: &str) -> PathBuf {
        self.root.join(kind.dir_name()).join(format!("{id}.jsonl"))
    }

    /// Ids of every artifact of `kind`, sorted.
    pub fn list(&self, kind: Kind) -> Result<Vec<String>, StoreError> {
        let dir = self.root.join(kind.dir_name());
        let mut ids: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| StoreError::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().to_string_lossy().into_owned();
                name.strip_suffix(".jsonl")
                    .filter(|s| !s.starts_with('.'))
                    .map(str::to_string)
            })
            .collect();
        ids.sort();
        Ok(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    struct Item {
        name: String,
        values: Vec<f64>,
    }

    #[test]
    fn empty_artifact_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        save_records::<Item>(&p, "item", 1, Map::new(), &[]).unwrap();
        let (h, r) = load_records::<Item>(&p, "item", 1).unwrap();
        assert_eq!(h.count, 0);
        assert!(r.is_empty());
    }

    #[test]
    fn version_mismatch_requires_migration() {
        let text = encode_records::<Item>("item", 2, Map::new(), &[]).unwrap();
        assert!(matches!(
            decode_records::<Item>(&text, "item", 1),
            Err(StoreError::MigrationRequired { found: 2, expected: 1, .. })
        ));
        assert!(matches!(
            decode_records::<Item>(&text, "other", 2),
            Err(StoreError::WrongFormat { .. })
        ));
    }

    #[test]
    fn corrupt_line_reports_its_offset() {
        let items = vec![
            Item { name: "a".into(), values: vec![1.0] },
            Item { name: "b".into(), values: vec![2.0] },
        ];
        let text = encode_records("item", 1, Map::new(), &items).unwrap();
        let second = text.find("{\"name\":\"b\"").unwrap();
        let mut bad = text.clone();
        bad.replace_range(second..second + 1, "#");
        match decode_records::<Item>(&bad, "item", 1) {
            Err(StoreError::Integrity { offset, .. }) => assert_eq!(offset, second as u64),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_record_is_detected() {
        let items = vec![Item { name: "a".into(), values: vec![] }; 3];
        let text = encode_records("item", 1, Map::new(), &items).unwrap();
        let cut: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            decode_records::<Item>(&cut, "item", 1),
            Err(StoreError::Integrity { offset, .. }) if offset == cut.len() as u64
        ));
    }

    #[test]
    fn missing_file_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_records::<Item>(&dir.path().join("nope.jsonl"), "item", 1),
            Err(StoreError::NotFound(_))
        ));
    }

    #[test]
    fn data_dir_layout() {
        let dir = tempfile::tempdir().unwrap();
        let d = DataDir::open(dir.path()).unwrap();
        for k in Kind::ALL {
            assert!(dir.path().join(k.dir_name()).is_dir());
        }
        save_value(&d.path(Kind::Runs, "r2"), "x", 1, &1).unwrap();
        save_value(&d.path(Kind::Runs, "r1"), "x", 1, &2).unwrap();
        assert_eq!(d.list(Kind::Runs).unwrap(), vec!["r1", "r2"]);
        assert_eq!(load_value::<i32>(&d.path(Kind::Runs, "r1"), "x", 1).unwrap(), 2);
    }

    proptest! {
        #[test]
        fn randomized_round_trip(
            items in prop::collection::vec(
                ("[a-z\"\\\\\n ]{0,12}", prop::collection::vec(-1e12f64..1e12, 0..6))
                    .prop_map(|(name, values)| Item { name, values }),
                0..20,
            )
        ) {
            let text = encode_records("item", 3, Map::new(), &items).unwrap();
            let (_, back) = decode_records::<Item>(&text, "item", 3).unwrap();
            prop_assert_eq!(back, items);
        }

        #[test]
        fn any_truncation_is_rejected(cut in 0usize..1000) {
            let items = vec![Item { name: "abc".into(), values: vec![1.5, -2.25] }; 5];
            let text = encode_records("item", 1, Map::new(), &items).unwrap();
            let cut = cut % text.len();
            let outcome = decode_records::<Item>(&text[..cut], "item", 1);
            prop_assert!(matches!(outcome, Err(StoreError::Integrity { .. })), "cut at {}", cut);
        }
    }
}
