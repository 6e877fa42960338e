//! Line-delimited metrics: one JSON object per line, each tagged with a
//! `kind` key.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rdpm::{Error, Result};
use serde_json::{Map, Value};

pub struct MetricsReport {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsReport {
    /// Starts a fresh report at `path`, replacing any earlier run's file.
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(Self {
            path,
            out: BufWriter::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends `{"kind": kind, ..fields}` and flushes.
    pub fn record(&mut self, kind: &str, fields: Value) -> Result<()> {
        let mut obj = Map::new();
        obj.insert("kind".into(), Value::String(kind.into()));
        match fields {
            Value::Object(m) => obj.extend(m),
            Value::Null => {}
            other => {
                obj.insert("value".into(), other);
            }
        }
        let line = serde_json::to_string(&Value::Object(obj)).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::Io {
                path: self.path.clone(),
                source: e,
            })
    }
}

/// Parses a report back into its records.
pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<Value>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Record {
                index: i,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn lines_are_self_describing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut r = MetricsReport::create(&path).unwrap();
        r.record("epoch", json!({"epoch": 1, "loss": 0.5})).unwrap();
        r.record("note", json!(3)).unwrap();
        drop(r);
        let rows = read_report(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0]["kind"], "epoch");
        assert_eq!(rows[0]["loss"], 0.5);
        assert_eq!(rows[1]["value"], 3);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().all(|l| l.starts_with("{\"kind\":")));
    }
}
