use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::StoreError;
use crate::canonical::to_canonical_string;
use crate::clock::{ts_format, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordKind {
    Task,
    Assignment,
    ProjectMeta,
}

impl RecordKind {
    /// Kinds that admit at most one payload per key.
    pub fn is_unique(self) -> bool {
        !matches!(self, RecordKind::Assignment)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::Task => "task",
            RecordKind::Assignment => "assignment",
            RecordKind::ProjectMeta => "project-meta",
        }
    }
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Index key of a record: which project and table it belongs to, what kind
/// of side effect it captures, and the content fingerprint it is keyed on.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey {
    pub project: String,
    pub table: String,
    pub kind: RecordKind,
    pub key: String,
}

impl CacheKey {
    pub fn new(
        project: impl Into<String>,
        table: impl Into<String>,
        kind: RecordKind,
        key: impl Into<String>,
    ) -> Self {
        Self {
            project: project.into(),
            table: table.into(),
            kind,
            key: key.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub seq: u64,
    #[serde(with = "ts_format")]
    pub ts: Timestamp,
    pub project: String,
    pub table: String,
    pub kind: RecordKind,
    pub key: String,
    pub payload: Value,
}

impl CacheRecord {
    pub fn cache_key(&self) -> CacheKey {
        CacheKey::new(&self.project, &self.table, self.kind, &self.key)
    }

    fn body(&self) -> Map<String, Value> {
        match serde_json::to_value(self) {
            Ok(Value::Object(map)) => map,
            _ => unreachable!("CacheRecord always serializes to an object"),
        }
    }

    /// One log line, without the trailing newline.
    pub fn encode(&self) -> String {
        let mut body = self.body();
        let crc = crc32fast::hash(to_canonical_string(&Value::Object(body.clone())).as_bytes());
        body.insert("crc32".into(), Value::String(format!("{crc:08x}")));
        to_canonical_string(&Value::Object(body))
    }

    pub(crate) fn decode(line: &str, line_no: usize) -> Result<Self, StoreError> {
        let corrupt = |reason: String| StoreError::CorruptLog {
            line: line_no,
            reason,
        };
        let value: Value =
            serde_json::from_str(line).map_err(|e| corrupt(format!("invalid json: {e}")))?;
        let Value::Object(mut body) = value else {
            return Err(corrupt("record is not an object".into()));
        };
        let stored = match body.remove("crc32") {
            Some(Value::String(s)) => u32::from_str_radix(&s, 16)
                .map_err(|_| corrupt(format!("bad crc32 field {s:?}")))?,
            _ => return Err(corrupt("missing crc32".into())),
        };
        let actual = crc32fast::hash(to_canonical_string(&Value::Object(body.clone())).as_bytes());
        if actual != stored {
            return Err(corrupt(format!(
                "crc32 mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        serde_json::from_value(Value::Object(body)).map_err(|e| corrupt(format!("bad record: {e}")))
    }
}
