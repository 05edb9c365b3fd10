use std::collections::HashMap;
use std::fs::{File, OpenOptions, TryLockError};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::Value;
use tracing::warn;

use super::{
    CacheKey, CacheRecord, RecordKind, StoreError, FORMAT_NAME, FORMAT_VERSION, HEADER_LINE,
};
use crate::clock::{Clock, SystemClock};

/// In-memory image of a log: the records in seq order plus an index by key.
#[derive(Debug, Clone, Default)]
pub struct StoreState {
    records: Vec<CacheRecord>,
    by_key: HashMap<CacheKey, Vec<usize>>,
}

impl PartialEq for StoreState {
    // by_key is derived from records, so comparing records is sufficient.
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records
    }
}

impl StoreState {
    pub fn records(&self) -> &[CacheRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last_seq(&self) -> u64 {
        self.records.last().map_or(0, |r| r.seq)
    }

    /// All records under `key` in seq order. Unique kinds yield at most one.
    pub fn get(&self, key: &CacheKey) -> Vec<&CacheRecord> {
        self.by_key
            .get(key)
            .map(|ix| ix.iter().map(|&i| &self.records[i]).collect())
            .unwrap_or_default()
    }

    pub fn get_one(&self, key: &CacheKey) -> Option<&CacheRecord> {
        self.by_key
            .get(key)
            .and_then(|ix| ix.first())
            .map(|&i| &self.records[i])
    }

    /// Returns an existing record with an identical payload, if any, or
    /// rejects a conflicting payload for unique kinds.
    fn existing(
        &self,
        key: &CacheKey,
        payload: &Value,
    ) -> Result<Option<&CacheRecord>, StoreError> {
        let matching = self.get(key);
        if let Some(same) = matching.iter().find(|r| &r.payload == payload) {
            return Ok(Some(same));
        }
        if key.kind.is_unique() && !matching.is_empty() {
            return Err(StoreError::DuplicateTaskKey {
                kind: key.kind,
                key: key.key.clone(),
            });
        }
        Ok(None)
    }

    fn push(&mut self, record: CacheRecord) {
        self.by_key
            .entry(record.cache_key())
            .or_default()
            .push(self.records.len());
        self.records.push(record);
    }
}

/// Result of replaying a log image.
#[derive(Debug)]
pub struct Replayed {
    pub state: StoreState,
    /// Byte length of the valid prefix (header plus intact records).
    pub valid_len: u64,
    /// Whether a torn or damaged final line was discarded.
    pub dropped_tail: bool,
}

pub fn replay(path: &Path) -> Result<Replayed, StoreError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    replay_bytes(&bytes)
}

pub fn replay_bytes(bytes: &[u8]) -> Result<Replayed, StoreError> {
    let mut state = StoreState::default();
    if bytes.is_empty() {
        return Ok(Replayed {
            state,
            valid_len: 0,
            dropped_tail: false,
        });
    }

    let mut lines: Vec<&[u8]> = bytes.split_inclusive(|&b| b == b'\n').collect();
    let last_ix = lines.len() - 1;

    // Header.
    let header = lines.remove(0);
    let Some(header_body) = header.strip_suffix(b"\n") else {
        warn!("discarding torn store header");
        return Ok(Replayed {
            state,
            valid_len: 0,
            dropped_tail: true,
        });
    };
    check_header(header_body)?;
    let mut valid_len = header.len() as u64;
    let mut dropped_tail = false;

    for (i, raw) in lines.iter().enumerate() {
        let line_no = i + 2;
        let is_final = i + 1 == last_ix;
        let decoded = match raw.strip_suffix(b"\n") {
            None => Err(StoreError::CorruptLog {
                line: line_no,
                reason: "torn write".into(),
            }),
            Some(body) => std::str::from_utf8(body)
                .map_err(|_| StoreError::CorruptLog {
                    line: line_no,
                    reason: "invalid utf-8".into(),
                })
                .and_then(|s| CacheRecord::decode(s, line_no)),
        };
        let record = match decoded {
            Ok(r) => r,
            Err(e) if is_final => {
                warn!("dropping damaged final record: {e}");
                dropped_tail = true;
                break;
            }
            Err(e) => return Err(e),
        };
        if record.seq <= state.last_seq() {
            return Err(StoreError::CorruptLog {
                line: line_no,
                reason: format!("seq {} does not follow {}", record.seq, state.last_seq()),
            });
        }
        if record.kind.is_unique() && !state.get(&record.cache_key()).is_empty() {
            return Err(StoreError::CorruptLog {
                line: line_no,
                reason: format!("duplicate {} record for key {}", record.kind, record.key),
            });
        }
        state.push(record);
        valid_len += raw.len() as u64;
    }
    Ok(Replayed {
        state,
        valid_len,
        dropped_tail,
    })
}

fn check_header(body: &[u8]) -> Result<(), StoreError> {
    let corrupt = |reason: &str| StoreError::CorruptLog {
        line: 1,
        reason: reason.into(),
    };
    let header: Value = serde_json::from_slice(body).map_err(|_| corrupt("unreadable header"))?;
    if header.get("format").and_then(Value::as_str) != Some(FORMAT_NAME) {
        return Err(corrupt("not a cpdb file"));
    }
    match header.get("version").and_then(Value::as_u64) {
        Some(FORMAT_VERSION) => Ok(()),
        _ => Err(StoreError::VersionMismatch {
            found: header
                .get("version")
                .map_or("none".into(), Value::to_string),
        }),
    }
}

/// The single writer of a log file. Holds an exclusive advisory lock on the
/// file for as long as it lives.
pub struct Store {
    path: PathBuf,
    file: File,
    state: StoreState,
    clock: Arc<dyn Clock>,
    unsynced: bool,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("path", &self.path)
            .field("records", &self.state.len())
            .finish()
    }
}

impl Store {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::open_with_clock(path, Arc::new(SystemClock))
    }

    pub fn open_with_clock(
        path: impl AsRef<Path>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)?;
        match file.try_lock() {
            Ok(()) => {}
            Err(TryLockError::WouldBlock) => return Err(StoreError::Locked(path)),
            Err(TryLockError::Error(e)) => return Err(e.into()),
        }

        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let replayed = replay_bytes(&bytes)?;
        if replayed.valid_len < bytes.len() as u64 {
            warn!(path = %path.display(), "truncating store to last intact record");
            file.set_len(replayed.valid_len)?;
        }
        file.seek(SeekFrom::End(0))?;
        if replayed.valid_len == 0 {
            file.write_all(HEADER_LINE.as_bytes())?;
            file.write_all(b"\n")?;
            file.sync_all()?;
        }
        Ok(Self {
            path,
            file,
            state: replayed.state,
            clock,
            unsynced: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn state(&self) -> &StoreState {
        &self.state
    }

    pub fn cache_get(&self, key: &CacheKey) -> Vec<&CacheRecord> {
        self.state.get(key)
    }

    pub fn cache_get_one(&self, key: &CacheKey) -> Option<&CacheRecord> {
        self.state.get_one(key)
    }

    /// Appends a record. Unique kinds are synced to disk before returning;
    /// assignment records are written immediately but only synced by
    /// [`Store::sync`]. Re-putting an identical payload is a no-op that
    /// returns the original record.
    pub fn cache_put(&mut self, key: CacheKey, payload: Value) -> Result<CacheRecord, StoreError> {
        if let Some(existing) = self.state.existing(&key, &payload)? {
            return Ok(existing.clone());
        }
        let record = CacheRecord {
            seq: self.state.last_seq() + 1,
            ts: self.clock.now(),
            project: key.project,
            table: key.table,
            kind: key.kind,
            key: key.key,
            payload,
        };
        let mut line = record.encode();
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        if record.kind == RecordKind::Assignment {
            self.unsynced = true;
        } else {
            self.file.sync_data()?;
            self.unsynced = false;
        }
        self.state.push(record.clone());
        Ok(record)
    }

    pub fn sync(&mut self) -> Result<(), StoreError> {
        if self.unsynced {
            self.file.sync_data()?;
            self.unsynced = false;
        }
        Ok(())
    }
}

impl Drop for Store {
    fn drop(&mut self) {
        let _ = self.sync();
    }
}
