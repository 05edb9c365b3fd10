//! Append-only record log backing both the pipeline cache and the platform.
//!
//! File layout (`.cpdb`, format version 1):
//!
//! ```text
//! {"format":"cpdb","version":1}\n
//! <canonical JSON record>\n
//! <canonical JSON record>\n
//! ...
//! ```
//!
//! Every record is a canonical JSON object with the fields `crc32`, `key`,
//! `kind`, `payload`, `project`, `seq`, `table` and `ts`. `crc32` is the
//! lowercase 8-digit hex CRC-32 (IEEE) of the canonical serialization of the
//! record without the `crc32` field. A record counts as written only once its
//! trailing newline is on disk; a torn or checksum-failing final line is
//! dropped on replay, any earlier damage is fatal.

mod record;
mod store;

pub use record::{CacheKey, CacheRecord, RecordKind};
pub use store::{replay, replay_bytes, Replayed, Store, StoreState};

use std::path::PathBuf;

pub const FORMAT_NAME: &str = "cpdb";
pub const FORMAT_VERSION: u64 = 1;
pub const HEADER_LINE: &str = r#"{"format":"cpdb","version":1}"#;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt log at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error("unsupported store format {found}")]
    VersionMismatch { found: String },
    #[error("conflicting {kind} record for key {key}")]
    DuplicateTaskKey { kind: RecordKind, key: String },
    #[error("store {0} is locked by another context")]
    Locked(PathBuf),
}
