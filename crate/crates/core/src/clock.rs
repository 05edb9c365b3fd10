//! Time sources and the fixed timestamp format used on disk and on the wire.

use std::sync::atomic::{AtomicU64, Ordering};

use chrono::{DateTime, Duration, SecondsFormat, TimeZone, Utc};

pub type Timestamp = DateTime<Utc>;

/// RFC 3339, UTC, millisecond precision, `Z` suffix.
pub fn format_ts(ts: &Timestamp) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn parse_ts(s: &str) -> Option<Timestamp> {
    DateTime::parse_from_rfc3339(s)
        .ok()
        .map(|t| t.with_timezone(&Utc))
}

/// Serde adapter pinning timestamps to [`format_ts`].
pub mod ts_format {
    use super::*;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ts: &Timestamp, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_ts(ts))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Timestamp, D::Error> {
        let raw = String::deserialize(d)?;
        parse_ts(&raw).ok_or_else(|| D::Error::custom(format!("bad timestamp {raw:?}")))
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        // Truncate to what the on-disk format can represent.
        let now = Utc::now();
        Utc.timestamp_millis_opt(now.timestamp_millis())
            .single()
            .unwrap_or(now)
    }
}

/// Deterministic clock: every call advances by a fixed step from a fixed start.
#[derive(Debug)]
pub struct LogicalClock {
    start: Timestamp,
    step_ms: i64,
    ticks: AtomicU64,
}

impl LogicalClock {
    pub fn new(start: Timestamp, step_ms: i64) -> Self {
        Self {
            start,
            step_ms,
            ticks: AtomicU64::new(0),
        }
    }
}

impl Default for LogicalClock {
    fn default() -> Self {
        Self::new(Utc.with_ymd_and_hms(2016, 1, 1, 0, 0, 0).unwrap(), 1000)
    }
}

impl Clock for LogicalClock {
    fn now(&self) -> Timestamp {
        let n = self.ticks.fetch_add(1, Ordering::SeqCst) as i64;
        self.start + Duration::milliseconds(n * self.step_ms)
    }
}
