//! Read-only questions over a store snapshot: when was each task published,
//! and which workers answered it.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clock::{format_ts, ts_format, Timestamp};
use crate::persistence::{replay, CacheRecord, RecordKind, StoreError, StoreState};
use crate::platform::{Assignment, TaskRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Published,
    Answered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageEvent {
    pub kind: EventKind,
    pub table: String,
    pub object_fingerprint: String,
    pub task_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worker_id: Option<String>,
    #[serde(with = "ts_format")]
    pub ts: Timestamp,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer: Option<Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSummary {
    pub tasks: usize,
    pub assignments: usize,
    pub workers: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub project: String,
    pub tasks: usize,
    pub assignments: usize,
    pub workers: usize,
    pub first_ts: Option<String>,
    pub last_ts: Option<String>,
    pub tables: BTreeMap<String, TableSummary>,
}

#[derive(Debug, thiserror::Error)]
pub enum LineageError {
    #[error("no task recorded for object {0}")]
    UnknownObject(String),
    #[error("unreadable record {seq}: {reason}")]
    BadRecord { seq: u64, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// A replayed snapshot of a store file. Never writes.
#[derive(Debug, Clone)]
pub struct Lineage {
    state: StoreState,
}

impl Lineage {
    /// Replays the file at `path` without taking the writer's lock, so it can
    /// run next to a live pipeline.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LineageError> {
        let path = path.as_ref();
        if !path.exists() {
            return Ok(Self {
                state: StoreState::default(),
            });
        }
        Ok(Self {
            state: replay(path)?.state,
        })
    }

    pub fn from_state(state: StoreState) -> Self {
        Self { state }
    }

    fn event(record: &CacheRecord) -> Result<Option<LineageEvent>, LineageError> {
        let bad = |e: serde_json::Error| LineageError::BadRecord {
            seq: record.seq,
            reason: e.to_string(),
        };
        Ok(match record.kind {
            RecordKind::Task => {
                let t: TaskRecord = serde_json::from_value(record.payload.clone()).map_err(bad)?;
                Some(LineageEvent {
                    kind: EventKind::Published,
                    table: record.table.clone(),
                    object_fingerprint: record.key.clone(),
                    task_id: t.task_id,
                    worker_id: None,
                    ts: t.published_at,
                    answer: None,
                })
            }
            RecordKind::Assignment => {
                let a: Assignment = serde_json::from_value(record.payload.clone()).map_err(bad)?;
                Some(LineageEvent {
                    kind: EventKind::Answered,
                    table: record.table.clone(),
                    object_fingerprint: record.key.clone(),
                    task_id: a.task_id,
                    worker_id: Some(a.worker_id),
                    ts: a.submitted_at,
                    answer: Some(a.answer),
                })
            }
            RecordKind::ProjectMeta => None,
        })
    }

    /// Every published and answered event of a project, in store order.
    pub fn events(&self, project: &str) -> Result<Vec<LineageEvent>, LineageError> {
        let mut out = Vec::new();
        for r in self.state.records().iter().filter(|r| r.project == project) {
            if let Some(e) = Self::event(r)? {
                out.push(e);
            }
        }
        Ok(out)
    }

    /// The publication of an object's task followed by its answers. An object
    /// used in several tables yields one such group per table.
    pub fn task_history(
        &self,
        project: &str,
        object_fingerprint: &str,
    ) -> Result<Vec<LineageEvent>, LineageError> {
        let events: Vec<LineageEvent> = self
            .events(project)?
            .into_iter()
            .filter(|e| e.object_fingerprint == object_fingerprint)
            .collect();
        if !events.iter().any(|e| e.kind == EventKind::Published) {
            return Err(LineageError::UnknownObject(object_fingerprint.to_string()));
        }
        let table_order: Vec<String> = events
            .iter()
            .filter(|e| e.kind == EventKind::Published)
            .map(|e| e.table.clone())
            .collect();
        let mut grouped = Vec::with_capacity(events.len());
        for table in &table_order {
            grouped.extend(events.iter().filter(|e| &e.table == table).cloned());
        }
        Ok(grouped)
    }

    pub fn worker_assignments(
        &self,
        project: &str,
        worker_id: &str,
    ) -> Result<Vec<LineageEvent>, LineageError> {
        Ok(self
            .events(project)?
            .into_iter()
            .filter(|e| e.kind == EventKind::Answered && e.worker_id.as_deref() == Some(worker_id))
            .collect())
    }

    pub fn experiment_summary(&self, project: &str) -> Result<SummaryReport, LineageError> {
        let events = self.events(project)?;
        let mut report = SummaryReport {
            project: project.to_string(),
            ..Default::default()
        };
        let mut workers = BTreeSet::new();
        let mut table_workers: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for e in &events {
            let t = report.tables.entry(e.table.clone()).or_default();
            match e.kind {
                EventKind::Published => {
                    report.tasks += 1;
                    t.tasks += 1;
                }
                EventKind::Answered => {
                    report.assignments += 1;
                    t.assignments += 1;
                    let w = e.worker_id.clone().unwrap_or_default();
                    table_workers
                        .entry(e.table.clone())
                        .or_default()
                        .insert(w.clone());
                    workers.insert(w);
                }
            }
        }
        for (table, ws) in table_workers {
            report.tables.entry(table).or_default().workers = ws.len();
        }
        report.workers = workers.len();
        report.first_ts = events.iter().map(|e| e.ts).min().map(|t| format_ts(&t));
        report.last_ts = events.iter().map(|e| e.ts).max().map(|t| format_ts(&t));
        Ok(report)
    }
}
