//! The crowdsourcing platform: wire types, the requester and worker client
//! traits, an embedded service, its HTTP front end, and simulated workers.

mod http;
mod service;
mod sim;

pub use http::{router, HttpPlatform, ServerHandle};
pub use service::Platform;
pub use sim::{
    simulate_workers, worker_pool, Latency, SimMode, SimulatedCrowd, TranscriptEntry, WorkerProfile,
};

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clock::{ts_format, Timestamp};
use crate::persistence::StoreError;
use crate::presenter::Presenter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Pending,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub project_id: String,
    pub fingerprint: String,
    pub payload: Value,
    pub n_assignments: u32,
    #[serde(with = "ts_format")]
    pub published_at: Timestamp,
    pub status: TaskStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub task_id: String,
    pub worker_id: String,
    pub answer: Value,
    #[serde(with = "ts_format")]
    pub submitted_at: Timestamp,
}

/// A task handed to a worker together with the presenter that displays it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkItem {
    pub task: TaskRecord,
    pub presenter: Presenter,
}

#[derive(Debug, thiserror::Error)]
pub enum PlatformError {
    #[error("unknown project {0}")]
    UnknownProject(String),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("project {0} already exists with a different presenter")]
    PresenterConflict(String),
    #[error("fingerprint {0} already published with a different payload")]
    FingerprintConflict(String),
    #[error("worker {worker_id} already answered task {task_id}")]
    AlreadyAnswered { task_id: String, worker_id: String },
    #[error("task {0} already has all its answers")]
    TaskComplete(String),
    #[error("answer {answer} does not fit the answer schema of task {task_id}")]
    SchemaViolation { task_id: String, answer: String },
    #[error("no ground truth for task fingerprint {0}")]
    MissingGroundTruth(String),
    #[error("platform unreachable: {0}")]
    Unreachable(String),
    #[error("platform protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl PlatformError {
    /// Stable error code used in HTTP error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            PlatformError::UnknownProject(_) => "unknown_project",
            PlatformError::UnknownTask(_) => "unknown_task",
            PlatformError::PresenterConflict(_) => "presenter_conflict",
            PlatformError::FingerprintConflict(_) => "fingerprint_conflict",
            PlatformError::AlreadyAnswered { .. } => "already_answered",
            PlatformError::TaskComplete(_) => "task_complete",
            PlatformError::SchemaViolation { .. } => "schema_violation",
            PlatformError::MissingGroundTruth(_) => "missing_ground_truth",
            PlatformError::Unreachable(_) => "unreachable",
            PlatformError::Protocol(_) => "bad_request",
            PlatformError::Store(_) => "store_error",
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, PlatformError::Unreachable(_))
    }
}

/// Requester-side view of a platform.
pub trait PlatformClient {
    fn create_project(&self, name: &str, presenter: &Presenter) -> Result<String, PlatformError>;
    fn publish(
        &self,
        project_id: &str,
        payload: &Value,
        n_assignments: u32,
        fingerprint: &str,
    ) -> Result<TaskRecord, PlatformError>;
    fn fetch_results(&self, task_id: &str) -> Result<Vec<Assignment>, PlatformError>;
}

/// Worker-side view of a platform.
pub trait WorkerApi {
    fn next_task(
        &self,
        project_id: &str,
        worker_id: &str,
    ) -> Result<Option<WorkItem>, PlatformError>;
    fn submit_answer(
        &self,
        task_id: &str,
        worker_id: &str,
        answer: &Value,
    ) -> Result<Assignment, PlatformError>;
}

impl<T: PlatformClient + ?Sized> PlatformClient for Arc<T> {
    fn create_project(&self, name: &str, presenter: &Presenter) -> Result<String, PlatformError> {
        (**self).create_project(name, presenter)
    }
    fn publish(
        &self,
        project_id: &str,
        payload: &Value,
        n_assignments: u32,
        fingerprint: &str,
    ) -> Result<TaskRecord, PlatformError> {
        (**self).publish(project_id, payload, n_assignments, fingerprint)
    }
    fn fetch_results(&self, task_id: &str) -> Result<Vec<Assignment>, PlatformError> {
        (**self).fetch_results(task_id)
    }
}

impl<T: WorkerApi + ?Sized> WorkerApi for Arc<T> {
    fn next_task(
        &self,
        project_id: &str,
        worker_id: &str,
    ) -> Result<Option<WorkItem>, PlatformError> {
        (**self).next_task(project_id, worker_id)
    }
    fn submit_answer(
        &self,
        task_id: &str,
        worker_id: &str,
        answer: &Value,
    ) -> Result<Assignment, PlatformError> {
        (**self).submit_answer(task_id, worker_id, answer)
    }
}

/// A platform that is never reachable. Pipelines that complete against it
/// ran entirely from the cache.
#[derive(Debug, Default, Clone, Copy)]
pub struct OfflinePlatform;

impl PlatformClient for OfflinePlatform {
    fn create_project(&self, _: &str, _: &Presenter) -> Result<String, PlatformError> {
        Err(PlatformError::Unreachable("offline".into()))
    }
    fn publish(&self, _: &str, _: &Value, _: u32, _: &str) -> Result<TaskRecord, PlatformError> {
        Err(PlatformError::Unreachable("offline".into()))
    }
    fn fetch_results(&self, _: &str) -> Result<Vec<Assignment>, PlatformError> {
        Err(PlatformError::Unreachable("offline".into()))
    }
}
