use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    Assignment, PlatformClient, PlatformError, TaskRecord, TaskStatus, WorkItem, WorkerApi,
};
use crate::clock::{Clock, SystemClock};
use crate::persistence::{CacheKey, RecordKind, Store};
use crate::presenter::Presenter;

const LOG_PROJECT: &str = "platform";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProjectEntry {
    project_id: String,
    name: String,
    presenter: Presenter,
}

#[derive(Debug)]
struct TaskEntry {
    record: TaskRecord,
    assignments: Vec<Assignment>,
}

#[derive(Debug, Default)]
struct State {
    projects: Vec<ProjectEntry>,
    by_name: HashMap<String, usize>,
    tasks: Vec<TaskEntry>,
    by_fingerprint: HashMap<(String, String), usize>,
    project_tasks: HashMap<String, Vec<usize>>,
    log: Option<Store>,
}

/// Ids are `prj-N` / `tsk-N` with N counting from 1 in creation order.
fn index_of(id: &str, prefix: &str) -> Option<usize> {
    id.strip_prefix(prefix)?
        .parse::<usize>()
        .ok()?
        .checked_sub(1)
}

impl State {
    fn project(&self, project_id: &str) -> Result<&ProjectEntry, PlatformError> {
        index_of(project_id, "prj-")
            .and_then(|i| self.projects.get(i))
            .ok_or_else(|| PlatformError::UnknownProject(project_id.to_string()))
    }

    fn task_index(&self, task_id: &str) -> Result<usize, PlatformError> {
        index_of(task_id, "tsk-")
            .filter(|&i| i < self.tasks.len())
            .ok_or_else(|| PlatformError::UnknownTask(task_id.to_string()))
    }

    fn log_put(
        &mut self,
        table: &str,
        kind: RecordKind,
        key: &str,
        payload: Value,
    ) -> Result<(), PlatformError> {
        if let Some(log) = self.log.as_mut() {
            log.cache_put(CacheKey::new(LOG_PROJECT, table, kind, key), payload)?;
            if kind == RecordKind::Assignment {
                log.sync()?;
            }
        }
        Ok(())
    }

    fn apply_project(&mut self, entry: ProjectEntry) {
        self.by_name.insert(entry.name.clone(), self.projects.len());
        self.projects.push(entry);
    }

    fn apply_task(&mut self, record: TaskRecord) {
        let ix = self.tasks.len();
        self.by_fingerprint
            .insert((record.project_id.clone(), record.fingerprint.clone()), ix);
        self.project_tasks
            .entry(record.project_id.clone())
            .or_default()
            .push(ix);
        self.tasks.push(TaskEntry {
            record,
            assignments: Vec::new(),
        });
    }

    fn apply_assignment(&mut self, ix: usize, assignment: Assignment) {
        let entry = &mut self.tasks[ix];
        entry.assignments.push(assignment);
        if entry.assignments.len() as u32 >= entry.record.n_assignments {
            entry.record.status = TaskStatus::Complete;
        }
    }
}

/// Embedded platform service. All operations are linearized by one lock.
pub struct Platform {
    state: Mutex<State>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for Platform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Platform").finish_non_exhaustive()
    }
}

impl Platform {
    /// Volatile platform, state lives only in memory.
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self {
            state: Mutex::new(State::default()),
            clock,
        }
    }

    /// Platform whose state is journaled to (and recovered from) a `.cpdb` log.
    pub fn open(path: impl AsRef<Path>, clock: Arc<dyn Clock>) -> Result<Self, PlatformError> {
        let log = Store::open_with_clock(path, Arc::new(SystemClock))?;
        let mut state = State::default();
        let records = log.state().records().to_vec();
        for record in records {
            let bad = |e: serde_json::Error| {
                PlatformError::Protocol(format!("platform log record {}: {e}", record.seq))
            };
            match record.kind {
                RecordKind::ProjectMeta => state
                    .apply_project(serde_json::from_value(record.payload.clone()).map_err(bad)?),
                RecordKind::Task => {
                    state.apply_task(serde_json::from_value(record.payload.clone()).map_err(bad)?)
                }
                RecordKind::Assignment => {
                    let a: Assignment =
                        serde_json::from_value(record.payload.clone()).map_err(bad)?;
                    let ix = state.task_index(&a.task_id)?;
                    state.apply_assignment(ix, a);
                }
            }
        }
        state.log = Some(log);
        Ok(Self {
            state: Mutex::new(state),
            clock,
        })
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn create_project(
        &self,
        name: &str,
        presenter: &Presenter,
    ) -> Result<String, PlatformError> {
        let mut st = self.lock();
        if let Some(&ix) = st.by_name.get(name) {
            let existing = &st.projects[ix];
            return if existing.presenter.version_hash == presenter.version_hash {
                Ok(existing.project_id.clone())
            } else {
                Err(PlatformError::PresenterConflict(name.to_string()))
            };
        }
        let entry = ProjectEntry {
            project_id: format!("prj-{}", st.projects.len() + 1),
            name: name.to_string(),
            presenter: presenter.clone(),
        };
        let payload = serde_json::to_value(&entry).expect("project entry serializes");
        st.log_put(&entry.project_id, RecordKind::ProjectMeta, name, payload)?;
        let id = entry.project_id.clone();
        st.apply_project(entry);
        Ok(id)
    }

    pub fn publish(
        &self,
        project_id: &str,
        payload: &Value,
        n_assignments: u32,
        fingerprint: &str,
    ) -> Result<TaskRecord, PlatformError> {
        let mut st = self.lock();
        st.project(project_id)?;
        if let Some(&ix) = st
            .by_fingerprint
            .get(&(project_id.to_string(), fingerprint.to_string()))
        {
            let existing = &st.tasks[ix].record;
            return if &existing.payload == payload && existing.n_assignments == n_assignments {
                Ok(existing.clone())
            } else {
                Err(PlatformError::FingerprintConflict(fingerprint.to_string()))
            };
        }
        if n_assignments == 0 {
            return Err(PlatformError::Protocol(
                "n_assignments must be positive".into(),
            ));
        }
        let record = TaskRecord {
            task_id: format!("tsk-{}", st.tasks.len() + 1),
            project_id: project_id.to_string(),
            fingerprint: fingerprint.to_string(),
            payload: payload.clone(),
            n_assignments,
            published_at: self.clock.now(),
            status: TaskStatus::Pending,
        };
        let logged = serde_json::to_value(&record).expect("task record serializes");
        st.log_put(project_id, RecordKind::Task, fingerprint, logged)?;
        st.apply_task(record.clone());
        Ok(record)
    }

    pub fn fetch_results(&self, task_id: &str) -> Result<Vec<Assignment>, PlatformError> {
        let st = self.lock();
        let ix = st.task_index(task_id)?;
        let mut out = st.tasks[ix].assignments.clone();
        out.sort_by_key(|a| a.submitted_at);
        Ok(out)
    }

    /// Pending task not yet answered by `worker_id` with the fewest answers,
    /// ties broken by creation order.
    pub fn next_task(
        &self,
        project_id: &str,
        worker_id: &str,
    ) -> Result<Option<TaskRecord>, PlatformError> {
        let st = self.lock();
        st.project(project_id)?;
        let Some(ixs) = st.project_tasks.get(project_id) else {
            return Ok(None);
        };
        let pick = ixs
            .iter()
            .map(|&i| &st.tasks[i])
            .filter(|t| t.record.status == TaskStatus::Pending)
            .filter(|t| t.assignments.iter().all(|a| a.worker_id != worker_id))
            .enumerate()
            .min_by_key(|(order, t)| (t.assignments.len(), *order))
            .map(|(_, t)| t.record.clone());
        Ok(pick)
    }

    pub fn submit_answer(
        &self,
        task_id: &str,
        worker_id: &str,
        answer: &Value,
    ) -> Result<Assignment, PlatformError> {
        let mut st = self.lock();
        let ix = st.task_index(task_id)?;
        let task = &st.tasks[ix];
        if task.assignments.iter().any(|a| a.worker_id == worker_id) {
            return Err(PlatformError::AlreadyAnswered {
                task_id: task_id.into(),
                worker_id: worker_id.into(),
            });
        }
        if task.record.status == TaskStatus::Complete {
            return Err(PlatformError::TaskComplete(task_id.into()));
        }
        let schema = &st.project(&task.record.project_id)?.presenter.answer_schema;
        if !schema.accepts(answer) {
            return Err(PlatformError::SchemaViolation {
                task_id: task_id.into(),
                answer: answer.to_string(),
            });
        }
        let assignment = Assignment {
            task_id: task_id.to_string(),
            worker_id: worker_id.to_string(),
            answer: answer.clone(),
            submitted_at: self.clock.now(),
        };
        let project_id = task.record.project_id.clone();
        let logged = serde_json::to_value(&assignment).expect("assignment serializes");
        st.log_put(&project_id, RecordKind::Assignment, task_id, logged)?;
        st.apply_assignment(ix, assignment.clone());
        Ok(assignment)
    }

    pub fn presenter(&self, project_id: &str) -> Result<Presenter, PlatformError> {
        Ok(self.lock().project(project_id)?.presenter.clone())
    }

    pub fn task(&self, task_id: &str) -> Result<TaskRecord, PlatformError> {
        let st = self.lock();
        let ix = st.task_index(task_id)?;
        Ok(st.tasks[ix].record.clone())
    }

    pub fn project_id(&self, name: &str) -> Option<String> {
        let st = self.lock();
        st.by_name
            .get(name)
            .map(|&i| st.projects[i].project_id.clone())
    }

    /// Total number of tasks ever created.
    pub fn task_census(&self) -> usize {
        self.lock().tasks.len()
    }

    pub fn tasks(&self) -> Vec<TaskRecord> {
        self.lock().tasks.iter().map(|t| t.record.clone()).collect()
    }

    pub fn assignment_count(&self) -> usize {
        self.lock().tasks.iter().map(|t| t.assignments.len()).sum()
    }
}

impl PlatformClient for Platform {
    fn create_project(&self, name: &str, presenter: &Presenter) -> Result<String, PlatformError> {
        Platform::create_project(self, name, presenter)
    }
    fn publish(
        &self,
        project_id: &str,
        payload: &Value,
        n_assignments: u32,
        fingerprint: &str,
    ) -> Result<TaskRecord, PlatformError> {
        Platform::publish(self, project_id, payload, n_assignments, fingerprint)
    }
    fn fetch_results(&self, task_id: &str) -> Result<Vec<Assignment>, PlatformError> {
        Platform::fetch_results(self, task_id)
    }
}

impl WorkerApi for Platform {
    fn next_task(
        &self,
        project_id: &str,
        worker_id: &str,
    ) -> Result<Option<WorkItem>, PlatformError> {
        let Some(task) = Platform::next_task(self, project_id, worker_id)? else {
            return Ok(None);
        };
        Ok(Some(WorkItem {
            presenter: self.presenter(project_id)?,
            task,
        }))
    }
    fn submit_answer(
        &self,
        task_id: &str,
        worker_id: &str,
        answer: &Value,
    ) -> Result<Assignment, PlatformError> {
        Platform::submit_answer(self, task_id, worker_id, answer)
    }
}
