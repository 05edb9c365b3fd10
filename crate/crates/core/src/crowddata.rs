//! The CrowdData table. Each pipeline step is a manipulation of this table;
//! the `task` and `result` columns are backed by the store so any rerun
//! picks up exactly where earlier runs left off.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashSet};
use std::rc::Rc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::canonical::{fingerprint, to_canonical_string};
use crate::context::ContextInner;
use crate::error::{check_name, Error, Result};
use crate::persistence::{CacheKey, RecordKind};
use crate::platform::{Assignment, TaskRecord, TaskStatus};
use crate::presenter::{AnswerSchema, Presenter};
use crate::quality::{
    em_dawid_skene, majority_vote, AggregateLabel, EmParams, QualityError, WorkerAnswer,
};

/// Answers collected for one row's task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSet {
    pub task_id: String,
    pub assignments: Vec<Assignment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub id: u64,
    pub object: Value,
    pub fingerprint: String,
    pub task: Option<TaskRecord>,
    pub result: Option<ResultSet>,
}

/// Comparable image of a table, used to check replay equivalence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableView {
    pub table_name: String,
    pub presenter_hash: Option<String>,
    pub rows: Vec<Row>,
    pub derived: BTreeMap<String, BTreeMap<u64, AggregateLabel>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PresenterMeta {
    project_id: String,
    platform_name: String,
    presenter: Presenter,
}

pub struct CrowdData {
    ctx: Rc<RefCell<ContextInner>>,
    table_name: String,
    rows: Vec<Row>,
    presenter: Option<Presenter>,
    platform_project: Option<String>,
    derived: BTreeMap<String, BTreeMap<u64, AggregateLabel>>,
    next_id: u64,
}

impl std::fmt::Debug for CrowdData {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CrowdData")
            .field("table_name", &self.table_name)
            .field("rows", &self.rows.len())
            .finish()
    }
}

impl Drop for CrowdData {
    fn drop(&mut self) {
        if let Ok(mut ctx) = self.ctx.try_borrow_mut() {
            ctx.open_tables.remove(&self.table_name);
        }
    }
}

fn decode<T: serde::de::DeserializeOwned>(payload: &Value) -> Result<T> {
    serde_json::from_value(payload.clone()).map_err(|e| Error::CachePayload(e.to_string()))
}

fn answer_label(answer: &Value) -> String {
    match answer {
        Value::String(s) => s.clone(),
        other => to_canonical_string(other),
    }
}

impl ContextInner {
    fn key(&self, table: &str, kind: RecordKind, key: &str) -> CacheKey {
        CacheKey::new(&self.project, table, kind, key)
    }

    fn cached_task(&self, table: &str, fp: &str) -> Result<Option<TaskRecord>> {
        self.store
            .cache_get_one(&self.key(table, RecordKind::Task, fp))
            .map(|r| decode(&r.payload))
            .transpose()
    }

    fn cached_assignments(&self, table: &str, fp: &str, task_id: &str) -> Result<Vec<Assignment>> {
        let mut out = Vec::new();
        for r in self
            .store
            .cache_get(&self.key(table, RecordKind::Assignment, fp))
        {
            let a: Assignment = decode(&r.payload)?;
            if a.task_id == task_id {
                out.push(a);
            }
        }
        Ok(out)
    }

    /// The task and result cells the store holds for an object.
    fn persisted_cells(
        &self,
        table: &str,
        fp: &str,
    ) -> Result<(Option<TaskRecord>, Option<ResultSet>)> {
        let Some(mut task) = self.cached_task(table, fp)? else {
            return Ok((None, None));
        };
        let assignments = self.cached_assignments(table, fp, &task.task_id)?;
        task.status = status_for(&task, assignments.len());
        let result = (!assignments.is_empty()).then(|| ResultSet {
            task_id: task.task_id.clone(),
            assignments,
        });
        Ok((Some(task), result))
    }
}

fn status_for(task: &TaskRecord, answers: usize) -> TaskStatus {
    if answers as u32 >= task.n_assignments {
        TaskStatus::Complete
    } else {
        TaskStatus::Pending
    }
}

impl CrowdData {
    pub(crate) fn create(
        ctx: Rc<RefCell<ContextInner>>,
        objects: impl IntoIterator<Item = Value>,
        table_name: &str,
    ) -> Result<Self> {
        check_name(table_name)?;
        {
            let mut inner = ctx.borrow_mut();
            if !inner.open_tables.insert(table_name.to_string()) {
                return Err(Error::DuplicateTableOpen(table_name.to_string()));
            }
        }
        let mut cd = CrowdData {
            ctx,
            table_name: table_name.to_string(),
            rows: Vec::new(),
            presenter: None,
            platform_project: None,
            derived: BTreeMap::new(),
            next_id: 1,
        };
        cd.extend(objects)?;
        Ok(cd)
    }

    pub fn table_name(&self) -> &str {
        &self.table_name
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    /// Platform project id, known once a presenter is set.
    pub fn platform_project(&self) -> Option<&str> {
        self.platform_project.as_deref()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn presenter(&self) -> Option<&Presenter> {
        self.presenter.as_ref()
    }

    pub fn derived(&self, column: &str) -> Option<&BTreeMap<u64, AggregateLabel>> {
        self.derived.get(column)
    }

    pub fn derived_columns(&self) -> impl Iterator<Item = &str> {
        self.derived.keys().map(String::as_str)
    }

    pub fn view(&self) -> TableView {
        TableView {
            table_name: self.table_name.clone(),
            presenter_hash: self.presenter.as_ref().map(|p| p.version_hash.clone()),
            rows: self.rows.clone(),
            derived: self.derived.clone(),
        }
    }

    pub fn set_presenter(&mut self, presenter: Presenter) -> Result<&mut Self> {
        let presenter =
            Presenter::new(presenter.name, presenter.template, presenter.answer_schema)?;
        let mut ctx = self.ctx.borrow_mut();

        let task_prefix = ctx.key(&self.table_name, RecordKind::Task, "");
        for r in ctx.store.state().records() {
            if r.kind == RecordKind::Task
                && r.project == task_prefix.project
                && r.table == self.table_name
            {
                let task: TaskRecord = decode(&r.payload)?;
                let published = task
                    .payload
                    .get("presenter")
                    .and_then(Value::as_str)
                    .unwrap_or_default();
                if published != presenter.version_hash {
                    return Err(Error::PresenterLocked {
                        table: self.table_name.clone(),
                        published: published.to_string(),
                        requested: presenter.version_hash.clone(),
                    });
                }
            }
        }

        let meta_key = ctx.key(
            &self.table_name,
            RecordKind::ProjectMeta,
            &presenter.version_hash,
        );
        let project_id = match ctx.store.cache_get_one(&meta_key) {
            Some(r) => decode::<PresenterMeta>(&r.payload)?.project_id,
            None => {
                let platform_name = format!(
                    "{}.{}.{}",
                    ctx.project,
                    self.table_name,
                    &presenter.version_hash[..12]
                );
                let project_id = ctx.platform.create_project(&platform_name, &presenter)?;
                let meta = PresenterMeta {
                    project_id: project_id.clone(),
                    platform_name,
                    presenter: presenter.clone(),
                };
                ctx.store.cache_put(
                    meta_key,
                    serde_json::to_value(&meta).expect("meta serializes"),
                )?;
                project_id
            }
        };
        drop(ctx);
        self.platform_project = Some(project_id);
        self.presenter = Some(presenter);
        Ok(self)
    }

    pub fn append(&mut self, object: Value) -> Result<&mut Self> {
        self.extend([object])
    }

    pub fn extend(&mut self, objects: impl IntoIterator<Item = Value>) -> Result<&mut Self> {
        let ctx = self.ctx.clone();
        let ctx = ctx.borrow();
        for object in objects {
            let fp = fingerprint(&object);
            let (task, result) = ctx.persisted_cells(&self.table_name, &fp)?;
            self.rows.push(Row {
                id: self.next_id,
                object,
                fingerprint: fp,
                task,
                result,
            });
            self.next_id += 1;
        }
        Ok(self)
    }

    /// Keeps rows for which `keep` returns true. Persisted cells are not
    /// touched, so dropping the filter recovers the removed rows.
    pub fn filter(&mut self, mut keep: impl FnMut(&Row) -> bool) -> &mut Self {
        self.try_filter(|row| Ok::<_, std::convert::Infallible>(keep(row)))
            .expect("infallible predicate")
    }

    pub fn try_filter<E: std::fmt::Display>(
        &mut self,
        mut keep: impl FnMut(&Row) -> Result<bool, E>,
    ) -> Result<&mut Self> {
        let mut verdicts = Vec::with_capacity(self.rows.len());
        for (index, row) in self.rows.iter().enumerate() {
            verdicts.push(keep(row).map_err(|e| Error::PredicateFailure {
                index,
                message: e.to_string(),
            })?);
        }
        let mut verdicts = verdicts.into_iter();
        self.rows.retain(|_| verdicts.next().unwrap_or(false));
        let live: HashSet<u64> = self.rows.iter().map(|r| r.id).collect();
        for col in self.derived.values_mut() {
            col.retain(|id, _| live.contains(id));
        }
        Ok(self)
    }

    pub fn clear(&mut self) -> &mut Self {
        self.rows.clear();
        self.derived.clear();
        self
    }

    /// Publishes a task for every row whose object has none cached. Each new
    /// task record is synced to the store before this returns.
    pub fn publish_task(&mut self) -> Result<&mut Self> {
        if self.rows.is_empty() {
            return Ok(self);
        }
        let presenter = self
            .presenter
            .as_ref()
            .ok_or_else(|| Error::PresenterNotSet(self.table_name.clone()))?;
        let project_id = self.platform_project.clone().expect("set with presenter");
        let ctx = self.ctx.clone();
        let mut ctx = ctx.borrow_mut();
        let n = ctx.config.n_assignments;

        let mut seen = HashSet::new();
        for row in &self.rows {
            if !seen.insert(row.fingerprint.clone()) {
                continue;
            }
            match ctx.cached_task(&self.table_name, &row.fingerprint)? {
                Some(task) if task.n_assignments != n => {
                    return Err(Error::ConfigMismatch {
                        fingerprint: row.fingerprint.clone(),
                        cached: task.n_assignments,
                        configured: n,
                    });
                }
                Some(_) => {}
                None => {
                    let payload =
                        json!({ "object": row.object, "presenter": presenter.version_hash });
                    let mut task =
                        ctx.platform
                            .publish(&project_id, &payload, n, &row.fingerprint)?;
                    task.status = TaskStatus::Pending;
                    let key = ctx.key(&self.table_name, RecordKind::Task, &row.fingerprint);
                    ctx.store
                        .cache_put(key, serde_json::to_value(&task).expect("task serializes"))?;
                }
            }
        }
        for row in &mut self.rows {
            let (task, result) = ctx.persisted_cells(&self.table_name, &row.fingerprint)?;
            row.task = task;
            row.result = result;
        }
        Ok(self)
    }

    /// Collects answers. New assignments are written to the store and synced
    /// before they show up in the `result` column. With `blocking`, polls
    /// until every task has its answers or the configured timeout passes.
    pub fn get_result(&mut self, blocking: bool) -> Result<&mut Self> {
        if let Some(row) = self.rows.iter().find(|r| r.task.is_none()) {
            return Err(Error::TasksNotPublished(row.id));
        }
        let mut tasks: BTreeMap<String, TaskRecord> = BTreeMap::new();
        for row in &self.rows {
            let task = row.task.clone().expect("checked above");
            tasks.entry(row.fingerprint.clone()).or_insert(task);
        }

        let (poll_interval, timeout) = {
            let ctx = self.ctx.borrow();
            (ctx.config.poll_interval, ctx.config.result_timeout)
        };
        let started = Instant::now();
        let outcome = loop {
            let mut complete = 0;
            {
                let mut ctx = self.ctx.borrow_mut();
                for (fp, task) in &tasks {
                    let have = ctx
                        .cached_assignments(&self.table_name, fp, &task.task_id)?
                        .len();
                    if have as u32 >= task.n_assignments {
                        complete += 1;
                        continue;
                    }
                    let fetched = ctx.platform.fetch_results(&task.task_id)?;
                    let key = ctx.key(&self.table_name, RecordKind::Assignment, fp);
                    for a in &fetched {
                        ctx.store.cache_put(
                            key.clone(),
                            serde_json::to_value(a).expect("assignment serializes"),
                        )?;
                    }
                    if fetched.len() as u32 >= task.n_assignments {
                        complete += 1;
                    }
                }
                ctx.store.sync()?;
            }
            if complete == tasks.len() || !blocking {
                break Ok(());
            }
            if started.elapsed() >= timeout {
                break Err(Error::ResultTimeout {
                    complete,
                    total: tasks.len(),
                });
            }
            std::thread::sleep(poll_interval);
        };

        let ctx = self.ctx.borrow();
        for row in &mut self.rows {
            let task = row.task.as_mut().expect("checked above");
            let assignments =
                ctx.cached_assignments(&self.table_name, &row.fingerprint, &task.task_id)?;
            task.status = status_for(task, assignments.len());
            row.result = Some(ResultSet {
                task_id: task.task_id.clone(),
                assignments,
            });
        }
        drop(ctx);
        outcome.map(|()| self)
    }

    /// Aggregates answers into a derived column named after the method
    /// (`mv` or `em`). Derived columns are never persisted.
    pub fn quality_control(&mut self, method: &str) -> Result<&mut Self> {
        if method != "mv" && method != "em" {
            return Err(QualityError::UnknownMethod(method.to_string()).into());
        }
        let mut objects: Vec<(String, Vec<WorkerAnswer>)> = Vec::new();
        let mut object_ix: BTreeMap<&str, usize> = BTreeMap::new();
        let mut row_object = Vec::with_capacity(self.rows.len());
        for row in &self.rows {
            let answers = match &row.result {
                Some(rs) if !rs.assignments.is_empty() => &rs.assignments,
                _ => return Err(Error::IncompleteResults(row.id)),
            };
            let ix = *object_ix
                .entry(row.fingerprint.as_str())
                .or_insert_with(|| {
                    let answers = answers
                        .iter()
                        .map(|a| WorkerAnswer::new(&a.worker_id, answer_label(&a.answer)))
                        .collect();
                    objects.push((row.fingerprint.clone(), answers));
                    objects.len() - 1
                });
            row_object.push(ix);
        }

        let labels = if method == "mv" {
            let label_lists: Vec<Vec<&str>> = objects
                .iter()
                .map(|(_, a)| a.iter().map(|w| w.label.as_str()).collect())
                .collect();
            majority_vote(&label_lists)?
        } else {
            let space = match self.presenter.as_ref().map(|p| &p.answer_schema) {
                Some(AnswerSchema::Labels { labels }) => labels.clone(),
                _ => {
                    return Err(QualityError::NonEnumeratedLabels(
                        "answer schema is not enumerated".into(),
                    )
                    .into())
                }
            };
            let answers: Vec<Vec<WorkerAnswer>> = objects.iter().map(|(_, a)| a.clone()).collect();
            em_dawid_skene(&answers, &space, EmParams::default())?.labels
        };

        let column = self
            .rows
            .iter()
            .zip(row_object)
            .map(|(row, ix)| (row.id, labels[ix].clone()))
            .collect();
        self.derived.insert(method.to_string(), column);
        Ok(self)
    }
}
