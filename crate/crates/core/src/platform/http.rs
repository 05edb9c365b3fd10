//! HTTP/1.1 + JSON front end for [`Platform`] and the matching blocking client.
//!
//! | method | path                                   | body / query                                  |
//! |--------|----------------------------------------|-----------------------------------------------|
//! | POST   | `/api/projects`                        | `{"name", "presenter"}` -> `{"project_id"}`   |
//! | POST   | `/api/projects/{pid}/tasks`            | `{"payload","n_assignments","fingerprint"}` -> task |
//! | GET    | `/api/tasks/{tid}/results`             | -> `[assignment]`                             |
//! | GET    | `/api/projects/{pid}/newtask`          | `?worker_id=W` -> `{"task","presenter"}`      |
//! | POST   | `/api/tasks/{tid}/answers`             | `{"worker_id","answer"}` -> assignment        |
//!
//! Errors are `{"error": code, "detail": text}` with a 4xx status.

use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::oneshot;

use super::{Assignment, Platform, PlatformClient, PlatformError, TaskRecord, WorkItem, WorkerApi};
use crate::presenter::Presenter;

#[derive(Debug, Serialize, Deserialize)]
struct CreateProject {
    name: String,
    presenter: Presenter,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProjectCreated {
    project_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PublishTask {
    payload: Value,
    n_assignments: u32,
    fingerprint: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SubmitAnswer {
    worker_id: String,
    answer: Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct NewTask {
    task: Option<TaskRecord>,
    presenter: Option<Presenter>,
}

#[derive(Debug, Deserialize)]
struct WorkerQuery {
    worker_id: String,
}

struct ApiError(PlatformError);

impl From<PlatformError> for ApiError {
    fn from(e: PlatformError) -> Self {
        ApiError(e)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(PlatformError::Protocol(e.body_text()))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            PlatformError::UnknownProject(_) | PlatformError::UnknownTask(_) => {
                StatusCode::NOT_FOUND
            }
            PlatformError::PresenterConflict(_)
            | PlatformError::FingerprintConflict(_)
            | PlatformError::AlreadyAnswered { .. }
            | PlatformError::TaskComplete(_) => StatusCode::CONFLICT,
            PlatformError::SchemaViolation { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            PlatformError::Protocol(_) | PlatformError::MissingGroundTruth(_) => {
                StatusCode::BAD_REQUEST
            }
            PlatformError::Unreachable(_) | PlatformError::Store(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        let body = json!({ "error": self.0.code(), "detail": self.0.to_string() });
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn create_project(
    State(p): State<Arc<Platform>>,
    body: Result<Json<CreateProject>, JsonRejection>,
) -> ApiResult<ProjectCreated> {
    let Json(req) = body?;
    let project_id = p.create_project(&req.name, &req.presenter)?;
    Ok(Json(ProjectCreated { project_id }))
}

async fn publish(
    State(p): State<Arc<Platform>>,
    Path(pid): Path<String>,
    body: Result<Json<PublishTask>, JsonRejection>,
) -> ApiResult<TaskRecord> {
    let Json(req) = body?;
    Ok(Json(p.publish(
        &pid,
        &req.payload,
        req.n_assignments,
        &req.fingerprint,
    )?))
}

async fn results(
    State(p): State<Arc<Platform>>,
    Path(tid): Path<String>,
) -> ApiResult<Vec<Assignment>> {
    Ok(Json(p.fetch_results(&tid)?))
}

async fn newtask(
    State(p): State<Arc<Platform>>,
    Path(pid): Path<String>,
    Query(q): Query<WorkerQuery>,
) -> ApiResult<NewTask> {
    let task = Platform::next_task(&p, &pid, &q.worker_id)?;
    let presenter = Some(p.presenter(&pid)?);
    Ok(Json(NewTask { task, presenter }))
}

async fn answer(
    State(p): State<Arc<Platform>>,
    Path(tid): Path<String>,
    body: Result<Json<SubmitAnswer>, JsonRejection>,
) -> ApiResult<Assignment> {
    let Json(req) = body?;
    Ok(Json(p.submit_answer(&tid, &req.worker_id, &req.answer)?))
}

/// Routes for the platform API, plus the worker UI's static files under
/// `/worker` when a directory is given.
pub fn router(platform: Arc<Platform>, worker_ui: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/projects", post(create_project))
        .route("/api/projects/{pid}/tasks", post(publish))
        .route("/api/projects/{pid}/newtask", get(newtask))
        .route("/api/tasks/{tid}/results", get(results))
        .route("/api/tasks/{tid}/answers", post(answer))
        .with_state(platform);
    match worker_ui {
        Some(dir) => api.nest_service("/worker", tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// A platform server running on its own thread and runtime.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    /// Binds `addr` (port 0 picks a free port) and starts serving.
    pub fn spawn(
        platform: Arc<Platform>,
        addr: SocketAddr,
        worker_ui: Option<PathBuf>,
    ) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let app = router(platform, worker_ui);
        let thread = std::thread::Builder::new()
            .name("platform-http".into())
            .spawn(move || {
                let rt = tokio::runtime::Builder::new_multi_thread()
                    .worker_threads(2)
                    .enable_all()
                    .build()?;
                rt.block_on(async move {
                    let listener = tokio::net::TcpListener::from_std(listener)?;
                    axum::serve(listener, app)
                        .with_graceful_shutdown(async {
                            let _ = rx.await;
                        })
                        .await
                })
            })?;
        Ok(Self {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server exits.
    pub fn join(mut self) -> std::io::Result<()> {
        match self.thread.take() {
            Some(t) => t
                .join()
                .unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Blocking HTTP client for a remote platform.
#[derive(Clone)]
pub struct HttpPlatform {
    base: String,
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpPlatform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpPlatform")
            .field("base", &self.base)
            .finish()
    }
}

#[derive(Default)]
struct CallContext<'a> {
    id: &'a str,
    worker_id: &'a str,
    answer: Option<&'a Value>,
}

impl HttpPlatform {
    pub fn new(base_url: impl Into<String>) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(Duration::from_secs(2))
            .timeout(Duration::from_secs(30))
            .build();
        Self {
            base: base_url.into().trim_end_matches('/').to_string(),
            agent,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    fn decode<T: serde::de::DeserializeOwned>(
        result: Result<ureq::Response, ureq::Error>,
        ctx: CallContext<'_>,
    ) -> Result<T, PlatformError> {
        match result {
            Ok(resp) => resp
                .into_json()
                .map_err(|e| PlatformError::Protocol(format!("bad response body: {e}"))),
            Err(ureq::Error::Status(status, resp)) => {
                let body: Value = resp.into_json().unwrap_or(Value::Null);
                let code = body.get("error").and_then(Value::as_str).unwrap_or("");
                let detail = body
                    .get("detail")
                    .and_then(Value::as_str)
                    .unwrap_or("")
                    .to_string();
                let id = ctx.id.to_string();
                Err(match code {
                    "unknown_project" => PlatformError::UnknownProject(id),
                    "unknown_task" => PlatformError::UnknownTask(id),
                    "presenter_conflict" => PlatformError::PresenterConflict(id),
                    "fingerprint_conflict" => PlatformError::FingerprintConflict(id),
                    "already_answered" => PlatformError::AlreadyAnswered {
                        task_id: id,
                        worker_id: ctx.worker_id.into(),
                    },
                    "task_complete" => PlatformError::TaskComplete(id),
                    "schema_violation" => PlatformError::SchemaViolation {
                        task_id: id,
                        answer: ctx.answer.map(Value::to_string).unwrap_or_default(),
                    },
                    _ => PlatformError::Protocol(format!("HTTP {status}: {code} {detail}")),
                })
            }
            Err(ureq::Error::Transport(t)) => Err(PlatformError::Unreachable(t.to_string())),
        }
    }
}

impl PlatformClient for HttpPlatform {
    fn create_project(&self, name: &str, presenter: &Presenter) -> Result<String, PlatformError> {
        let body = CreateProject {
            name: name.into(),
            presenter: presenter.clone(),
        };
        let resp = self.agent.post(&self.url("/api/projects")).send_json(&body);
        let created: ProjectCreated = Self::decode(
            resp,
            CallContext {
                id: name,
                ..Default::default()
            },
        )?;
        Ok(created.project_id)
    }

    fn publish(
        &self,
        project_id: &str,
        payload: &Value,
        n_assignments: u32,
        fingerprint: &str,
    ) -> Result<TaskRecord, PlatformError> {
        let body = PublishTask {
            payload: payload.clone(),
            n_assignments,
            fingerprint: fingerprint.into(),
        };
        let resp = self
            .agent
            .post(&self.url(&format!("/api/projects/{project_id}/tasks")))
            .send_json(&body);
        let id = if matches!(&resp, Err(ureq::Error::Status(409, _))) {
            fingerprint
        } else {
            project_id
        };
        Self::decode(
            resp,
            CallContext {
                id,
                ..Default::default()
            },
        )
    }

    fn fetch_results(&self, task_id: &str) -> Result<Vec<Assignment>, PlatformError> {
        let resp = self
            .agent
            .get(&self.url(&format!("/api/tasks/{task_id}/results")))
            .call();
        Self::decode(
            resp,
            CallContext {
                id: task_id,
                ..Default::default()
            },
        )
    }
}

impl WorkerApi for HttpPlatform {
    fn next_task(
        &self,
        project_id: &str,
        worker_id: &str,
    ) -> Result<Option<WorkItem>, PlatformError> {
        let resp = self
            .agent
            .get(&self.url(&format!("/api/projects/{project_id}/newtask")))
            .query("worker_id", worker_id)
            .call();
        let nt: NewTask = Self::decode(
            resp,
            CallContext {
                id: project_id,
                ..Default::default()
            },
        )?;
        match (nt.task, nt.presenter) {
            (Some(task), Some(presenter)) => Ok(Some(WorkItem { task, presenter })),
            (Some(_), None) => Err(PlatformError::Protocol(
                "newtask response without presenter".into(),
            )),
            (None, _) => Ok(None),
        }
    }

    fn submit_answer(
        &self,
        task_id: &str,
        worker_id: &str,
        answer: &Value,
    ) -> Result<Assignment, PlatformError> {
        let body = SubmitAnswer {
            worker_id: worker_id.into(),
            answer: answer.clone(),
        };
        let resp = self
            .agent
            .post(&self.url(&format!("/api/tasks/{task_id}/answers")))
            .send_json(&body);
        Self::decode(
            resp,
            CallContext {
                id: task_id,
                worker_id,
                answer: Some(answer),
            },
        )
    }
}
