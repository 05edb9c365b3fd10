//! Seeded simulated workers standing in for the human crowd.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{Assignment, Platform, PlatformClient, PlatformError, TaskRecord, WorkItem, WorkerApi};
use crate::clock::{ts_format, Timestamp};
use crate::presenter::{AnswerSchema, Presenter};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub mean_ms: u64,
    pub jitter_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerProfile {
    pub worker_id: String,
    pub accuracy: f64,
    pub latency: Latency,
    pub seed: u64,
}

impl WorkerProfile {
    pub fn new(worker_id: impl Into<String>, accuracy: f64, seed: u64) -> Self {
        assert!(
            (0.0..=1.0).contains(&accuracy),
            "accuracy must lie in [0, 1]"
        );
        Self {
            worker_id: worker_id.into(),
            accuracy,
            latency: Latency {
                mean_ms: 0,
                jitter_ms: 0,
            },
            seed,
        }
    }

    /// The answer this worker gives for a task. Depends only on the worker's
    /// seed and the task fingerprint, never on the order tasks arrive in.
    fn answer(&self, task: &TaskRecord, truth: &Value, schema: &AnswerSchema) -> Value {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, &task.fingerprint));
        if rng.gen_bool(self.accuracy) {
            return truth.clone();
        }
        match schema {
            AnswerSchema::Labels { labels } => {
                let wrong: Vec<&String> = labels
                    .iter()
                    .filter(|l| Some(l.as_str()) != truth.as_str())
                    .collect();
                if wrong.is_empty() {
                    truth.clone()
                } else {
                    Value::String(wrong[rng.gen_range(0..wrong.len())].clone())
                }
            }
            AnswerSchema::Text => Value::String(format!("noise-{}", rng.gen::<u16>())),
        }
    }

    fn think_time(&self, rng: &mut ChaCha8Rng) -> Duration {
        let Latency { mean_ms, jitter_ms } = self.latency;
        let lo = mean_ms.saturating_sub(jitter_ms);
        let hi = mean_ms + jitter_ms;
        Duration::from_millis(if hi > lo {
            rng.gen_range(lo..=hi)
        } else {
            mean_ms
        })
    }
}

fn mix_seed(seed: u64, fingerprint: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(fingerprint.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// `n` workers `sim-1..sim-n` sharing one accuracy, seeds `seed+1..seed+n`.
pub fn worker_pool(n: usize, accuracy: f64, seed: u64) -> Vec<WorkerProfile> {
    (1..=n)
        .map(|i| WorkerProfile::new(format!("sim-{i}"), accuracy, seed.wrapping_add(i as u64)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMode {
    /// Workers take turns, one task each per round.
    Deterministic,
    /// One thread per worker, racing on the platform.
    Concurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub worker_id: String,
    pub task_id: String,
    pub fingerprint: String,
    pub answer: Value,
    #[serde(with = "ts_format")]
    pub ts: Timestamp,
}

fn entry(item: &WorkItem, a: Assignment) -> TranscriptEntry {
    TranscriptEntry {
        worker_id: a.worker_id,
        task_id: a.task_id,
        fingerprint: item.task.fingerprint.clone(),
        answer: a.answer,
        ts: a.submitted_at,
    }
}

fn truth_for<'a>(
    truth: &'a HashMap<String, Value>,
    task: &TaskRecord,
) -> Result<&'a Value, PlatformError> {
    truth
        .get(&task.fingerprint)
        .ok_or_else(|| PlatformError::MissingGroundTruth(task.fingerprint.clone()))
}

/// Lets the workers answer until none of them can get another task from the
/// project. With `linger`, keeps polling for newly published work until the
/// project has been idle that long.
pub fn simulate_workers<W: WorkerApi + Sync>(
    api: &W,
    project_id: &str,
    profiles: &[WorkerProfile],
    truth: &HashMap<String, Value>,
    mode: SimMode,
    linger: Duration,
) -> Result<Vec<TranscriptEntry>, PlatformError> {
    let mut transcript = Vec::new();
    let mut idle_since = Instant::now();
    loop {
        let round = match mode {
            SimMode::Deterministic => deterministic_pass(api, project_id, profiles, truth)?,
            SimMode::Concurrent => concurrent_pass(api, project_id, profiles, truth)?,
        };
        if !round.is_empty() {
            transcript.extend(round);
            idle_since = Instant::now();
        } else if idle_since.elapsed() >= linger {
            break;
        } else {
            std::thread::sleep(Duration::from_millis(50).min(linger));
        }
    }
    Ok(transcript)
}

fn deterministic_pass<W: WorkerApi>(
    api: &W,
    project_id: &str,
    profiles: &[WorkerProfile],
    truth: &HashMap<String, Value>,
) -> Result<Vec<TranscriptEntry>, PlatformError> {
    let mut out = Vec::new();
    loop {
        let mut progressed = false;
        for worker in profiles {
            let Some(item) = api.next_task(project_id, &worker.worker_id)? else {
                continue;
            };
            let answer = worker.answer(
                &item.task,
                truth_for(truth, &item.task)?,
                &item.presenter.answer_schema,
            );
            let a = api.submit_answer(&item.task.task_id, &worker.worker_id, &answer)?;
            out.push(entry(&item, a));
            progressed = true;
        }
        if !progressed {
            return Ok(out);
        }
    }
}

fn concurrent_pass<W: WorkerApi + Sync>(
    api: &W,
    project_id: &str,
    profiles: &[WorkerProfile],
    truth: &HashMap<String, Value>,
) -> Result<Vec<TranscriptEntry>, PlatformError> {
    let out = Mutex::new(Vec::new());
    let first_error = Mutex::new(None);
    std::thread::scope(|scope| {
        for worker in profiles {
            let (out, first_error) = (&out, &first_error);
            scope.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(worker.seed);
                let result = (|| -> Result<(), PlatformError> {
                    while let Some(item) = api.next_task(project_id, &worker.worker_id)? {
                        let answer = worker.answer(
                            &item.task,
                            truth_for(truth, &item.task)?,
                            &item.presenter.answer_schema,
                        );
                        std::thread::sleep(worker.think_time(&mut rng));
                        match api.submit_answer(&item.task.task_id, &worker.worker_id, &answer) {
                            Ok(a) => out.lock().unwrap().push(entry(&item, a)),
                            // Lost a race for the last slot; ask for other work.
                            Err(PlatformError::TaskComplete(_))
                            | Err(PlatformError::AlreadyAnswered { .. }) => {}
                            Err(e) => return Err(e),
                        }
                    }
                    Ok(())
                })();
                if let Err(e) = result {
                    first_error.lock().unwrap().get_or_insert(e);
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    let mut out = out.into_inner().unwrap();
    out.sort_by(|a, b| (a.ts, &a.task_id, &a.worker_id).cmp(&(b.ts, &b.task_id, &b.worker_id)));
    Ok(out)
}

/// An embedded platform whose simulated crowd works through the pending
/// tasks of a project whenever results are polled.
pub struct SimulatedCrowd {
    platform: Arc<Platform>,
    profiles: Vec<WorkerProfile>,
    truth: Mutex<HashMap<String, Value>>,
    transcript: Mutex<Vec<TranscriptEntry>>,
}

impl SimulatedCrowd {
    pub fn new(
        platform: Arc<Platform>,
        profiles: Vec<WorkerProfile>,
        truth: HashMap<String, Value>,
    ) -> Self {
        Self {
            platform,
            profiles,
            truth: Mutex::new(truth),
            transcript: Mutex::new(Vec::new()),
        }
    }

    pub fn platform(&self) -> &Arc<Platform> {
        &self.platform
    }

    pub fn add_truth(&self, fingerprint: impl Into<String>, label: Value) {
        self.truth.lock().unwrap().insert(fingerprint.into(), label);
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.transcript.lock().unwrap().clone()
    }
}

impl PlatformClient for SimulatedCrowd {
    fn create_project(&self, name: &str, presenter: &Presenter) -> Result<String, PlatformError> {
        self.platform.create_project(name, presenter)
    }

    fn publish(
        &self,
        project_id: &str,
        payload: &Value,
        n_assignments: u32,
        fingerprint: &str,
    ) -> Result<TaskRecord, PlatformError> {
        self.platform
            .publish(project_id, payload, n_assignments, fingerprint)
    }

    fn fetch_results(&self, task_id: &str) -> Result<Vec<Assignment>, PlatformError> {
        let task = self.platform.task(task_id)?;
        let truth = self.truth.lock().unwrap().clone();
        let answered =
            deterministic_pass(&*self.platform, &task.project_id, &self.profiles, &truth)?;
        self.transcript.lock().unwrap().extend(answered);
        self.platform.fetch_results(task_id)
    }
}
