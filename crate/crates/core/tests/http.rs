mod common;

use std::sync::Arc;
use std::time::Duration;

use common::*;
use crowdpipe::canonical::fingerprint;
use crowdpipe::clock::LogicalClock;
use crowdpipe::platform::{
    simulate_workers, worker_pool, HttpPlatform, Platform, PlatformClient, PlatformError,
    ServerHandle, SimMode, WorkerApi,
};
use crowdpipe::Presenter;
use serde_json::{json, Value};

fn server() -> (Arc<Platform>, ServerHandle) {
    let platform = Arc::new(Platform::in_memory(Arc::new(LogicalClock::default())));
    let handle =
        ServerHandle::spawn(platform.clone(), "127.0.0.1:0".parse().unwrap(), None).unwrap();
    (platform, handle)
}

fn raw(resp: Result<ureq::Response, ureq::Error>) -> (u16, Value) {
    match resp {
        Ok(r) => (r.status(), r.into_json().unwrap()),
        Err(ureq::Error::Status(s, r)) => (s, r.into_json().unwrap()),
        Err(e) => panic!("transport error: {e}"),
    }
}

#[test]
fn endpoints_speak_json() {
    let (_p, h) = server();
    let base = h.url();
    let presenter = Presenter::image_label();

    let (s, body) = raw(ureq::post(&format!("{base}/api/projects"))
        .send_json(json!({"name": "demo", "presenter": presenter})));
    assert_eq!(s, 200);
    let pid = body["project_id"].as_str().unwrap().to_string();

    let fp = fingerprint(&json!("img1_url"));
    let task = json!({"payload": {"object": "img1_url"}, "n_assignments": 2, "fingerprint": fp});
    let (s, t1) =
        raw(ureq::post(&format!("{base}/api/projects/{pid}/tasks")).send_json(task.clone()));
    assert_eq!(s, 200);
    let (_, t1_again) =
        raw(ureq::post(&format!("{base}/api/projects/{pid}/tasks")).send_json(task));
    assert_eq!(t1, t1_again);
    let tid = t1["task_id"].as_str().unwrap().to_string();

    let (s, nt) = raw(ureq::get(&format!("{base}/api/projects/{pid}/newtask"))
        .query("worker_id", "w1")
        .call());
    assert_eq!(s, 200);
    assert_eq!(nt["task"]["task_id"], json!(tid));
    assert_eq!(
        nt["presenter"]["version_hash"],
        json!(presenter.version_hash)
    );

    let (s, a) = raw(ureq::post(&format!("{base}/api/tasks/{tid}/answers"))
        .send_json(json!({"worker_id": "w1", "answer": "Yes"})));
    assert_eq!(s, 200);
    assert_eq!(a["worker_id"], json!("w1"));

    let (s, results) = raw(ureq::get(&format!("{base}/api/tasks/{tid}/results")).call());
    assert_eq!(s, 200);
    assert_eq!(results.as_array().unwrap().len(), 1);

    let (s, nt) = raw(ureq::get(&format!("{base}/api/projects/{pid}/newtask"))
        .query("worker_id", "w1")
        .call());
    assert_eq!(s, 200);
    assert!(nt["task"].is_null());
}

#[test]
fn error_codes_and_statuses() {
    let (_p, h) = server();
    let base = h.url();
    let (_, body) = raw(ureq::post(&format!("{base}/api/projects"))
        .send_json(json!({"name": "demo", "presenter": Presenter::image_label()})));
    let pid = body["project_id"].as_str().unwrap().to_string();
    let (_, t) = raw(ureq::post(&format!("{base}/api/projects/{pid}/tasks"))
        .send_json(json!({"payload": 1, "n_assignments": 1, "fingerprint": "f1"})));
    let tid = t["task_id"].as_str().unwrap().to_string();

    let cases: Vec<(Result<ureq::Response, ureq::Error>, u16, &str)> = vec![
        (
            ureq::get(&format!("{base}/api/tasks/tsk-99/results")).call(),
            404,
            "unknown_task",
        ),
        (
            ureq::get(&format!("{base}/api/projects/prj-99/newtask"))
                .query("worker_id", "w")
                .call(),
            404,
            "unknown_project",
        ),
        (
            ureq::post(&format!("{base}/api/projects/{pid}/tasks"))
                .send_json(json!({"payload": 2, "n_assignments": 1, "fingerprint": "f1"})),
            409,
            "fingerprint_conflict",
        ),
        (
            ureq::post(&format!("{base}/api/projects"))
                .send_json(json!({"name": "demo", "presenter": Presenter::entity_match()})),
            409,
            "presenter_conflict",
        ),
        (
            ureq::post(&format!("{base}/api/tasks/{tid}/answers"))
                .send_json(json!({"worker_id": "w", "answer": "Maybe"})),
            422,
            "schema_violation",
        ),
        (
            ureq::post(&format!("{base}/api/tasks/{tid}/answers"))
                .send_json(json!({"worker": "w"})),
            400,
            "bad_request",
        ),
    ];
    for (resp, status, code) in cases {
        let (s, body) = raw(resp);
        assert_eq!(
            (s, body["error"].as_str().unwrap()),
            (status, code),
            "{body}"
        );
        assert!(body["detail"].is_string());
    }

    raw(ureq::post(&format!("{base}/api/tasks/{tid}/answers"))
        .send_json(json!({"worker_id": "w", "answer": "No"})));
    let (s, body) = raw(ureq::post(&format!("{base}/api/tasks/{tid}/answers"))
        .send_json(json!({"worker_id": "w", "answer": "No"})));
    assert_eq!(
        (s, body["error"].as_str().unwrap()),
        (409, "already_answered")
    );
    let (s, body) = raw(ureq::post(&format!("{base}/api/tasks/{tid}/answers"))
        .send_json(json!({"worker_id": "v", "answer": "No"})));
    assert_eq!((s, body["error"].as_str().unwrap()), (409, "task_complete"));
}

#[test]
fn client_maps_errors_back() {
    let (_p, h) = server();
    let client = HttpPlatform::new(h.url());
    let pid = client
        .create_project("demo", &Presenter::image_label())
        .unwrap();
    assert_eq!(
        client
            .create_project("demo", &Presenter::image_label())
            .unwrap(),
        pid
    );
    let t = client.publish(&pid, &json!(1), 1, "f1").unwrap();
    assert_eq!(client.publish(&pid, &json!(1), 1, "f1").unwrap(), t);
    assert!(matches!(
        client.publish(&pid, &json!(2), 1, "f1"),
        Err(PlatformError::FingerprintConflict(_))
    ));
    assert!(matches!(
        client.fetch_results("tsk-77"),
        Err(PlatformError::UnknownTask(_))
    ));
    assert!(matches!(
        client.submit_answer(&t.task_id, "w", &json!("Maybe")),
        Err(PlatformError::SchemaViolation { .. })
    ));
    let item = client.next_task(&pid, "w").unwrap().unwrap();
    assert_eq!(item.task, t);
    assert_eq!(item.presenter, Presenter::image_label());
    client
        .submit_answer(&t.task_id, "w", &json!("Yes"))
        .unwrap();
    assert!(matches!(
        client.submit_answer(&t.task_id, "w", &json!("Yes")),
        Err(PlatformError::AlreadyAnswered { .. })
    ));
    assert!(matches!(
        client.submit_answer(&t.task_id, "x", &json!("Yes")),
        Err(PlatformError::TaskComplete(_))
    ));
    assert!(client.next_task(&pid, "x").unwrap().is_none());
}

#[test]
fn unreachable_server_is_retryable() {
    let (_p, h) = server();
    let url = h.url();
    drop(h);
    let err = HttpPlatform::new(url).fetch_results("tsk-1").unwrap_err();
    assert!(matches!(err, PlatformError::Unreachable(_)));
    assert!(err.is_retryable());
}

#[test]
fn pipeline_over_http_with_simulated_workers() {
    let (platform, h) = server();
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("imglabel.cpdb");
    let url = h.url();

    let sim = std::thread::spawn({
        let platform = platform.clone();
        let url = url.clone();
        move || {
            let pid = loop {
                if let Some(t) = platform.tasks().first() {
                    break t.project_id.clone();
                }
                std::thread::sleep(Duration::from_millis(5));
            };
            let api = HttpPlatform::new(url);
            simulate_workers(
                &api,
                &pid,
                &worker_pool(3, 1.0, 11),
                &image_truth(),
                SimMode::Concurrent,
                Duration::from_millis(300),
            )
            .unwrap()
        }
    });

    let view = {
        let ctx = open_ctx(&store, HttpPlatform::new(url.clone()), 3);
        bob(&ctx)
    };
    let transcript = sim.join().unwrap();
    assert_eq!(transcript.len(), 9);
    let mv: Vec<_> = view.derived["mv"]
        .values()
        .map(|l| l.label.clone())
        .collect();
    let truth: Vec<_> = BOB_URLS.iter().map(|u| json!(truth_label(u))).collect();
    assert_eq!(mv, truth);

    // A rerun against the same server publishes nothing and yields the same table.
    let again = bob(&open_ctx(&store, HttpPlatform::new(url), 3));
    assert_eq!(again, view);
    assert_eq!(platform.task_census(), 3);
    assert_eq!(platform.assignment_count(), 9);
}

#[test]
fn worker_ui_directory_is_served() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>worker</html>").unwrap();
    let platform = Arc::new(Platform::in_memory(Arc::new(LogicalClock::default())));
    let h = ServerHandle::spawn(
        platform,
        "127.0.0.1:0".parse().unwrap(),
        Some(dir.path().to_path_buf()),
    )
    .unwrap();
    let body = ureq::get(&format!("{}/worker/index.html", h.url()))
        .call()
        .unwrap()
        .into_string()
        .unwrap();
    assert_eq!(body, "<html>worker</html>");
}
