mod common;

use std::collections::BTreeMap;

use common::*;
use crowdpipe::canonical::fingerprint;
use crowdpipe::lineage::{EventKind, Lineage, LineageError};
use crowdpipe::Presenter;
use serde_json::json;

#[test]
fn task_history_matches_the_simulator_transcript() {
    let env = Env::images();
    let ctx = env.ctx(3);
    bob(&ctx);
    let lineage = Lineage::open(env.store_path()).unwrap();
    let fp = fingerprint(&json!("img1_url"));
    let history = lineage.task_history(PROJECT, &fp).unwrap();
    assert_eq!(history.len(), 4);
    assert_eq!(history[0].kind, EventKind::Published);
    assert!(history[0].worker_id.is_none() && history[0].answer.is_none());

    let transcript: Vec<_> = env
        .crowd
        .transcript()
        .into_iter()
        .filter(|e| e.fingerprint == fp)
        .collect();
    let answered: Vec<_> = history[1..]
        .iter()
        .map(|e| {
            (
                e.worker_id.clone().unwrap(),
                e.answer.clone().unwrap(),
                e.ts,
            )
        })
        .collect();
    let expected: Vec<_> = transcript
        .iter()
        .map(|t| (t.worker_id.clone(), t.answer.clone(), t.ts))
        .collect();
    assert_eq!(answered, expected);
    assert_eq!(
        history[0].ts,
        env.platform.task(&history[0].task_id).unwrap().published_at
    );
}

#[test]
fn unanswered_task_has_only_a_published_event() {
    let env = Env::images();
    let ctx = open_ctx(&env.store_path(), env.platform.clone(), 3);
    let mut cd = ctx.crowddata(objects(&BOB_URLS), "imglabel").unwrap();
    cd.set_presenter(Presenter::image_label())
        .unwrap()
        .publish_task()
        .unwrap();
    let lineage = Lineage::open(env.store_path()).unwrap();
    let h = lineage
        .task_history(PROJECT, &fingerprint(&json!("img2_url")))
        .unwrap();
    assert_eq!(h.len(), 1);
    assert!(matches!(
        lineage.task_history(PROJECT, "00ff"),
        Err(LineageError::UnknownObject(_))
    ));
}

#[test]
fn worker_assignments_reconcile_with_transcript() {
    let env = Env::images();
    let ctx = env.ctx(3);
    bob(&ctx);
    let lineage = Lineage::open(env.store_path()).unwrap();
    let mut per_worker: BTreeMap<String, usize> = BTreeMap::new();
    for e in env.crowd.transcript() {
        *per_worker.entry(e.worker_id).or_default() += 1;
    }
    let mut total = 0;
    for (w, n) in &per_worker {
        let events = lineage.worker_assignments(PROJECT, w).unwrap();
        assert_eq!(events.len(), *n);
        assert_eq!(*n, 3);
        total += events.len();
    }
    assert_eq!(total, 3 * 3);
    assert!(lineage
        .worker_assignments(PROJECT, "nobody")
        .unwrap()
        .is_empty());
}

#[test]
fn summary_counts_and_timestamp_stability() {
    let env = Env::images();
    let ctx = env.ctx(3);
    bob(&ctx);
    let before = Lineage::open(env.store_path()).unwrap();
    let s = before.experiment_summary(PROJECT).unwrap();
    assert_eq!((s.tasks, s.assignments, s.workers), (3, 9, 3));
    assert_eq!(s.tables["imglabel"].tasks, 3);
    let published_before: Vec<_> = before
        .events(PROJECT)
        .unwrap()
        .into_iter()
        .filter(|e| e.kind == EventKind::Published)
        .map(|e| e.ts)
        .collect();

    let mut cd = ctx.crowddata(objects(&BOB_URLS), "imglabel").unwrap();
    cd.extend(objects(&ALLY_URLS)).unwrap();
    cd.set_presenter(Presenter::image_label())
        .unwrap()
        .publish_task()
        .unwrap()
        .get_result(true)
        .unwrap();

    let after = Lineage::open(env.store_path()).unwrap();
    let s = after.experiment_summary(PROJECT).unwrap();
    assert_eq!((s.tasks, s.assignments), (5, 15));
    let published_after: Vec<_> = after
        .events(PROJECT)
        .unwrap()
        .into_iter()
        .filter(|e| e.kind == EventKind::Published)
        .map(|e| e.ts)
        .collect();
    assert_eq!(&published_after[..3], published_before.as_slice());
}

#[test]
fn lineage_reads_while_writer_holds_the_lock() {
    let env = Env::images();
    let ctx = env.ctx(3);
    bob(&ctx);
    // ctx still alive and locking the store
    let s = Lineage::open(env.store_path())
        .unwrap()
        .experiment_summary(PROJECT)
        .unwrap();
    assert_eq!(s.tasks, 3);
    let records = ctx.with_store(|st| st.len());
    Lineage::open(env.store_path())
        .unwrap()
        .experiment_summary(PROJECT)
        .unwrap();
    assert_eq!(ctx.with_store(|st| st.len()), records);
}
