#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use crowdpipe::canonical::fingerprint;
use crowdpipe::clock::LogicalClock;
use crowdpipe::platform::{worker_pool, Platform, SimulatedCrowd, WorkerProfile};
use crowdpipe::{CrowdContext, CrowdData, Presenter, RunConfig, TableView};
use serde_json::{json, Value};
use tempfile::TempDir;

pub const PROJECT: &str = "imglabel";
pub const BOB_URLS: [&str; 3] = ["img1_url", "img2_url", "img3_url"];
pub const ALLY_URLS: [&str; 2] = ["img4_url", "img5_url"];

pub fn truth_label(url: &str) -> &'static str {
    match url {
        "img2_url" | "img4_url" => "No",
        _ => "Yes",
    }
}

pub fn image_truth() -> HashMap<String, Value> {
    BOB_URLS
        .iter()
        .chain(ALLY_URLS.iter())
        .map(|u| (fingerprint(&json!(u)), json!(truth_label(u))))
        .collect()
}

pub fn config(n_assignments: u32) -> RunConfig {
    RunConfig {
        n_assignments,
        poll_interval: Duration::from_millis(1),
        result_timeout: Duration::from_secs(5),
        rng_seed: 7,
    }
}

/// A temp directory, an embedded platform on a logical clock and a seeded
/// simulated crowd that answers whenever results are polled.
pub struct Env {
    pub dir: TempDir,
    pub platform: Arc<Platform>,
    pub crowd: Arc<SimulatedCrowd>,
}

impl Env {
    pub fn new(pool: Vec<WorkerProfile>, truth: HashMap<String, Value>) -> Self {
        let platform = Arc::new(Platform::in_memory(Arc::new(LogicalClock::default())));
        let crowd = Arc::new(SimulatedCrowd::new(platform.clone(), pool, truth));
        Self {
            dir: tempfile::tempdir().unwrap(),
            platform,
            crowd,
        }
    }

    pub fn images() -> Self {
        Self::new(worker_pool(3, 1.0, 11), image_truth())
    }

    pub fn store_path(&self) -> PathBuf {
        self.dir.path().join(format!("{PROJECT}.cpdb"))
    }

    pub fn ctx(&self, n_assignments: u32) -> CrowdContext {
        open_ctx(&self.store_path(), self.crowd.clone(), n_assignments)
    }
}

pub fn open_ctx(
    store: &Path,
    platform: impl crowdpipe::platform::PlatformClient + 'static,
    n: u32,
) -> CrowdContext {
    CrowdContext::open_with_clock(
        PROJECT,
        store,
        platform,
        config(n),
        Arc::new(LogicalClock::default()),
    )
    .unwrap()
}

pub fn objects(urls: &[&str]) -> Vec<Value> {
    urls.iter().map(|u| json!(u)).collect()
}

/// Bob's five steps; `steps` limits how many run (a crash after that
/// boundary). Returns the table when all five ran.
pub fn bob_steps(ctx: &CrowdContext, steps: usize) -> crowdpipe::Result<Option<TableView>> {
    let mut cd: CrowdData = ctx.crowddata(objects(&BOB_URLS), "imglabel")?;
    if steps >= 2 {
        cd.set_presenter(Presenter::image_label())?;
    }
    if steps >= 3 {
        cd.publish_task()?;
    }
    if steps >= 4 {
        cd.get_result(true)?;
    }
    if steps >= 5 {
        cd.quality_control("mv")?;
        return Ok(Some(cd.view()));
    }
    Ok(None)
}

pub fn bob(ctx: &CrowdContext) -> TableView {
    bob_steps(ctx, 5).unwrap().unwrap()
}
