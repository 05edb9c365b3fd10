use std::cell::RefCell;
use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::sync::Arc;
use std::time::Duration;

use serde_json::Value;

use crate::clock::{Clock, SystemClock};
use crate::crowddata::CrowdData;
use crate::error::{check_name, Error, Result};
use crate::persistence::{Store, StoreState};
use crate::platform::PlatformClient;

/// Environment variable overriding the store location.
pub const DB_ENV: &str = "CROWDPIPE_DB";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Answers required per task.
    pub n_assignments: u32,
    pub poll_interval: Duration,
    pub result_timeout: Duration,
    pub rng_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_assignments: 3,
            poll_interval: Duration::from_millis(200),
            result_timeout: Duration::from_secs(60),
            rng_seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_assignments == 0 {
            return Err(Error::InvalidConfig(
                "n_assignments must be at least 1".into(),
            ));
        }
        if self.poll_interval.is_zero() {
            return Err(Error::InvalidConfig(
                "poll_interval must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub(crate) struct ContextInner {
    pub(crate) project: String,
    pub(crate) store: Store,
    pub(crate) platform: Box<dyn PlatformClient>,
    pub(crate) config: RunConfig,
    pub(crate) open_tables: HashSet<String>,
}

/// Entry point of a pipeline: binds a project name to its store, a platform
/// client and a run configuration. Holds the store's exclusive lock.
pub struct CrowdContext {
    inner: Rc<RefCell<ContextInner>>,
}

impl std::fmt::Debug for CrowdContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("CrowdContext")
            .field("project", &inner.project)
            .field("store", &inner.store)
            .finish()
    }
}

impl CrowdContext {
    /// `$CROWDPIPE_DB` if set, else `./<project>.cpdb`.
    pub fn default_store_path(project: &str) -> PathBuf {
        std::env::var_os(DB_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(format!("{project}.cpdb")))
    }

    pub fn open(
        project: &str,
        store_path: impl AsRef<Path>,
        platform: impl PlatformClient + 'static,
        config: RunConfig,
    ) -> Result<Self> {
        Self::open_with_clock(project, store_path, platform, config, Arc::new(SystemClock))
    }

    /// As [`CrowdContext::open`], with the clock used to stamp store records.
    pub fn open_with_clock(
        project: &str,
        store_path: impl AsRef<Path>,
        platform: impl PlatformClient + 'static,
        config: RunConfig,
        clock: Arc<dyn Clock>,
    ) -> Result<Self> {
        check_name(project)?;
        config.validate()?;
        let store = Store::open_with_clock(store_path, clock)?;
        let inner = ContextInner {
            project: project.to_string(),
            store,
            platform: Box::new(platform),
            config,
            open_tables: HashSet::new(),
        };
        Ok(Self {
            inner: Rc::new(RefCell::new(inner)),
        })
    }

    pub fn crowddata(
        &self,
        objects: impl IntoIterator<Item = Value>,
        table_name: &str,
    ) -> Result<CrowdData> {
        CrowdData::create(self.inner.clone(), objects, table_name)
    }

    pub fn project(&self) -> String {
        self.inner.borrow().project.clone()
    }

    pub fn config(&self) -> RunConfig {
        self.inner.borrow().config.clone()
    }

    pub fn store_path(&self) -> PathBuf {
        self.inner.borrow().store.path().to_path_buf()
    }

    /// Read access to the replayed store contents.
    pub fn with_store<R>(&self, f: impl FnOnce(&StoreState) -> R) -> R {
        f(self.inner.borrow().store.state())
    }
}
