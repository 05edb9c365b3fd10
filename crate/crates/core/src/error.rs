use crate::persistence::StoreError;
use crate::platform::PlatformError;
use crate::presenter::PresenterError;
use crate::quality::QualityError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid identifier {0:?}: expected [A-Za-z0-9_-]+")]
    InvalidName(String),
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("table {0:?} is already open in this context")]
    DuplicateTableOpen(String),
    #[error(transparent)]
    InvalidPresenter(#[from] PresenterError),
    #[error("table {table:?} has tasks published under presenter {published}; refusing presenter {requested}")]
    PresenterLocked {
        table: String,
        published: String,
        requested: String,
    },
    #[error("no presenter set on table {0:?}")]
    PresenterNotSet(String),
    #[error("row {0} has no published task")]
    TasksNotPublished(u64),
    #[error("object {fingerprint} was published with n_assignments={cached}, run is configured for {configured}")]
    ConfigMismatch {
        fingerprint: String,
        cached: u32,
        configured: u32,
    },
    #[error("timed out waiting for results: {complete} of {total} tasks complete (partial results kept)")]
    ResultTimeout { complete: usize, total: usize },
    #[error("row {0} has no answers yet")]
    IncompleteResults(u64),
    #[error("filter predicate failed on row index {index}: {message}")]
    PredicateFailure { index: usize, message: String },
    #[error("similarity threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("cannot read records: {0}")]
    Input(String),
    #[error("unreadable cached payload: {0}")]
    CachePayload(String),
    #[error(transparent)]
    Quality(#[from] QualityError),
    #[error(transparent)]
    Platform(#[from] PlatformError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_name(name: &str) -> Result<()> {
    if !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
    {
        Ok(())
    } else {
        Err(Error::InvalidName(name.to_string()))
    }
}
