//! Reproducible crowdsourced data processing.
//!
//! An experiment is a sequence of manipulations of a [`CrowdData`] table.
//! Every platform side effect (project registration, task publication,
//! collected answers) is journaled to an append-only store keyed by content
//! fingerprints, so rerunning a script after a crash, on another machine, or
//! with extra steps inserted replays cached work and only reaches the
//! platform for what is genuinely new.

pub mod canonical;
pub mod clock;
pub mod context;
pub mod crowddata;
pub mod error;
pub mod lineage;
pub mod operators;
pub mod persistence;
pub mod platform;
pub mod presenter;
pub mod quality;

pub use context::{CrowdContext, RunConfig};
pub use crowddata::{CrowdData, ResultSet, Row, TableView};
pub use error::{Error, Result};
pub use presenter::{AnswerSchema, Presenter};
