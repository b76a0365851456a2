//! Experiment harness for pooling-placement search: configuration, data
//! loading, the CNN backend, seeded search runs over every method, and
//! persisted records and reports.

pub mod cnn_backend;
pub mod config;
pub mod data;
pub mod error;
pub mod records;
pub mod report;
pub mod search;

pub use config::{BackendKind, DatasetKind, ExperimentConfig, Method};
pub use error::{HarnessError, Result};
pub use records::{load_results, persist_results, RunRecord};
pub use report::{rank_and_report, Report};
pub use search::{run_search, run_with_backend, RunOutput};
