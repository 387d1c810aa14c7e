//! Detection of cache pollution (LDA/FLA) and DoS/DDoS activity in CDN
//! access logs.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`access_log`] parses combined-format log lines into typed records
//!    and cleans them.
//! 2. [`features`] aggregates records into per-content, per-node, per-IP
//!    and per-account-offering feature tables.
//! 3. [`detection`] runs the tuned unsupervised models ([`ml`]) on each
//!    perspective and converts numeric outliers into attack-typed
//!    verdicts via pattern profiles.
//! 4. [`validation`] removes false positives and recovers false
//!    negatives using time-series, cross-perspective and
//!    account-offering analysis.
//!
//! [`synth`] generates labeled synthetic workloads so the whole chain is
//! testable without production data, and [`eval`] scores verdicts
//! against that ground truth. [`pipeline`] wires everything into the
//! file-based commands exposed by the CLI.

pub mod access_log;
pub mod config;
pub mod detection;
pub mod eval;
pub mod features;
pub mod ml;
pub mod normalize;
pub mod pipeline;
pub mod synth;
pub mod validation;

pub use access_log::{clean_records, parse_log_line, CleanRecord, LogSchema};
pub use detection::{Label, Perspective, Stage, Verdict};
pub use normalize::{minmax_normalize, ColumnStats};
