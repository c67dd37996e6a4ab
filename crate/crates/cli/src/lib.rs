//! Command-line front end: configuration, dataset ingestion, synthetic
//! suites, per-record output bundles and HTML reports.

pub mod config;
pub mod dataset;
pub mod output;
pub mod report;
pub mod run;
pub mod synth;

pub const EXIT_OK: i32 = 0;
/// I/O or other process-level failure.
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
/// A record ran out of budget.
pub const EXIT_BUDGET: i32 = 4;
/// A model call failed (network, unparseable answer).
pub const EXIT_MODEL: i32 = 5;
/// A record failed for another reason (bad input, missing explanation).
pub const EXIT_RECORD: i32 = 6;
