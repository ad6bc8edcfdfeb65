//! Verification harness: studies, invariant suite, reports and CLI.

pub mod cli;
pub mod config;
pub mod fit;
pub mod invariants;
pub mod report;
pub mod studies;

pub use config::RunConfig;
pub use studies::{Harness, Verdict};
