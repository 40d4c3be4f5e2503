//! Config-driven workflow: generate the benchmark, pretrain, run the three
//! scenarios, and consolidate the results.

pub mod commands;
pub mod config;
pub mod layout;
pub mod table;

pub use commands::{cmd_generate, cmd_pretrain, cmd_report, cmd_run, read_scores, write_scores, RunSummary};
pub use config::{EvalConfig, ExperimentConfig, Sites, DEFAULT_BENCHMARK};
pub use layout::Layout;
pub use table::{fmt6, parse_csv, render_text, write_csv, ReportRow, REPORT_HEADER};
