//! Experiment harness: scenario generation, parameter sweeps, reports and
//! timing runs.

mod report;
mod scenario;
mod sweep;

use thiserror::Error;

use crate::auction::AuctionError;

pub use report::{default_decisions, emit_report, read_csv, write_csv, ReportFormat, ReportMetadata, CSV_HEADER};
pub use scenario::{generate_scenario, generate_with_redraw, Scenario, TaskPlacement, MAX_TASK_DRAWS};
pub use sweep::{
    aggregate, bench_timing, check_trend, run_experiment, sim_delay, Aggregate, Algorithm, DelayReport, ResultRow,
    RowFailure, SweepResult, SweepSpec, TimingRow, Trend, TrendViolation,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("infeasible scenario: {0}")]
    InfeasibleScenario(String),
    #[error(transparent)]
    Auction(#[from] AuctionError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed report: {0}")]
    Malformed(String),
    #[error("chain simulation failed: {0}")]
    Chain(#[from] crate::chain::ChainError),
}
