//! Scenario runner and analysis: drives the source-to-sink pipeline, turns
//! probe timestamps into per-stage latencies and summarizes them.

pub mod breakdown;
pub mod live;
pub mod pipeline;
pub mod report;
pub mod scenario;
pub mod sim;
pub mod stats;
pub mod sweep;

use thiserror::Error;

pub use breakdown::{
    assemble_breakdown, records_from_trace, BreakdownError, LatencyBreakdown, ProbeRecord,
    Topology, PARTIALS,
};
pub use live::{run_live, spawn_detector};
pub use report::{
    build_report, read_breakdowns_csv, summary_of, write_report, Report, ReportFiles,
    REPORT_VERSION,
};
pub use scenario::{
    apply_override, preset, DetectorSettings, PresetPlan, RunMode, ScanFormat, ScenarioConfig,
    PRESETS,
};
pub use sim::{simulate, RunRecords};
pub use stats::{ecdf, summarize, MetricsSummary, StatsError};
pub use sweep::{sweep_throughput, RatePoint, SaturationReport, SlopeTest};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("bad override `{assignment}`: {reason}")]
    Override { assignment: String, reason: String },
    #[error("scenario aborted: {0}")]
    Aborted(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl ScenarioError {
    /// Configuration problems as opposed to failed runs.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            ScenarioError::Config(_)
                | ScenarioError::UnknownPreset(_)
                | ScenarioError::Override { .. }
        )
    }
}

/// Collects the traces of one run in the configured mode.
pub fn collect(cfg: &ScenarioConfig) -> Result<RunRecords, ScenarioError> {
    match cfg.mode {
        RunMode::Sim => simulate(cfg),
        RunMode::Live => live::run_live(cfg),
    }
}

/// Runs one scenario and builds its report.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<Report, ScenarioError> {
    let records = collect(cfg)?;
    build_report(cfg, &records)
}
