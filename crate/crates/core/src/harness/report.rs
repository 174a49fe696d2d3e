//! Report assembly and the JSON / CSV output files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::breakdown::{assemble_breakdown, LatencyBreakdown, PARTIALS};
use super::scenario::ScenarioConfig;
use super::sim::RunRecords;
use super::stats::{summarize, MetricsSummary};
use super::ScenarioError;

pub const REPORT_VERSION: u32 = 1;

/// Modelling choices that shape every number in a report.
pub const ASSUMPTIONS: [&str; 6] = [
    "reference scan: 150 packets of 1206 bytes with 49016 valid returns, synthesized to match the recorded frame size",
    "expanded point layout: 22 bytes per point (x, y, z, intensity as f32, ring as u16, time offset as f32)",
    "communication latency is total minus all same-clock partials, split evenly between up and down",
    "mqtt keep-alive 30 s by default; the broker closes a link after 1.5x keep-alive without traffic",
    "each mqtt client keeps one outbound FIFO and one inbound FIFO per connection",
    "qos 2: the broker forwards on PUBREL and receivers release on PUBREL unless configured otherwise",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub report_version: u32,
    pub config: ScenarioConfig,
    pub assumptions: Vec<String>,
    pub samples_expected: usize,
    pub samples_reported: usize,
    /// Samples excluded for missing or inconsistent probes, or never delivered.
    pub samples_missing: usize,
    pub bus_drops: u64,
    /// Per partial plus `total`, `interfaces` and `comm`.
    pub summary: BTreeMap<String, MetricsSummary>,
    #[serde(skip)]
    pub breakdowns: Vec<LatencyBreakdown>,
}

impl Report {
    pub fn mean(&self, series: &str) -> Option<f64> {
        self.summary.get(series).map(|s| s.mean)
    }

    pub fn totals(&self) -> Vec<f64> {
        self.breakdowns.iter().map(|b| b.total).collect()
    }
}

/// Summaries of every series derived from the breakdowns.
pub fn summary_of(
    breakdowns: &[LatencyBreakdown],
) -> Result<BTreeMap<String, MetricsSummary>, ScenarioError> {
    let mut out = BTreeMap::new();
    if breakdowns.is_empty() {
        return Ok(out);
    }
    let mut add = |name: &str, f: &dyn Fn(&LatencyBreakdown) -> f64| {
        let values: Vec<f64> = breakdowns.iter().map(f).collect();
        out.insert(name.to_string(), summarize(&values).expect("non-empty"));
    };
    for (i, name) in PARTIALS.iter().enumerate() {
        add(name, &|b| b.partials()[i]);
    }
    add("total", &|b| b.total);
    add("interfaces", &|b| b.interfaces());
    add("comm", &|b| b.comm());
    Ok(out)
}

pub fn build_report(cfg: &ScenarioConfig, records: &RunRecords) -> Result<Report, ScenarioError> {
    let mut breakdowns = Vec::with_capacity(records.samples.len());
    let mut missing = records.lost.len();
    for (id, recs) in &records.samples {
        match assemble_breakdown(recs, cfg.topology) {
            Ok(b) => breakdowns.push(b),
            Err(e) => {
                tracing::warn!(sample = id, error = %e, "sample excluded");
                missing += 1;
            }
        }
    }
    let expected = cfg.sample_count;
    if missing as f64 > cfg.max_missing_fraction * expected as f64 {
        return Err(ScenarioError::Aborted(format!(
            "{missing} of {expected} samples missing probes"
        )));
    }
    if breakdowns.is_empty() {
        return Err(ScenarioError::Aborted("no sample completed".into()));
    }
    Ok(Report {
        report_version: REPORT_VERSION,
        config: cfg.clone(),
        assumptions: ASSUMPTIONS.iter().map(|s| s.to_string()).collect(),
        samples_expected: expected,
        samples_reported: breakdowns.len(),
        samples_missing: missing,
        bus_drops: records.bus_drops,
        summary: summary_of(&breakdowns)?,
        breakdowns,
    })
}

#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub json: PathBuf,
    pub csv: PathBuf,
    pub ecdf: PathBuf,
}

/// Writes `<stem>.json`, `<stem>.csv` and `<stem>_ecdf.csv` into `dir`.
pub fn write_report(report: &Report, dir: &Path, stem: &str) -> Result<ReportFiles, ScenarioError> {
    std::fs::create_dir_all(dir)?;
    let files = ReportFiles {
        json: dir.join(format!("{stem}.json")),
        csv: dir.join(format!("{stem}.csv")),
        ecdf: dir.join(format!("{stem}_ecdf.csv")),
    };
    let mut json = BufWriter::new(File::create(&files.json)?);
    serde_json::to_writer_pretty(&mut json, report)?;
    json.write_all(b"\n")?;
    json.flush()?;

    let mut csv = csv::Writer::from_path(&files.csv)?;
    for b in &report.breakdowns {
        csv.serialize(b)?;
    }
    csv.flush()?;

    let mut ecdf = csv::Writer::from_path(&files.ecdf)?;
    ecdf.write_record(["total_ms", "fraction"])?;
    if let Some(total) = report.summary.get("total") {
        for (x, f) in &total.ecdf {
            ecdf.write_record([x.to_string(), f.to_string()])?;
        }
    }
    ecdf.flush()?;
    Ok(files)
}

/// Reads the per-sample CSV written by [`write_report`].
pub fn read_breakdowns_csv(path: &Path) -> Result<Vec<LatencyBreakdown>, ScenarioError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        out.push(row?);
    }
    Ok(out)
}
