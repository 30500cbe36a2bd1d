//! Run reports and their JSON/CSV exports.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use meterguard::attacks::AttackAudit;
use meterguard::journal::{event_line, CorrectionRecord, Detection, Event, RoundRecord};
use meterguard::simnet::{Counters, FloodSpec, WindowMetrics};
use meterguard::store::MeterStore;
use meterguard::types::{format_timestamp, Reading};
use serde::{Deserialize, Serialize};

use crate::RunError;

pub const REPORT_FILE: &str = "report.json";
pub const EVENTS_FILE: &str = "events.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub runs: Vec<RunReport>,
    /// One row per sweep step; empty without a sweep.
    pub dos_table: Vec<DosRow>,
    pub assertions: Vec<AssertionResult>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    /// Flooding machines active in this run.
    pub attackers: usize,
    pub floods: Vec<FloodSpec>,
    pub windows: Vec<WindowMetrics>,
    pub event_counts: Vec<NodeEventCounts>,
    pub detections: Vec<Detection>,
    pub rounds: Vec<RoundRecord>,
    pub corrections: Vec<CorrectionRecord>,
    pub audits: Vec<AuditEntry>,
    pub checkpoints: Vec<Checkpoint>,
    /// Packet counters per node id.
    pub counters: BTreeMap<String, Counters>,
    /// Final digest of every collection, by owner then source.
    pub store_digests: BTreeMap<String, BTreeMap<String, String>>,
    /// SHA-256 of the event log (`events.csv` of this run).
    pub event_log_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEventCounts {
    pub node: u32,
    pub counts: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    /// Index of the attack in the scenario.
    pub attack: usize,
    pub audit: AttackAudit,
    /// Digest of the victim's own series up to the attack time, taken at
    /// the end of the run.
    pub final_digest: String,
}

impl AuditEntry {
    pub fn new(attack: usize, audit: AttackAudit) -> Self {
        AuditEntry {
            attack,
            audit,
            final_digest: String::new(),
        }
    }
}

/// Store contents captured for a `store_equals` assertion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub assertion: usize,
    pub readings: Vec<Reading>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DosRow {
    pub attackers: usize,
    pub loss_pct: f64,
    pub cpu_pct: f64,
    /// Mean over answered probes while the flood runs.
    pub mean_rtt_ms: Option<f64>,
    pub timeouts: usize,
    pub probes: usize,
    /// Mean RTT before the flood.
    pub baseline_rtt_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssertionResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Events and stores of one run, written next to the report.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub label: String,
    pub events: Vec<Event>,
    pub stores: Vec<MeterStore>,
}

fn io_err(path: &Path, e: impl ToString) -> RunError {
    RunError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

fn write(path: &Path, text: &str) -> Result<(), RunError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn to_json(report: &Report) -> String {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    text
}

pub fn from_json(text: &str) -> Result<Report, serde_json::Error> {
    serde_json::from_str(text)
}

/// Event log file name of a run: `events.csv` for a single run,
/// `events_<label>.csv` inside a sweep.
pub fn events_file(report: &Report, label: &str) -> String {
    if report.runs.len() == 1 {
        EVENTS_FILE.to_string()
    } else {
        format!("events_{label}.csv")
    }
}

/// Writes `report.json`, the event logs and optionally the final stores.
pub fn write_run_dir(dir: &Path, report: &Report, artifacts: &[RunArtifacts], stores: bool) -> Result<(), RunError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write(&dir.join(REPORT_FILE), &to_json(report))?;
    for a in artifacts {
        if !a.events.is_empty() {
            let text: String = a.events.iter().map(event_line).collect();
            write(&dir.join(events_file(report, &a.label)), &text)?;
        }
        if stores {
            let sub = if artifacts.len() == 1 { dir.join("stores") } else { dir.join("stores").join(&a.label) };
            for store in &a.stores {
                let mut copy = store.clone();
                copy.persist_to(&sub).map_err(|e| io_err(&sub, e))?;
            }
        }
    }
    Ok(())
}

pub fn read_run_dir(dir: &Path) -> Result<Report, RunError> {
    let path = dir.join(REPORT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    from_json(&text).map_err(|e| io_err(&path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

/// Writes the export files into `dir` and returns their names.
pub fn export(report: &Report, format: Format, dir: &Path) -> Result<Vec<String>, RunError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let files = match format {
        Format::Json => vec![(REPORT_FILE.to_string(), to_json(report))],
        Format::Csv => csv_files(report).map_err(|e| io_err(dir, e))?,
    };
    for (name, text) in &files {
        write(&dir.join(name), text)?;
    }
    Ok(files.into_iter().map(|(n, _)| n).collect())
}

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_default()
}

/// One CSV per metric family.
pub fn csv_files(report: &Report) -> Result<Vec<(String, String)>, csv::Error> {
    let mut files = Vec::new();
    let runs = || report.runs.iter();

    files.push((
        "metrics.csv".into(),
        csv_text(
            &["run", "attackers", "sim_time", "target", "rtt_ms", "timeout", "offered", "dropped", "loss_ratio", "cpu_load"],
            runs().flat_map(|r| {
                r.windows.iter().map(move |w| {
                    vec![
                        r.label.clone(),
                        r.attackers.to_string(),
                        w.sim_time.to_string(),
                        w.target.to_string(),
                        opt(w.rtt_ms),
                        w.timeout.to_string(),
                        w.offered.to_string(),
                        w.dropped.to_string(),
                        format!("{:.6}", w.loss_ratio),
                        format!("{:.6}", w.cpu_load),
                    ]
                })
            }),
        )?,
    ));

    // timeouts plotted as zero
    files.push((
        "rtt_timeline.csv".into(),
        csv_text(
            &["attackers", "sim_time", "rtt_ms"],
            runs().flat_map(|r| {
                r.windows.iter().map(move |w| {
                    vec![r.attackers.to_string(), w.sim_time.to_string(), format!("{:.3}", w.rtt_ms.unwrap_or(0.0))]
                })
            }),
        )?,
    ));

    if !report.dos_table.is_empty() {
        files.push((
            "dos_table.csv".into(),
            csv_text(
                &["attackers", "loss_pct", "cpu_pct"],
                report
                    .dos_table
                    .iter()
                    .map(|row| vec![row.attackers.to_string(), format!("{:.1}", row.loss_pct), format!("{:.1}", row.cpu_pct)]),
            )?,
        ));
    }

    files.push((
        "detections.csv".into(),
        csv_text(
            &["run", "id", "sim_time", "node", "date", "suspicious", "distance", "threshold"],
            runs().flat_map(|r| {
                r.detections.iter().map(move |d| {
                    vec![
                        r.label.clone(),
                        d.id.to_string(),
                        d.sim_time.to_string(),
                        d.node.to_string(),
                        d.date.to_string(),
                        d.suspicious.iter().map(|t| format_timestamp(*t)).collect::<Vec<_>>().join(";"),
                        opt(d.distance),
                        format!("{:.3}", d.threshold),
                    ]
                })
            }),
        )?,
    ));

    files.push((
        "corrections.csv".into(),
        csv_text(
            &["run", "sim_time", "node", "round", "detection", "time", "old", "new"],
            runs().flat_map(|r| {
                r.corrections.iter().map(move |c| {
                    vec![
                        r.label.clone(),
                        c.sim_time.to_string(),
                        c.node.to_string(),
                        c.round.to_string(),
                        c.detection.to_string(),
                        format_timestamp(c.time),
                        c.old.to_string(),
                        c.new.to_string(),
                    ]
                })
            }),
        )?,
    ));

    files.push((
        "rounds.csv".into(),
        csv_text(
            &["run", "id", "node", "detection", "opened", "closed", "requested", "responded", "timed_out", "outcome", "corrections"],
            runs().flat_map(|r| {
                r.rounds.iter().map(move |rd| {
                    let ids = |v: &[meterguard::types::NodeId]| v.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(";");
                    vec![
                        r.label.clone(),
                        rd.id.to_string(),
                        rd.node.to_string(),
                        rd.detection.to_string(),
                        rd.opened.to_string(),
                        rd.closed.map(|t| t.to_string()).unwrap_or_default(),
                        ids(&rd.requested),
                        ids(&rd.responded),
                        rd.timed_out.to_string(),
                        rd.outcome
                            .map(|o| serde_json::to_value(o).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default())
                            .unwrap_or_default(),
                        rd.corrections.to_string(),
                    ]
                })
            }),
        )?,
    ));

    files.push((
        "event_counts.csv".into(),
        csv_text(
            &["run", "node", "kind", "count"],
            runs().flat_map(|r| {
                r.event_counts.iter().flat_map(move |n| {
                    n.counts
                        .iter()
                        .map(move |(k, c)| vec![r.label.clone(), n.node.to_string(), k.clone(), c.to_string()])
                })
            }),
        )?,
    ));

    files.push((
        "assertions.csv".into(),
        csv_text(
            &["assertion", "passed", "detail"],
            report
                .assertions
                .iter()
                .map(|a| vec![a.name.clone(), a.passed.to_string(), a.detail.clone()]),
        )?,
    ));
    Ok(files)
}
