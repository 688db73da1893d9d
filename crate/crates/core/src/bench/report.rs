//! Bench records and CSV / JSON report output.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::stats::{slope, Summary};
use crate::transport::LinkParams;

/// Context figure for response time at the original deployment scale.
pub const REFERENCE_RESPONSE_MS: f64 = 600.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub channel: u8,
    pub capture_ts: u64,
    pub render_ts: u64,
    pub latency_us: u64,
}

impl LatencyRecord {
    pub fn new(channel: u8, capture_ts: u64, render_ts: u64) -> Self {
        Self { channel, capture_ts, render_ts, latency_us: render_ts.saturating_sub(capture_ts) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncRecord {
    pub frame_seq: u64,
    pub arrival_ts: u64,
    pub spread_us: u64,
    /// Channels listed in the frame.
    pub channels: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadSample {
    /// Seconds since bench start.
    pub t: f64,
    /// Process CPU share over the sample window, `[0, 1]`.
    pub cpu_fraction: f64,
    /// CPU share of source threads only.
    pub source_cpu_fraction: f64,
    /// Mean capture time per tick over the window, microseconds.
    pub composite_time_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSample {
    pub kind: String,
    pub input_ts: u64,
    pub response_us: u64,
    /// Round trip of a ping measured just before the command.
    pub rtt_us: u64,
    pub applied_frame_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub mode: String,
    pub channels: usize,
    pub duration_s: f64,
    pub tick_rate: f64,
    pub canvas: (u32, u32),
    pub source_size: (u32, u32),
    pub source_fps: f64,
    pub link: Option<LinkParams>,
}

impl BenchConfig {
    fn rows(&self) -> Vec<(&'static str, String)> {
        let mut rows = vec![
            ("config.mode", self.mode.clone()),
            ("config.n", self.channels.to_string()),
            ("config.duration_s", self.duration_s.to_string()),
            ("config.tick_rate", self.tick_rate.to_string()),
            ("config.canvas", format!("{}x{}", self.canvas.0, self.canvas.1)),
            ("config.source_size", format!("{}x{}", self.source_size.0, self.source_size.1)),
            ("config.source_fps", self.source_fps.to_string()),
        ];
        match &self.link {
            Some(l) => {
                rows.push(("config.link_bandwidth_bytes_per_s", l.bandwidth_bytes_per_s.to_string()));
                rows.push(("config.link_burst_bytes", l.burst_bytes.to_string()));
                rows.push(("config.link_base_delay_us", l.base_delay_us.to_string()));
            }
            None => rows.push(("config.link", "loopback".into())),
        }
        rows
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyReport {
    pub config: Option<BenchConfig>,
    pub latency: Vec<LatencyRecord>,
    pub sync: Vec<SyncRecord>,
    pub load: Vec<LoadSample>,
    pub frames_received: u64,
}

impl LatencyReport {
    pub fn latency_summary(&self) -> Summary {
        Summary::of(&self.latency.iter().map(|r| r.latency_us as f64).collect::<Vec<_>>())
    }

    /// Mean over all latency records of all channels.
    pub fn mean_latency_us(&self) -> f64 {
        self.latency_summary().mean
    }

    pub fn per_channel(&self) -> BTreeMap<u8, Summary> {
        let mut by: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
        for r in &self.latency {
            by.entry(r.channel).or_default().push(r.latency_us as f64);
        }
        by.into_iter().map(|(c, v)| (c, Summary::of(&v))).collect()
    }

    pub fn max_spread_us(&self) -> u64 {
        self.sync.iter().map(|s| s.spread_us).max().unwrap_or(0)
    }

    /// Least-squares slope of process CPU share against time, per second.
    pub fn cpu_slope(&self) -> f64 {
        slope(&self.load.iter().map(|s| (s.t, s.cpu_fraction)).collect::<Vec<_>>())
    }

    pub fn mean_source_cpu(&self) -> f64 {
        super::stats::mean(&self.load.iter().map(|s| s.source_cpu_fraction).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResponseReport {
    pub config: Option<BenchConfig>,
    pub samples: Vec<ResponseSample>,
    pub timeouts: u64,
    pub rejected: u64,
    pub tick_period_us: u64,
}

impl ResponseReport {
    pub fn per_kind(&self) -> BTreeMap<String, Summary> {
        let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for s in &self.samples {
            by.entry(s.kind.clone()).or_default().push(s.response_us as f64);
        }
        by.into_iter().map(|(k, v)| (k, Summary::of(&v))).collect()
    }

    pub fn overall(&self) -> Summary {
        Summary::of(&self.samples.iter().map(|s| s.response_us as f64).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "report", rename_all = "snake_case")]
pub enum Report {
    Latency(LatencyReport),
    Response(ResponseReport),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    /// `.json` selects JSON, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            Self::Json
        } else {
            Self::Csv
        }
    }
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
    #[error("IoError: {0}")]
    Csv(#[from] csv::Error),
    #[error("IoError: {0}")]
    Json(#[from] serde_json::Error),
}

pub const CSV_HEADER: [&str; 4] = ["t_us", "channel", "metric", "value"];

fn csv_rows(report: &Report) -> Vec<[String; 4]> {
    let mut rows = Vec::new();
    let config = match report {
        Report::Latency(r) => r.config.as_ref(),
        Report::Response(r) => r.config.as_ref(),
    };
    if let Some(c) = config {
        for (k, v) in c.rows() {
            rows.push(["0".into(), String::new(), k.into(), v]);
        }
    }
    match report {
        Report::Latency(r) => {
            for l in &r.latency {
                rows.push([l.render_ts.to_string(), l.channel.to_string(), "latency_us".into(), l.latency_us.to_string()]);
            }
            for s in &r.sync {
                rows.push([s.arrival_ts.to_string(), String::new(), "sync_spread_us".into(), s.spread_us.to_string()]);
            }
            for s in &r.load {
                let t = ((s.t * 1e6) as u64).to_string();
                rows.push([t.clone(), String::new(), "cpu_fraction".into(), s.cpu_fraction.to_string()]);
                rows.push([t.clone(), String::new(), "source_cpu_fraction".into(), s.source_cpu_fraction.to_string()]);
                rows.push([t, String::new(), "composite_time_us".into(), s.composite_time_us.to_string()]);
            }
        }
        Report::Response(r) => {
            for s in &r.samples {
                rows.push([s.input_ts.to_string(), String::new(), format!("response_us.{}", s.kind), s.response_us.to_string()]);
            }
        }
    }
    rows
}

pub fn write_report(report: &Report, path: &Path, format: ReportFormat) -> Result<(), ReportError> {
    match format {
        ReportFormat::Json => {
            let file = std::fs::File::create(path)?;
            serde_json::to_writer_pretty(std::io::BufWriter::new(file), report)?;
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            w.write_record(CSV_HEADER)?;
            for row in csv_rows(report) {
                w.write_record(&row)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

pub fn read_json_report(path: &Path) -> Result<Report, ReportError> {
    Ok(serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?)
}
