//! Measurement harness: fused and naive latency benches, response-time
//! bench, load sampling, smoothing and report output.

pub mod fused;
pub mod load;
pub mod naive;
pub mod report;
pub mod response;
pub mod smooth;
pub mod stats;

use std::time::Duration;

use thiserror::Error;

use crate::transport::LinkParams;

pub use fused::run_fused_bench;
pub use naive::run_naive_bench;
pub use report::{write_report, LatencyReport, Report, ReportFormat, ResponseReport};
pub use response::{response_bench, run_response_bench, ScriptError};
pub use smooth::gaussian_smooth;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("SetupFailure: {0}")]
    SetupFailure(String),
}

/// Parameters shared by the latency benches.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchParams {
    pub channels: usize,
    pub duration: Duration,
    /// Leading interval excluded from the records.
    pub warmup: Duration,
    pub canvas: (u32, u32),
    pub source_size: (u32, u32),
    pub source_fps: f64,
    pub tick_rate: f64,
    pub link: Option<LinkParams>,
    pub load_interval: Duration,
}

impl BenchParams {
    pub fn new(channels: usize, duration: Duration) -> Self {
        Self {
            channels,
            duration,
            warmup: Duration::from_millis(500),
            canvas: (640, 360),
            source_size: (320, 180),
            source_fps: 30.0,
            tick_rate: 30.0,
            link: None,
            load_interval: Duration::from_millis(500),
        }
    }

    /// Bytes of one raw canvas frame on the wire with one descriptor.
    pub fn canvas_frame_bytes(&self) -> usize {
        crate::transport::wire::PREAMBLE_LEN
            + crate::transport::WireFrameHeader::encoded_len(1)
            + (self.canvas.0 * self.canvas.1 * 3) as usize
    }

    /// Raw bandwidth of one canvas-sized stream at the source rate, bytes/s.
    pub fn stream_demand(&self) -> f64 {
        self.canvas_frame_bytes() as f64 * self.source_fps.max(self.tick_rate)
    }

    fn check(&self) -> Result<(), BenchError> {
        if !(1..=crate::channel_model::MAX_CHANNELS).contains(&self.channels) {
            return Err(BenchError::SetupFailure(format!("channel count {} outside 1..=256", self.channels)));
        }
        Ok(())
    }

    pub(crate) fn config(&self, mode: &str) -> report::BenchConfig {
        report::BenchConfig {
            mode: mode.into(),
            channels: self.channels,
            duration_s: self.duration.as_secs_f64(),
            tick_rate: self.tick_rate,
            canvas: self.canvas,
            source_size: self.source_size,
            source_fps: self.source_fps,
            link: self.link,
        }
    }
}
