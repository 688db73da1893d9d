//! Measuring FUSE/1 subscriber.
//!
//! Records per-channel latency (`arrival - capture_ts`) and per-frame sync
//! spread, and optionally checks every tile's synthetic signature against
//! the frame's provenance.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::bench::report::{LatencyRecord, SyncRecord};
use crate::control::FrameArrivals;
use crate::source::{decode_signature, PixelView, SIGNATURE_HEIGHT, SIGNATURE_WIDTH};
use crate::transport::wire::to_fused_frame;
use crate::transport::{FuseConnection, ReceivedFrame, TransportError};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("connection: {0}")]
    Transport(#[from] TransportError),
    #[error("stream ended before any frame arrived")]
    NoFrames,
}

pub type FrameHook = Box<dyn FnMut(&ReceivedFrame) + Send>;

pub struct ClientOptions {
    pub duration: Duration,
    pub max_frames: Option<u64>,
    /// Source frame size used to locate signatures inside tiles; `None`
    /// disables verification.
    pub verify_source_size: Option<(u32, u32)>,
    /// Verify every k-th frame.
    pub verify_every: u64,
    /// Frames arriving before this much time has passed are not recorded.
    pub warmup: Duration,
    pub arrivals: Option<Arc<FrameArrivals>>,
    pub stop: Option<Arc<AtomicBool>>,
    pub on_frame: Option<FrameHook>,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self {
            duration: Duration::from_secs(10),
            max_frames: None,
            verify_source_size: None,
            verify_every: 1,
            warmup: Duration::ZERO,
            arrivals: None,
            stop: None,
            on_frame: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VerifyStats {
    pub frames_checked: u64,
    pub tiles_checked: u64,
    pub mismatches: u64,
    pub undecodable: u64,
    pub first_failure: Option<String>,
}

impl VerifyStats {
    pub fn passed(&self) -> bool {
        self.tiles_checked > 0 && self.mismatches == 0 && self.undecodable == 0
    }

    fn fail(&mut self, msg: String) {
        if self.first_failure.is_none() {
            self.first_failure = Some(msg);
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ClientRun {
    pub latency: Vec<LatencyRecord>,
    pub sync: Vec<SyncRecord>,
    pub frames: u64,
    /// Frame sequence numbers skipped by the server's drop-oldest queue.
    pub seq_gaps: u64,
    pub verify: VerifyStats,
}

impl ClientRun {
    pub fn mean_latency_us(&self) -> f64 {
        crate::bench::stats::mean(&self.latency.iter().map(|r| r.latency_us as f64).collect::<Vec<_>>())
    }

    pub fn max_spread_us(&self) -> u64 {
        self.sync.iter().map(|s| s.spread_us).max().unwrap_or(0)
    }
}

/// Check every tile of one frame.
pub fn verify_frame(frame: &ReceivedFrame, source_size: (u32, u32), stats: &mut VerifyStats) {
    stats.frames_checked += 1;
    let fused = match to_fused_frame(&frame.header, frame.payload.clone()) {
        Ok(f) => f,
        Err(e) => {
            stats.undecodable += 1;
            stats.fail(format!("frame {}: {e}", frame.header.frame_seq));
            return;
        }
    };
    let view = PixelView::whole(&fused.pixels, fused.width, fused.height);
    for p in &fused.channels {
        stats.tiles_checked += 1;
        let w = SIGNATURE_WIDTH * p.rect.w / source_size.0;
        let h = SIGNATURE_HEIGHT * p.rect.h / source_size.1;
        match decode_signature(view.sub(p.rect.x, p.rect.y, w, h)) {
            Ok((ch, seq)) if ch == p.channel && seq == p.source_seq as u32 => {}
            Ok((ch, seq)) => {
                stats.mismatches += 1;
                stats.fail(format!(
                    "frame {}: tile claims ({}, {}) but shows ({}, {seq})",
                    fused.frame_seq, p.channel.0, p.source_seq, ch.0
                ));
            }
            Err(e) => {
                stats.undecodable += 1;
                stats.fail(format!("frame {} channel {}: {e}", fused.frame_seq, p.channel.0));
            }
        }
    }
}

/// Read frames until the duration, frame limit or stop flag is reached.
pub fn run_client(conn: &mut FuseConnection, mut opts: ClientOptions) -> Result<ClientRun, ClientError> {
    let started = Instant::now();
    let deadline = started + opts.duration;
    conn.set_read_timeout(Some(Duration::from_millis(500))).map_err(TransportError::Connect)?;
    let mut run = ClientRun::default();
    let mut last_seq: Option<u64> = None;
    loop {
        if Instant::now() >= deadline
            || opts.max_frames.is_some_and(|m| run.frames >= m)
            || opts.stop.as_ref().is_some_and(|s| s.load(Ordering::Relaxed))
        {
            break;
        }
        let frame = match conn.next_frame() {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(TransportError::Wire(crate::transport::WireError::Io(e)))
                if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) =>
            {
                continue
            }
            Err(e) => {
                if run.frames == 0 {
                    return Err(e.into());
                }
                break;
            }
        };
        let h = &frame.header;
        if let Some(a) = &opts.arrivals {
            a.record(h.frame_seq, frame.arrival_us);
        }
        if let Some(hook) = opts.on_frame.as_mut() {
            hook(&frame);
        }
        if started.elapsed() < opts.warmup {
            last_seq = Some(h.frame_seq);
            continue;
        }
        if let Some(prev) = last_seq {
            run.seq_gaps += h.frame_seq.saturating_sub(prev + 1);
        }
        last_seq = Some(h.frame_seq);
        for d in &h.channels {
            run.latency.push(LatencyRecord::new(d.channel_id as u8, d.capture_ts_us, frame.arrival_us));
        }
        let ts = h.channels.iter().map(|d| d.capture_ts_us);
        let spread = match (ts.clone().min(), ts.max()) {
            (Some(lo), Some(hi)) => hi - lo,
            _ => 0,
        };
        run.sync.push(SyncRecord {
            frame_seq: h.frame_seq,
            arrival_ts: frame.arrival_us,
            spread_us: spread,
            channels: h.channels.len() as u16,
        });
        if let Some(size) = opts.verify_source_size {
            if run.frames % opts.verify_every.max(1) == 0 {
                verify_frame(&frame, size, &mut run.verify);
            }
        }
        run.frames += 1;
    }
    if run.frames == 0 && opts.warmup.is_zero() {
        return Err(ClientError::NoFrames);
    }
    Ok(run)
}
