//! Naive baseline: every channel streamed on its own connection at canvas
//! resolution, all connections sharing one shaped link.

use std::sync::Arc;
use std::time::Duration;

use super::report::LatencyReport;
use super::{BenchError, BenchParams};
use crate::channel_model::ChannelId;
use crate::client::{run_client, ClientOptions};
use crate::clock::StreamClock;
use crate::compositor::{ChannelProvenance, FusedFrame, Rect};
use crate::server::stratify_phases;
use crate::source::{run_source, Frame, FrameSink, SinkClosed, SourceContext, SourceSpec};
use crate::transport::{serve_stream, FrameFeed, FuseConnection, ShapedLink, StreamOptions};

/// Publishes each captured frame as its own one-channel stream frame.
struct DirectSink {
    feed: Arc<FrameFeed>,
}

impl FrameSink for DirectSink {
    fn submit(&self, frame: Frame) -> Result<(), SinkClosed> {
        let f = FusedFrame {
            frame_seq: frame.seq,
            composite_ts: frame.capture_ts,
            width: frame.width,
            height: frame.height,
            channels: vec![ChannelProvenance {
                channel: frame.channel,
                source_seq: frame.seq,
                capture_ts: frame.capture_ts,
                rect: Rect::new(0, 0, frame.width, frame.height),
                stale: false,
            }],
            pixels: frame.pixels,
        };
        self.feed.publish(f);
        Ok(())
    }
}

pub fn run_naive_bench(p: &BenchParams) -> Result<LatencyReport, BenchError> {
    p.check()?;
    let setup = |e: &dyn std::fmt::Display| BenchError::SetupFailure(e.to_string());
    let link = p.link.map(ShapedLink::new).transpose().map_err(|e| setup(&e))?;
    let clock = StreamClock::new();
    let mut specs: Vec<SourceSpec> = (0..p.channels)
        .map(|c| SourceSpec::synthetic(ChannelId(c as u8), p.source_fps, p.canvas.0, p.canvas.1))
        .collect();
    stratify_phases(&mut specs);

    let mut servers = Vec::new();
    let mut clients = Vec::new();
    let mut sources = Vec::new();
    let period = (1e6 / p.source_fps).round() as u64;
    let ctx = SourceContext { clock, start_us: clock.now_us() + 50_000, cpu: None };
    for spec in specs {
        let feed = FrameFeed::new();
        let mut opts = StreamOptions::raw(&clock, period);
        opts.link = link.clone();
        let server = serve_stream("127.0.0.1:0", feed.clone(), opts).map_err(|e| setup(&e))?;
        let mut conn = FuseConnection::connect(server.local_addr(), Duration::from_secs(5)).map_err(|e| setup(&e))?;
        let copts = ClientOptions { duration: p.warmup + p.duration, warmup: p.warmup, ..Default::default() };
        clients.push(
            std::thread::Builder::new()
                .name(format!("naive-client-{}", spec.channel.0))
                .spawn(move || run_client(&mut conn, copts))
                .map_err(|e| setup(&e))?,
        );
        servers.push((server, feed.clone()));
        sources.push(run_source(spec, DirectSink { feed }, ctx.clone()).map_err(|e| setup(&e))?);
    }

    let mut report = LatencyReport { config: Some(p.config("naive")), ..Default::default() };
    let mut failure = None;
    for c in clients {
        match c.join().expect("client thread") {
            Ok(run) => {
                report.frames_received += run.frames;
                report.latency.extend(run.latency);
                report.sync.extend(run.sync);
            }
            Err(e) => failure = Some(setup(&e)),
        }
    }
    for s in sources {
        s.stop();
    }
    for (server, feed) in servers {
        feed.close();
        server.stop();
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::LinkParams;

    #[test]
    fn generous_link_single_stream_near_base_delay() {
        let mut p = BenchParams::new(1, Duration::from_secs(2));
        p.canvas = (320, 180);
        p.warmup = Duration::from_millis(300);
        let frame = p.canvas_frame_bytes();
        // 100x the stream's demand: serialization of one frame takes well under a millisecond.
        let bw = p.stream_demand() * 100.0;
        p.link = Some(LinkParams::with_frame_burst(bw, frame, 10_000));
        let r = run_naive_bench(&p).unwrap();
        let serialization_us = frame as f64 / bw * 1e6;
        let mean = r.mean_latency_us();
        assert!(mean >= 10_000.0, "{mean}");
        assert!(mean <= 10_000.0 + serialization_us + 15_000.0, "{mean}");
    }
}
