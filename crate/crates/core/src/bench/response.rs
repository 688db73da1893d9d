//! Response-time bench: scripted commands against a running server,
//! measured on the client clock.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use super::report::{ResponseReport, ResponseSample};
use super::{BenchError, BenchParams};
use crate::channel_model::{ChannelId, SceneConfig};
use crate::client::{run_client, ClientOptions};
use crate::compositor::LayoutMode;
use crate::control::{measure_response, CommandKind, ControlClient, FrameArrivals, ResponseError, DEFAULT_ACK_TIMEOUT};
use crate::server::{stratify_phases, Server, ServerConfig};
use crate::source::SourceSpec;
use crate::transport::FuseConnection;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("bad script entry {0:?}")]
pub struct ScriptError(pub String);

/// Parse `select:2,layout:grid,layout:focus:1,toggle:0`.
pub fn parse_script(text: &str) -> Result<Vec<CommandKind>, ScriptError> {
    let bad = |s: &str| ScriptError(s.to_owned());
    let ch = |s: &str, v: &str| v.parse::<u32>().ok().and_then(|c| ChannelId::new(c).ok()).ok_or_else(|| bad(s));
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let parts: Vec<&str> = s.split(':').collect();
            match parts.as_slice() {
                ["select", c] => Ok(CommandKind::Select(ch(s, c)?)),
                ["toggle", c] | ["toggle_visibility", c] => Ok(CommandKind::ToggleVisibility(ch(s, c)?)),
                ["layout", "grid"] => Ok(CommandKind::Layout(LayoutMode::Grid)),
                ["layout", "focus", c] => Ok(CommandKind::Layout(LayoutMode::Focus(ch(s, c)?))),
                _ => Err(bad(s)),
            }
        })
        .collect()
}

/// `count` selects cycling over channels `0..n`.
pub fn select_script(n: usize, count: usize) -> Vec<CommandKind> {
    (0..count).map(|i| CommandKind::Select(ChannelId((i % n.max(1)) as u8))).collect()
}

/// Replay `script` `repetitions` times. AckTimeouts and rejections are
/// counted, not fatal.
pub fn response_bench(
    stream_addr: SocketAddr,
    control_addr: SocketAddr,
    token: Option<&str>,
    script: &[CommandKind],
    repetitions: usize,
) -> Result<ResponseReport, BenchError> {
    let mut report = ResponseReport::default();
    if script.is_empty() || repetitions == 0 {
        return Ok(report);
    }
    let setup = |e: &dyn std::fmt::Display| BenchError::SetupFailure(e.to_string());
    let mut conn = FuseConnection::connect(stream_addr, Duration::from_secs(5)).map_err(|e| setup(&e))?;
    let clock = conn.clock();
    report.tick_period_us = conn.info().tick_period_us as u64;
    let arrivals = FrameArrivals::new();
    let stop = Arc::new(AtomicBool::new(false));
    let reader_opts = ClientOptions {
        duration: Duration::from_secs(24 * 3600),
        arrivals: Some(arrivals.clone()),
        stop: Some(stop.clone()),
        warmup: Duration::from_secs(24 * 3600),
        ..Default::default()
    };
    let reader = std::thread::Builder::new()
        .name("response-reader".into())
        .spawn(move || run_client(&mut conn, reader_opts))
        .map_err(|e| setup(&e))?;
    let outcome = (|| {
        let mut control = ControlClient::connect(control_addr, token, clock).map_err(|e| setup(&e))?;
        // Wait for the stream to be flowing.
        if arrivals.wait_for(0, Duration::from_secs(5)).is_none() {
            return Err(setup(&"no frames on the stream"));
        }
        let mut issued = 0u64;
        for _ in 0..repetitions {
            for &kind in script {
                // Each command would otherwise go out right after a frame
                // arrives; spread input times across the tick period.
                let offset = report.tick_period_us * (issued % 7) / 7;
                issued += 1;
                std::thread::sleep(Duration::from_micros(offset));
                let rtt_us = match control.ping() {
                    Ok(r) => r,
                    Err(ResponseError::AckTimeout(_)) => {
                        report.timeouts += 1;
                        continue;
                    }
                    Err(e) => return Err(setup(&e)),
                };
                match control.command(kind) {
                    Ok((rec, ack)) => match measure_response(&rec, &ack, &arrivals, DEFAULT_ACK_TIMEOUT) {
                        Ok(response_us) => report.samples.push(ResponseSample {
                            kind: kind.name().into(),
                            input_ts: rec.command.client_input_ts,
                            response_us,
                            rtt_us,
                            applied_frame_seq: ack.applied_frame_seq,
                        }),
                        Err(_) => report.timeouts += 1,
                    },
                    Err(ResponseError::AckTimeout(_)) => report.timeouts += 1,
                    Err(ResponseError::Rejected { .. }) => report.rejected += 1,
                    Err(e) => return Err(setup(&e)),
                }
            }
        }
        Ok(())
    })();
    stop.store(true, Ordering::Relaxed);
    let _ = reader.join();
    outcome.map(|()| report)
}

/// Start a server for `p`, run the script against it and stop it.
pub fn run_response_bench(p: &BenchParams, script: &[CommandKind], repetitions: usize) -> Result<ResponseReport, BenchError> {
    p.check()?;
    let setup = |e: &dyn std::fmt::Display| BenchError::SetupFailure(e.to_string());
    let scene = SceneConfig::paired(p.channels, p.canvas.0, p.canvas.1, p.tick_rate).map_err(|e| setup(&e))?;
    let mut sources: Vec<SourceSpec> = (0..p.channels)
        .map(|c| SourceSpec::synthetic(ChannelId(c as u8), p.source_fps, p.source_size.0, p.source_size.1))
        .collect();
    stratify_phases(&mut sources);
    let mut cfg = ServerConfig::new(scene, sources);
    cfg.control_addr = Some("127.0.0.1:0".into());
    let server = Server::start(cfg).map_err(|e| setup(&e))?;
    let result = response_bench(
        server.fuse1_addr().expect("fuse1 enabled"),
        server.control_addr().expect("control enabled"),
        None,
        script,
        repetitions,
    );
    server.stop();
    let mut report = result?;
    report.config = Some(p.config("response"));
    Ok(report)
}
