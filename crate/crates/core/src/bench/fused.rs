//! Fused path: n synthetic sources, one compositor, one FUSE/1 stream.

use std::time::{Duration, Instant};

use super::load::LoadSampler;
use super::report::LatencyReport;
use super::{BenchError, BenchParams};
use crate::channel_model::{ChannelId, SceneConfig};
use crate::client::{run_client, ClientOptions};
use crate::server::{stratify_phases, Server, ServerConfig};
use crate::source::SourceSpec;
use crate::transport::{FuseConnection, ShapedLink};

pub fn run_fused_bench(p: &BenchParams) -> Result<LatencyReport, BenchError> {
    p.check()?;
    let setup = |e: &dyn std::fmt::Display| BenchError::SetupFailure(e.to_string());
    let scene = SceneConfig::paired(p.channels, p.canvas.0, p.canvas.1, p.tick_rate).map_err(|e| setup(&e))?;
    let mut sources: Vec<SourceSpec> = (0..p.channels)
        .map(|c| SourceSpec::synthetic(ChannelId(c as u8), p.source_fps, p.source_size.0, p.source_size.1))
        .collect();
    stratify_phases(&mut sources);
    let mut cfg = ServerConfig::new(scene, sources);
    if let Some(link) = p.link {
        cfg.link = Some(ShapedLink::new(link).map_err(|e| setup(&e))?);
    }
    let server = Server::start(cfg).map_err(|e| setup(&e))?;
    let mut conn = FuseConnection::connect(server.fuse1_addr().expect("fuse1 enabled"), Duration::from_secs(5))
        .map_err(|e| setup(&e))?;
    let opts = ClientOptions { duration: p.warmup + p.duration, warmup: p.warmup, ..Default::default() };
    let client = std::thread::Builder::new()
        .name("bench-client".into())
        .spawn(move || run_client(&mut conn, opts))
        .map_err(|e| setup(&e))?;

    std::thread::sleep(p.warmup);
    let end = Instant::now() + p.duration;
    let mut sampler = LoadSampler::new(&server);
    let mut load = Vec::new();
    while Instant::now() + p.load_interval <= end {
        std::thread::sleep(p.load_interval);
        load.push(sampler.sample(&server));
    }
    let run = client.join().expect("client thread").map_err(|e| setup(&e));
    server.stop();
    let run = run?;
    Ok(LatencyReport {
        config: Some(p.config("fused")),
        frames_received: run.frames,
        latency: run.latency,
        sync: run.sync,
        load,
    })
}
