//! The streaming side: scene, compositor, control plane, fusion loop,
//! transports and sources, started in that order and stopped in reverse.

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel_model::SceneConfig;
use crate::clock::{thread_cpu_ns, StopSignal, StreamClock};
use crate::compositor::{Compositor, CompositorOptions};
use crate::control::{serve_control, ControlPlane, ControlServer};
use crate::source::{run_source, CpuMeter, SourceContext, SourceHandle, SourceSpec};
use crate::transport::{
    serve_http, serve_stream, FrameFeed, HttpServer, PixelFormat, ShapedLink, StreamInfo, StreamOptions, StreamServer,
    TransportError,
};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Bind(String),
}

impl From<TransportError> for ServerError {
    fn from(e: TransportError) -> Self {
        Self::Bind(e.to_string())
    }
}

#[derive(Clone)]
pub struct ServerConfig {
    pub scene: SceneConfig,
    pub sources: Vec<SourceSpec>,
    /// Overlay strip height; `None` uses a tenth of the canvas height.
    pub overlay_height: Option<u32>,
    pub fuse1_addr: Option<String>,
    pub http_addr: Option<String>,
    pub control_addr: Option<String>,
    pub stream_format: PixelFormat,
    pub jpeg_quality: u8,
    /// Shaped link crossed by every FUSE/1 session.
    pub link: Option<Arc<ShapedLink>>,
    pub token: Option<String>,
}

impl ServerConfig {
    pub fn new(scene: SceneConfig, sources: Vec<SourceSpec>) -> Self {
        Self {
            scene,
            sources,
            overlay_height: None,
            fuse1_addr: Some("127.0.0.1:0".into()),
            http_addr: None,
            control_addr: None,
            stream_format: PixelFormat::Raw,
            jpeg_quality: 80,
            link: None,
            token: None,
        }
    }
}

/// Spread source phases evenly over one period: channel `k` of `n` starts
/// `(k + 0.5) / n` of its period after the shared start.
pub fn stratify_phases(sources: &mut [SourceSpec]) {
    let n = sources.len() as f64;
    for (k, s) in sources.iter_mut().enumerate() {
        s.phase_us = ((k as f64 + 0.5) / n * s.period_us() as f64) as u64;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickStat {
    pub frame_seq: u64,
    pub tick_ts: u64,
    /// Thread CPU time spent in the capture, microseconds.
    pub composite_us: f64,
}

const TICK_HISTORY: usize = 1 << 16;

struct FusionLoop {
    stop: Arc<StopSignal>,
    thread: Option<JoinHandle<()>>,
}

impl FusionLoop {
    fn start(
        compositor: Arc<Compositor>,
        feed: Arc<FrameFeed>,
        clock: StreamClock,
        start_us: u64,
        stats: Arc<Mutex<VecDeque<TickStat>>>,
    ) -> Self {
        let stop = Arc::new(StopSignal::new());
        let stop2 = stop.clone();
        let period = compositor.scene().tick_period_us();
        let thread = std::thread::Builder::new()
            .name("fusion-loop".into())
            .spawn(move || {
                let mut slot: u64 = 0;
                loop {
                    if stop2.wait_until(&clock, start_us + slot * period) {
                        break;
                    }
                    let cpu0 = thread_cpu_ns();
                    let frame = compositor.capture(clock.now_us());
                    let composite_us = thread_cpu_ns().saturating_sub(cpu0) as f64 / 1e3;
                    let stat = TickStat { frame_seq: frame.frame_seq, tick_ts: frame.composite_ts, composite_us };
                    feed.publish(frame);
                    {
                        let mut s = stats.lock().unwrap();
                        if s.len() == TICK_HISTORY {
                            s.pop_front();
                        }
                        s.push_back(stat);
                    }
                    slot += 1;
                    let now = clock.now_us();
                    if now > start_us + (slot + 1) * period {
                        slot = (now - start_us).div_ceil(period);
                    }
                }
            })
            .expect("spawn fusion loop");
        Self { stop, thread: Some(thread) }
    }

    fn shutdown(&mut self) {
        self.stop.stop();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// A running streaming side.
pub struct Server {
    clock: StreamClock,
    start_us: u64,
    compositor: Arc<Compositor>,
    feed: Arc<FrameFeed>,
    plane: Arc<ControlPlane>,
    fusion: FusionLoop,
    fuse1: Option<StreamServer>,
    http: Option<HttpServer>,
    control: Option<ControlServer>,
    sources: Vec<SourceHandle>,
    source_cpu: Arc<CpuMeter>,
    ticks: Arc<Mutex<VecDeque<TickStat>>>,
}

impl Server {
    pub fn start(cfg: ServerConfig) -> Result<Self, ServerError> {
        let scene = cfg.scene;
        for s in &cfg.sources {
            s.validate().map_err(|e| ServerError::Config(e.to_string()))?;
            if !scene.has_board(s.channel) {
                return Err(ServerError::Config(format!("source for channel {} has no display board", s.channel.0)));
            }
        }
        let mut opts = CompositorOptions::for_scene(&scene);
        if let Some(h) = cfg.overlay_height {
            opts.overlay_height = h;
        }
        let compositor = Arc::new(Compositor::new(scene.clone(), opts).map_err(|e| ServerError::Config(e.to_string()))?);
        for s in &cfg.sources {
            compositor
                .set_source_period(s.channel, s.period_us())
                .map_err(|e| ServerError::Config(e.to_string()))?;
        }

        let clock = StreamClock::new();
        let plane = Arc::new(ControlPlane::new(compositor.clone(), clock, cfg.token.clone()));
        let feed = FrameFeed::new();
        let ticks: Arc<Mutex<VecDeque<TickStat>>> = Arc::default();
        // Ticks and source slots share one start so their phases are fixed.
        let start_us = clock.now_us() + 20_000;
        let mut fusion = FusionLoop::start(compositor.clone(), feed.clone(), clock, start_us, ticks.clone());

        let bound = (|| -> Result<_, ServerError> {
            let fuse1 = match &cfg.fuse1_addr {
                Some(addr) => {
                    let mut o = StreamOptions::raw(&clock, scene.tick_period_us());
                    o.format = cfg.stream_format;
                    o.jpeg_quality = cfg.jpeg_quality;
                    o.link = cfg.link.clone();
                    o.info = StreamInfo { epoch_mono_us: clock.epoch_mono_us(), tick_period_us: scene.tick_period_us() as u32 };
                    Some(serve_stream(addr.as_str(), feed.clone(), o)?)
                }
                None => None,
            };
            let http = match &cfg.http_addr {
                Some(addr) => Some(serve_http(addr.as_str(), feed.clone(), Some(plane.clone()), cfg.jpeg_quality)?),
                None => None,
            };
            let control = match &cfg.control_addr {
                Some(addr) => Some(serve_control(addr.as_str(), plane.clone())?),
                None => None,
            };
            Ok((fuse1, http, control))
        })();
        let (fuse1, http, control) = match bound {
            Ok(b) => b,
            Err(e) => {
                fusion.shutdown();
                return Err(e);
            }
        };

        let source_cpu = Arc::new(CpuMeter::default());
        let ctx = SourceContext { clock, start_us, cpu: Some(source_cpu.clone()) };
        let mut sources = Vec::with_capacity(cfg.sources.len());
        for spec in cfg.sources {
            match run_source(spec, compositor.clone(), ctx.clone()) {
                Ok(h) => sources.push(h),
                Err(e) => {
                    fusion.shutdown();
                    return Err(ServerError::Config(e.to_string()));
                }
            }
        }
        info!("server started with {} sources", sources.len());
        Ok(Self { clock, start_us, compositor, feed, plane, fusion, fuse1, http, control, sources, source_cpu, ticks })
    }

    pub fn clock(&self) -> StreamClock {
        self.clock
    }

    /// Stream time of the first tick.
    pub fn start_us(&self) -> u64 {
        self.start_us
    }

    pub fn compositor(&self) -> &Arc<Compositor> {
        &self.compositor
    }

    pub fn feed(&self) -> &Arc<FrameFeed> {
        &self.feed
    }

    pub fn control_plane(&self) -> &Arc<ControlPlane> {
        &self.plane
    }

    pub fn fuse1_addr(&self) -> Option<SocketAddr> {
        self.fuse1.as_ref().map(StreamServer::local_addr)
    }

    pub fn http_addr(&self) -> Option<SocketAddr> {
        self.http.as_ref().map(HttpServer::local_addr)
    }

    pub fn control_addr(&self) -> Option<SocketAddr> {
        self.control.as_ref().map(ControlServer::local_addr)
    }

    /// CPU time consumed by source threads so far, nanoseconds.
    pub fn source_cpu_ns(&self) -> u64 {
        self.source_cpu.total_ns()
    }

    pub fn frames_emitted(&self) -> u64 {
        self.sources.iter().map(SourceHandle::emitted).sum()
    }

    /// Recent per-tick statistics, oldest first.
    pub fn tick_stats(&self) -> Vec<TickStat> {
        self.ticks.lock().unwrap().iter().copied().collect()
    }

    /// Stop sources, the fusion loop and every listener.
    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        for s in self.sources.drain(..) {
            s.stop();
        }
        self.fusion.shutdown();
        self.feed.close();
        if let Some(s) = self.fuse1.take() {
            s.stop();
        }
        if let Some(s) = self.http.take() {
            s.stop();
        }
        if let Some(s) = self.control.take() {
            s.stop();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_model::ChannelId;
    use crate::transport::FuseConnection;
    use std::time::Duration;

    fn config(n: usize) -> ServerConfig {
        let scene = SceneConfig::paired(n, 320, 180, 30.0).unwrap();
        let sources = (0..n as u8).map(|c| SourceSpec::synthetic(ChannelId(c), 30.0, 160, 90)).collect();
        ServerConfig::new(scene, sources)
    }

    #[test]
    fn stratified_phases_cover_one_period() {
        let mut cfg = config(4);
        stratify_phases(&mut cfg.sources);
        let p = cfg.sources[0].period_us();
        let phases: Vec<u64> = cfg.sources.iter().map(|s| s.phase_us).collect();
        assert_eq!(phases, vec![p / 8, 3 * p / 8, 5 * p / 8, 7 * p / 8]);
    }

    #[test]
    fn serves_fused_frames_with_every_channel() {
        let server = Server::start(config(3)).unwrap();
        let mut conn = FuseConnection::connect(server.fuse1_addr().unwrap(), Duration::from_secs(2)).unwrap();
        let mut last = None;
        for _ in 0..30 {
            last = conn.next_frame().unwrap();
        }
        let f = last.unwrap();
        assert_eq!(f.header.channels.len(), 3);
        assert!(f.arrival_us >= f.header.composite_ts_us);
        assert!(server.frames_emitted() > 0);
        assert!(!server.tick_stats().is_empty());
        server.stop();
    }

    #[test]
    fn source_without_board_is_config_error() {
        let mut cfg = config(2);
        cfg.sources.push(SourceSpec::synthetic(ChannelId(9), 30.0, 160, 90));
        assert!(matches!(Server::start(cfg), Err(ServerError::Config(_))));
    }

    #[test]
    fn bind_conflict_is_bind_error() {
        let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let mut cfg = config(1);
        cfg.fuse1_addr = Some(taken.local_addr().unwrap().to_string());
        assert!(matches!(Server::start(cfg), Err(ServerError::Bind(_))));
    }
}
