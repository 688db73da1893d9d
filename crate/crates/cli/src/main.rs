//! `fusecast`: run the fused streaming server, a measuring client, or benches.
//!
//! Exit codes: 0 success, 2 configuration error, 3 bind error,
//! 4 connect failure, 5 verification failure.

mod args;
mod bench_cmd;

use std::net::{SocketAddr, ToSocketAddrs};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::mpsc;
use std::time::Duration;

use clap::{Parser, Subcommand};

use args::{parse_bandwidth, parse_duration, parse_size, parse_source, parse_transport, Mode, SourceArg};
use fusecast_core::bench::load::LoadSampler;
use fusecast_core::bench::report::{write_report, LatencyReport, Report, ReportFormat};
use fusecast_core::channel_model::{load_scene, ChannelId, SceneConfig};
use fusecast_core::client::{run_client, ClientOptions};
use fusecast_core::server::{stratify_phases, Server, ServerConfig, ServerError};
use fusecast_core::source::{SourceKind, SourceSpec};
use fusecast_core::transport::{FuseConnection, PixelFormat};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_BIND: u8 = 3;
pub const EXIT_CONNECT: u8 = 4;
pub const EXIT_VERIFY: u8 = 5;

#[derive(Parser)]
#[command(name = "fusecast", version, about = "Fused multi-channel live streaming")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the streaming server until interrupted.
    Serve(ServeArgs),
    /// Subscribe to a FUSE/1 stream and report latency and sync.
    Client(ClientArgs),
    /// Run latency or response-time benches.
    Bench(BenchArgs),
}

#[derive(clap::Args)]
struct ServeArgs {
    /// Scene file (JSON); overrides --size and --tick.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Input sources, `synthetic:<n>` or `file:<dir>@<fps>`; repeatable.
    #[arg(long = "sources", value_parser = parse_source)]
    sources: Vec<SourceArg>,
    /// Canvas size.
    #[arg(long, default_value = "1280x720", value_parser = parse_size)]
    size: (u32, u32),
    /// Compositor tick rate in Hz.
    #[arg(long, default_value_t = 30.0)]
    tick: f64,
    /// Frame size of synthetic sources.
    #[arg(long, default_value = "640x360", value_parser = parse_size)]
    source_size: (u32, u32),
    /// Frame rate of synthetic sources in Hz.
    #[arg(long, default_value_t = 30.0)]
    source_fps: f64,
    /// Overlay strip height in pixels (default: a tenth of the canvas height).
    #[arg(long)]
    overlay: Option<u32>,
    /// FUSE/1 listener, `fuse1:<port>`.
    #[arg(long, default_value = "fuse1:7800", value_parser = parse_transport)]
    transport: u16,
    /// FUSE/1 payload encoding.
    #[arg(long, value_enum, default_value = "raw")]
    format: FormatArg,
    /// HTTP bridge port serving /stream, /meta and /control.
    #[arg(long)]
    http: Option<u16>,
    /// NDJSON control port (default: FUSE/1 port + 1).
    #[arg(long)]
    control: Option<u16>,
    /// Address to bind listeners on.
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
    /// Write load metrics here on shutdown (.csv or .json).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Token required on the control channel.
    #[arg(long, env = "FUSECAST_TOKEN", hide_env_values = true)]
    token: Option<String>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum FormatArg {
    Raw,
    Jpeg,
}

#[derive(clap::Args)]
struct ClientArgs {
    /// FUSE/1 server address.
    #[arg(long, default_value = "127.0.0.1:7800")]
    connect: String,
    /// Check every tile's synthetic signature against the frame's provenance.
    #[arg(long)]
    verify: bool,
    /// How long to receive.
    #[arg(long, default_value = "10s", value_parser = parse_duration)]
    duration: Duration,
    /// Frame size of the server's synthetic sources (needed by --verify).
    #[arg(long, default_value = "640x360", value_parser = parse_size)]
    source_size: (u32, u32),
    /// Write the latency report here (.csv or .json).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct BenchArgs {
    /// Bench modes; comma separated.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "fused")]
    pub mode: Vec<Mode>,
    /// Channel counts; comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub channels: Vec<usize>,
    /// Measured duration per run.
    #[arg(long, default_value = "30s", value_parser = parse_duration)]
    pub duration: Duration,
    /// Excluded start-up interval per run.
    #[arg(long, default_value = "1s", value_parser = parse_duration)]
    pub warmup: Duration,
    /// Shaped link bandwidth, e.g. `50mbps`; naive runs default to twice one
    /// canvas stream's raw demand.
    #[arg(long, value_parser = parse_bandwidth)]
    pub bandwidth: Option<f64>,
    /// Shaped link propagation delay.
    #[arg(long, default_value = "5ms", value_parser = parse_duration)]
    pub base_delay: Duration,
    /// Canvas size.
    #[arg(long, default_value = "640x360", value_parser = parse_size)]
    pub canvas: (u32, u32),
    /// Synthetic source frame size.
    #[arg(long, default_value = "320x180", value_parser = parse_size)]
    pub source_size: (u32, u32),
    /// Source frame rate in Hz.
    #[arg(long, default_value_t = 30.0)]
    pub source_fps: f64,
    /// Compositor tick rate in Hz.
    #[arg(long, default_value_t = 30.0)]
    pub tick: f64,
    /// Response mode: number of commands.
    #[arg(long, default_value_t = 500)]
    pub count: usize,
    /// Response mode: command script such as `select:0,layout:grid,toggle:1`
    /// (default: selects cycling over the channels).
    #[arg(long)]
    pub script: Option<String>,
    /// Report path (.csv or .json); several runs get `-<mode>-n<N>` suffixes.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Serve(a) => serve(a),
        Command::Client(a) => client(a),
        Command::Bench(a) => bench_cmd::bench(a),
    };
    ExitCode::from(code)
}

fn config_error(msg: impl std::fmt::Display) -> u8 {
    eprintln!("error: {msg}");
    EXIT_CONFIG
}

fn build_sources(a: &ServeArgs, scene: Option<&SceneConfig>) -> Vec<SourceSpec> {
    let synthetic = |c: usize| SourceSpec::synthetic(ChannelId(c as u8), a.source_fps, a.source_size.0, a.source_size.1);
    if a.sources.is_empty() {
        return scene
            .map(|s| s.boards().iter().filter(|b| b.enabled).map(|b| synthetic(b.channel.0 as usize)).collect())
            .unwrap_or_default();
    }
    let mut out = Vec::new();
    for s in &a.sources {
        match s {
            SourceArg::Synthetic(n) => {
                for _ in 0..*n {
                    out.push(synthetic(out.len()));
                }
            }
            SourceArg::File { dir, fps } => {
                let mut spec = synthetic(out.len());
                spec.kind = SourceKind::File(dir.clone());
                spec.frame_rate = *fps;
                out.push(spec);
            }
        }
    }
    out
}

fn serve(a: ServeArgs) -> u8 {
    let file_scene = match &a.scene {
        Some(p) => match load_scene(p) {
            Ok(s) => Some(s),
            Err(e) => return config_error(e),
        },
        None => None,
    };
    let requested: usize = a
        .sources
        .iter()
        .map(|s| match s {
            SourceArg::Synthetic(n) => *n,
            SourceArg::File { .. } => 1,
        })
        .sum();
    let scene = match file_scene.clone() {
        Some(s) => s,
        // Check capacity before building per-channel specs.
        None => match SceneConfig::paired(requested, a.size.0, a.size.1, a.tick) {
            Ok(s) => s,
            Err(e) => return config_error(e),
        },
    };
    let mut sources = build_sources(&a, file_scene.as_ref());
    stratify_phases(&mut sources);

    let addr = |port: u16| format!("{}:{port}", a.bind);
    let control_port = a.control.unwrap_or(if a.transport == 0 { 0 } else { a.transport.wrapping_add(1) });
    let mut cfg = ServerConfig::new(scene, sources);
    cfg.overlay_height = a.overlay;
    cfg.fuse1_addr = Some(addr(a.transport));
    cfg.control_addr = Some(addr(control_port));
    cfg.http_addr = a.http.map(addr);
    cfg.token = a.token.clone();
    cfg.stream_format = match a.format {
        FormatArg::Raw => PixelFormat::Raw,
        FormatArg::Jpeg => PixelFormat::Jpeg,
    };

    let server = match Server::start(cfg) {
        Ok(s) => s,
        Err(ServerError::Bind(e)) => {
            eprintln!("error: {e}");
            return EXIT_BIND;
        }
        Err(e) => return config_error(e),
    };
    if let Some(a) = server.fuse1_addr() {
        println!("fuse1 listening on {a}");
    }
    if let Some(a) = server.control_addr() {
        println!("control listening on {a}");
    }
    if let Some(a) = server.http_addr() {
        println!("http listening on {a}");
    }

    let (tx, rx) = mpsc::channel();
    if let Err(e) = ctrlc::set_handler(move || {
        let _ = tx.send(());
    }) {
        eprintln!("error: cannot install signal handler: {e}");
        return EXIT_CONFIG;
    }
    let mut sampler = LoadSampler::new(&server);
    let mut load = Vec::new();
    while let Err(mpsc::RecvTimeoutError::Timeout) = rx.recv_timeout(Duration::from_secs(1)) {
        if a.metrics.is_some() {
            load.push(sampler.sample(&server));
        }
    }
    server.stop();
    println!("stopped");
    if let Some(path) = &a.metrics {
        let report = Report::Latency(LatencyReport { load, ..Default::default() });
        if let Err(e) = write_report(&report, path, ReportFormat::from_path(path)) {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    }
    0
}

fn resolve(addr: &str) -> Option<SocketAddr> {
    addr.to_socket_addrs().ok()?.next()
}

fn client(a: ClientArgs) -> u8 {
    let Some(addr) = resolve(&a.connect) else {
        eprintln!("error: cannot resolve {}", a.connect);
        return EXIT_CONNECT;
    };
    let mut conn = match FuseConnection::connect(addr, Duration::from_secs(5)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONNECT;
        }
    };
    let opts = ClientOptions {
        duration: a.duration,
        verify_source_size: a.verify.then_some(a.source_size),
        warmup: Duration::from_millis(200),
        ..Default::default()
    };
    let run = match run_client(&mut conn, opts) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONNECT;
        }
    };
    println!("frames received: {}", run.frames);
    println!("frames skipped: {}", run.seq_gaps);
    println!("mean latency: {:.2} ms", run.mean_latency_us() / 1e3);
    println!("max sync spread: {:.2} ms", run.max_spread_us() as f64 / 1e3);
    if let Some(path) = &a.report {
        let report = Report::Latency(LatencyReport {
            frames_received: run.frames,
            latency: run.latency.clone(),
            sync: run.sync.clone(),
            ..Default::default()
        });
        if let Err(e) = write_report(&report, path, ReportFormat::from_path(path)) {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    }
    if a.verify {
        let v = &run.verify;
        println!("tiles verified: {} in {} frames, {} mismatched, {} undecodable", v.tiles_checked, v.frames_checked, v.mismatches, v.undecodable);
        if !v.passed() {
            eprintln!("verification failed: {}", v.first_failure.as_deref().unwrap_or("no tiles checked"));
            return EXIT_VERIFY;
        }
    }
    0
}
