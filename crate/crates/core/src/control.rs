//! Interaction commands and their acknowledgments.
//!
//! Commands arrive as newline-delimited JSON on a channel separate from the
//! video stream:
//!
//! ```text
//! {"type":"hello","token":"s3cret"}                      -> {"type":"ready"}
//! {"type":"select","channel":2,"client_ts_us":17,"id":"c-1"}
//!     -> {"type":"ack","id":"c-1","applied_frame_seq":1234,"server_ts_us":98765}
//! {"type":"layout","mode":"focus","channel":2,...}  {"type":"layout","mode":"grid",...}
//! {"type":"toggle_visibility","channel":1,...}
//! {"type":"ping","id":"p"}                               -> {"type":"pong","id":"p","server_ts_us":...}
//! errors: {"type":"error","id":"c-1","code":"UnknownChannel","message":"..."}
//! ```
//!
//! Every change takes effect at the next compositor tick; the ack names the
//! first fused frame that reflects it. Response time is measured on the
//! client: input time to arrival of that frame.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel_model::ChannelId;
use crate::clock::StreamClock;
use crate::compositor::{CanvasLayout, Compositor, LayoutMode};
use crate::transport::fuse1::{bind, loopback_of};
use crate::transport::TransportError;

pub const DEFAULT_ACK_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    Select(ChannelId),
    Layout(LayoutMode),
    ToggleVisibility(ChannelId),
}

impl CommandKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Select(_) => "select",
            Self::Layout(_) => "layout",
            Self::ToggleVisibility(_) => "toggle_visibility",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlCommand {
    pub kind: CommandKind,
    /// Client clock, microseconds.
    pub client_input_ts: u64,
    pub command_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlAck {
    pub command_id: String,
    pub applied_frame_seq: u64,
    /// Server stream clock at application.
    pub server_apply_ts: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ControlError {
    #[error("UnknownChannel: {0}")]
    UnknownChannel(u32),
    #[error("MalformedCommand: {0}")]
    MalformedCommand(String),
    #[error("Unauthorized")]
    Unauthorized,
}

impl ControlError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnknownChannel(_) => "UnknownChannel",
            Self::MalformedCommand(_) => "MalformedCommand",
            Self::Unauthorized => "Unauthorized",
        }
    }
}

/// Messages from client to server.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Hello {
        #[serde(default)]
        token: Option<String>,
    },
    Ping {
        #[serde(default)]
        id: Option<String>,
    },
    Select {
        channel: u32,
        client_ts_us: u64,
        id: String,
    },
    Layout {
        mode: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        channel: Option<u32>,
        client_ts_us: u64,
        id: String,
    },
    ToggleVisibility {
        channel: u32,
        client_ts_us: u64,
        id: String,
    },
}

impl ClientMessage {
    pub fn command(cmd: &ControlCommand) -> Self {
        let (id, client_ts_us) = (cmd.command_id.clone(), cmd.client_input_ts);
        match cmd.kind {
            CommandKind::Select(ch) => Self::Select { channel: ch.0 as u32, client_ts_us, id },
            CommandKind::Layout(LayoutMode::Grid) => Self::Layout { mode: "grid".into(), channel: None, client_ts_us, id },
            CommandKind::Layout(LayoutMode::Focus(ch)) => {
                Self::Layout { mode: "focus".into(), channel: Some(ch.0 as u32), client_ts_us, id }
            }
            CommandKind::ToggleVisibility(ch) => Self::ToggleVisibility { channel: ch.0 as u32, client_ts_us, id },
        }
    }
}

/// Messages from server to client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Ready,
    Pong {
        id: Option<String>,
        server_ts_us: u64,
    },
    Ack {
        id: String,
        applied_frame_seq: u64,
        server_ts_us: u64,
    },
    Error {
        id: Option<String>,
        code: String,
        message: String,
    },
}

fn channel(id: u32) -> Result<ChannelId, ControlError> {
    ChannelId::new(id).map_err(|_| ControlError::UnknownChannel(id))
}

fn to_command(msg: ClientMessage) -> Result<Option<ControlCommand>, ControlError> {
    let (kind, client_input_ts, command_id) = match msg {
        ClientMessage::Select { channel: ch, client_ts_us, id } => (CommandKind::Select(channel(ch)?), client_ts_us, id),
        ClientMessage::ToggleVisibility { channel: ch, client_ts_us, id } => {
            (CommandKind::ToggleVisibility(channel(ch)?), client_ts_us, id)
        }
        ClientMessage::Layout { mode, channel: ch, client_ts_us, id } => {
            let mode = match (mode.as_str(), ch) {
                ("grid", _) => LayoutMode::Grid,
                ("focus", Some(ch)) => LayoutMode::Focus(channel(ch)?),
                ("focus", None) => return Err(ControlError::MalformedCommand("focus needs a channel".into())),
                (other, _) => return Err(ControlError::MalformedCommand(format!("unknown layout mode {other:?}"))),
            };
            (CommandKind::Layout(mode), client_ts_us, id)
        }
        ClientMessage::Hello { .. } | ClientMessage::Ping { .. } => return Ok(None),
    };
    Ok(Some(ControlCommand { kind, client_input_ts, command_id }))
}

/// Per-connection state: authorization and ids already used.
#[derive(Debug, Default)]
pub struct ControlSession {
    authorized: bool,
    seen_ids: HashSet<String>,
}

struct ControlView {
    mode: LayoutMode,
    visible: BTreeSet<ChannelId>,
    selected: Option<ChannelId>,
}

/// Applies commands to the compositor in server receive order.
pub struct ControlPlane {
    compositor: Arc<Compositor>,
    clock: StreamClock,
    token: Option<String>,
    view: Mutex<ControlView>,
    acked: AtomicU64,
}

impl ControlPlane {
    pub fn new(compositor: Arc<Compositor>, clock: StreamClock, token: Option<String>) -> Self {
        let visible = compositor.scene().boards().iter().filter(|b| b.enabled).map(|b| b.channel).collect();
        Self {
            compositor,
            clock,
            token,
            view: Mutex::new(ControlView { mode: LayoutMode::Grid, visible, selected: None }),
            acked: AtomicU64::new(0),
        }
    }

    pub fn session(&self) -> ControlSession {
        ControlSession { authorized: self.token.is_none(), seen_ids: HashSet::new() }
    }

    pub fn compositor(&self) -> &Arc<Compositor> {
        &self.compositor
    }

    /// Commands acknowledged since start.
    pub fn acked_count(&self) -> u64 {
        self.acked.load(Ordering::Relaxed)
    }

    pub fn hello(&self, session: &mut ControlSession, token: Option<&str>) -> Result<(), ControlError> {
        match &self.token {
            None => {
                session.authorized = true;
                Ok(())
            }
            Some(expected) if token == Some(expected.as_str()) => {
                session.authorized = true;
                Ok(())
            }
            Some(_) => Err(ControlError::Unauthorized),
        }
    }

    pub fn handle_command(&self, session: &mut ControlSession, cmd: &ControlCommand) -> Result<ControlAck, ControlError> {
        if !session.authorized {
            return Err(ControlError::Unauthorized);
        }
        if session.seen_ids.contains(&cmd.command_id) {
            return Err(ControlError::MalformedCommand(format!("duplicate command id {:?}", cmd.command_id)));
        }
        let scene = self.compositor.scene();
        let known = |ch: ChannelId| if scene.has_board(ch) { Ok(ch) } else { Err(ControlError::UnknownChannel(ch.0 as u32)) };

        let mut view = self.view.lock().unwrap();
        let (mut mode, mut visible, mut selected) = (view.mode, view.visible.clone(), view.selected);
        match cmd.kind {
            CommandKind::Select(ch) => {
                let ch = known(ch)?;
                selected = Some(ch);
                mode = LayoutMode::Focus(ch);
            }
            CommandKind::Layout(LayoutMode::Grid) => mode = LayoutMode::Grid,
            CommandKind::Layout(LayoutMode::Focus(ch)) => mode = LayoutMode::Focus(known(ch)?),
            CommandKind::ToggleVisibility(ch) => {
                let ch = known(ch)?;
                if !visible.remove(&ch) {
                    visible.insert(ch);
                }
            }
        }
        let layout = CanvasLayout::build(scene, self.compositor.overlay_height(), mode, &visible, selected);
        let applied_frame_seq = self
            .compositor
            .apply_layout(layout)
            .map_err(|e| ControlError::MalformedCommand(e.to_string()))?;
        *view = ControlView { mode, visible, selected };
        drop(view);

        session.seen_ids.insert(cmd.command_id.clone());
        self.acked.fetch_add(1, Ordering::Relaxed);
        Ok(ControlAck { command_id: cmd.command_id.clone(), applied_frame_seq, server_apply_ts: self.clock.now_us() })
    }

    /// Process one JSON line and produce the reply.
    pub fn handle_line(&self, session: &mut ControlSession, line: &str) -> ServerMessage {
        let error = |id: Option<String>, e: ControlError| ServerMessage::Error { id, code: e.code().into(), message: e.to_string() };
        let msg: ClientMessage = match serde_json::from_str(line) {
            Ok(m) => m,
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_str()).map(str::to_owned));
                return error(id, ControlError::MalformedCommand(e.to_string()));
            }
        };
        match msg {
            ClientMessage::Hello { token } => match self.hello(session, token.as_deref()) {
                Ok(()) => ServerMessage::Ready,
                Err(e) => error(None, e),
            },
            ClientMessage::Ping { id } => ServerMessage::Pong { id, server_ts_us: self.clock.now_us() },
            other => {
                let id = match &other {
                    ClientMessage::Select { id, .. }
                    | ClientMessage::Layout { id, .. }
                    | ClientMessage::ToggleVisibility { id, .. } => Some(id.clone()),
                    _ => None,
                };
                let result = to_command(other).and_then(|cmd| {
                    let cmd = cmd.expect("hello and ping handled above");
                    self.handle_command(session, &cmd)
                });
                match result {
                    Ok(ack) => ServerMessage::Ack {
                        id: ack.command_id,
                        applied_frame_seq: ack.applied_frame_seq,
                        server_ts_us: ack.server_apply_ts,
                    },
                    Err(e) => error(id, e),
                }
            }
        }
    }
}

struct ConnEntry {
    stream: TcpStream,
    thread: Option<JoinHandle<()>>,
}

/// NDJSON control listener.
pub struct ControlServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    conns: Arc<Mutex<Vec<ConnEntry>>>,
}

pub fn serve_control(addr: impl ToSocketAddrs, plane: Arc<ControlPlane>) -> Result<ControlServer, TransportError> {
    let listener = bind(addr)?;
    let local = listener.local_addr().map_err(|e| TransportError::Bind(e.to_string()))?;
    let stop = Arc::new(AtomicBool::new(false));
    let conns: Arc<Mutex<Vec<ConnEntry>>> = Arc::default();
    let (stop2, conns2) = (stop.clone(), conns.clone());
    let accept = std::thread::Builder::new()
        .name("control-accept".into())
        .spawn(move || {
            for conn in listener.incoming() {
                if stop2.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let _ = stream.set_nodelay(true);
                let Ok(handle) = stream.try_clone() else { continue };
                let plane = plane.clone();
                let thread = std::thread::Builder::new()
                    .name("control-session".into())
                    .spawn(move || serve_connection(stream, &plane))
                    .expect("spawn control session");
                let mut list = conns2.lock().unwrap();
                list.retain(|c| !c.thread.as_ref().is_some_and(|t| t.is_finished()));
                list.push(ConnEntry { stream: handle, thread: Some(thread) });
            }
        })
        .expect("spawn control accept");
    Ok(ControlServer { addr: local, stop, accept: Some(accept), conns })
}

fn serve_connection(stream: TcpStream, plane: &ControlPlane) {
    let Ok(mut writer) = stream.try_clone() else { return };
    let reader = BufReader::new(stream);
    let mut session = plane.session();
    for line in reader.lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let reply = plane.handle_line(&mut session, &line);
        let mut out = serde_json::to_string(&reply).expect("reply serializes");
        out.push('\n');
        if writer.write_all(out.as_bytes()).is_err() {
            break;
        }
    }
    let _ = writer.shutdown(Shutdown::Both);
    debug!("control session closed");
}

impl ControlServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect_timeout(&loopback_of(self.addr), Duration::from_secs(1));
        if let Some(t) = self.accept.take() {
            let _ = t.join();
        }
        for mut c in std::mem::take(&mut *self.conns.lock().unwrap()) {
            let _ = c.stream.shutdown(Shutdown::Both);
            if let Some(t) = c.thread.take() {
                let _ = t.join();
            }
        }
    }
}

impl Drop for ControlServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[derive(Debug, Error)]
pub enum ResponseError {
    #[error("AckTimeout: no ack or reflecting frame within {0:?}")]
    AckTimeout(Duration),
    #[error("command rejected: {code}: {message}")]
    Rejected { code: String, message: String },
    #[error("control connection: {0}")]
    Io(#[from] std::io::Error),
    #[error("unexpected reply: {0}")]
    Protocol(String),
}

/// Arrival times of fused frames at a client, shared with the reader thread.
#[derive(Default)]
pub struct FrameArrivals {
    recent: Mutex<VecDeque<(u64, u64)>>,
    cv: Condvar,
}

impl FrameArrivals {
    const KEEP: usize = 4096;

    pub fn new() -> Arc<Self> {
        Arc::default()
    }

    pub fn record(&self, frame_seq: u64, arrival_us: u64) {
        let mut q = self.recent.lock().unwrap();
        if q.len() == Self::KEEP {
            q.pop_front();
        }
        q.push_back((frame_seq, arrival_us));
        self.cv.notify_all();
    }

    pub fn latest_seq(&self) -> Option<u64> {
        self.recent.lock().unwrap().back().map(|&(s, _)| s)
    }

    /// Arrival of the first recorded frame with `seq >= min_seq`.
    pub fn wait_for(&self, min_seq: u64, timeout: Duration) -> Option<u64> {
        let deadline = std::time::Instant::now() + timeout;
        let mut q = self.recent.lock().unwrap();
        loop {
            if let Some(&(_, t)) = q.iter().find(|(s, _)| *s >= min_seq) {
                return Some(t);
            }
            let left = deadline.checked_duration_since(std::time::Instant::now())?;
            q = self.cv.wait_timeout(q, left).unwrap().0;
        }
    }
}

/// What the client recorded when sending a command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandRecord {
    pub command: ControlCommand,
    /// Client clock when the ack arrived.
    pub ack_arrival_us: u64,
}

/// Client-clock response time: arrival of the first frame at or after the
/// ack's `applied_frame_seq`, minus the command's input time.
pub fn measure_response(
    sent: &CommandRecord,
    ack: &ControlAck,
    arrivals: &FrameArrivals,
    timeout: Duration,
) -> Result<u64, ResponseError> {
    let arrival = arrivals
        .wait_for(ack.applied_frame_seq, timeout)
        .ok_or(ResponseError::AckTimeout(timeout))?;
    Ok(arrival.saturating_sub(sent.command.client_input_ts))
}

/// Client end of the NDJSON control channel.
pub struct ControlClient {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
    clock: StreamClock,
    next_id: u64,
}

impl ControlClient {
    /// Connect, optionally presenting `token`. `clock` must be the clock the
    /// frame arrivals are stamped with.
    pub fn connect(addr: impl ToSocketAddrs, token: Option<&str>, clock: StreamClock) -> Result<Self, ResponseError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(DEFAULT_ACK_TIMEOUT))?;
        let reader = BufReader::new(stream.try_clone()?);
        let mut client = Self { writer: stream, reader, clock, next_id: 0 };
        if token.is_some() {
            client.send(&ClientMessage::Hello { token: token.map(str::to_owned) })?;
            match client.recv()? {
                ServerMessage::Ready => {}
                ServerMessage::Error { code, message, .. } => return Err(ResponseError::Rejected { code, message }),
                other => return Err(ResponseError::Protocol(format!("{other:?}"))),
            }
        }
        Ok(client)
    }

    pub fn send(&mut self, msg: &ClientMessage) -> Result<(), ResponseError> {
        let mut line = serde_json::to_string(msg).expect("message serializes");
        line.push('\n');
        self.writer.write_all(line.as_bytes())?;
        Ok(())
    }

    pub fn recv(&mut self) -> Result<ServerMessage, ResponseError> {
        let mut line = String::new();
        match self.reader.read_line(&mut line) {
            Ok(0) => Err(ResponseError::Protocol("control connection closed".into())),
            Ok(_) => serde_json::from_str(&line).map_err(|e| ResponseError::Protocol(format!("{e}: {line}"))),
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                Err(ResponseError::AckTimeout(DEFAULT_ACK_TIMEOUT))
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Round trip of a ping, in microseconds.
    pub fn ping(&mut self) -> Result<u64, ResponseError> {
        let t0 = self.clock.now_us();
        self.send(&ClientMessage::Ping { id: None })?;
        match self.recv()? {
            ServerMessage::Pong { .. } => Ok(self.clock.now_us() - t0),
            other => Err(ResponseError::Protocol(format!("{other:?}"))),
        }
    }

    /// Stamp, send and await the ack for one command.
    pub fn command(&mut self, kind: CommandKind) -> Result<(CommandRecord, ControlAck), ResponseError> {
        self.next_id += 1;
        let command = ControlCommand {
            kind,
            client_input_ts: self.clock.now_us(),
            command_id: format!("c-{}", self.next_id),
        };
        self.send(&ClientMessage::command(&command))?;
        let reply = self.recv()?;
        let ack_arrival_us = self.clock.now_us();
        match reply {
            ServerMessage::Ack { id, applied_frame_seq, server_ts_us } if id == command.command_id => Ok((
                CommandRecord { command, ack_arrival_us },
                ControlAck { command_id: id, applied_frame_seq, server_apply_ts: server_ts_us },
            )),
            ServerMessage::Error { code, message, .. } => Err(ResponseError::Rejected { code, message }),
            other => Err(ResponseError::Protocol(format!("{other:?}"))),
        }
    }
}
