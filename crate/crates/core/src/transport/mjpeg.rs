//! HTTP bridge for browser consoles.
//!
//! - `GET /stream`: `multipart/x-mixed-replace` MJPEG of the fused canvas.
//! - `GET /meta`: provenance of the latest fused frame as JSON.
//! - `POST /control`: newline-delimited control messages in the body, one
//!   reply line per message. A token may be given in `X-Fusecast-Token` or
//!   in a leading `hello` line.

use std::io::{BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use log::debug;
use serde::Serialize;

use crate::control::{ControlPlane, ServerMessage};

use super::feed::FrameFeed;
use super::fuse1::{bind, loopback_of};
use super::TransportError;

pub const BOUNDARY: &str = "fusecast";
const MAX_HEAD: usize = 16 * 1024;
const MAX_BODY: usize = 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct MetaChannel {
    pub channel: u8,
    pub source_seq: u64,
    pub capture_ts_us: u64,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct Meta {
    pub frame_seq: u64,
    pub composite_ts_us: u64,
    pub width: u32,
    pub height: u32,
    pub channels: Vec<MetaChannel>,
}

impl Meta {
    pub fn of(f: &crate::compositor::FusedFrame) -> Self {
        Self {
            frame_seq: f.frame_seq,
            composite_ts_us: f.composite_ts,
            width: f.width,
            height: f.height,
            channels: f
                .channels
                .iter()
                .map(|c| MetaChannel {
                    channel: c.channel.0,
                    source_seq: c.source_seq,
                    capture_ts_us: c.capture_ts,
                    x: c.rect.x,
                    y: c.rect.y,
                    w: c.rect.w,
                    h: c.rect.h,
                    stale: c.stale,
                })
                .collect(),
        }
    }
}

struct Shared {
    feed: Arc<FrameFeed>,
    control: Option<Arc<ControlPlane>>,
    quality: u8,
    stop: AtomicBool,
}

struct Conn {
    stream: TcpStream,
    thread: Option<JoinHandle<()>>,
}

pub struct HttpServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
    conns: Arc<Mutex<Vec<Conn>>>,
}

pub fn serve_http(
    addr: impl ToSocketAddrs,
    feed: Arc<FrameFeed>,
    control: Option<Arc<ControlPlane>>,
    quality: u8,
) -> Result<HttpServer, TransportError> {
    let listener = bind(addr)?;
    let local = listener.local_addr().map_err(|e| TransportError::Bind(e.to_string()))?;
    let shared = Arc::new(Shared { feed, control, quality, stop: AtomicBool::new(false) });
    let conns: Arc<Mutex<Vec<Conn>>> = Arc::default();
    let (shared2, conns2) = (shared.clone(), conns.clone());
    let accept = std::thread::Builder::new()
        .name("http-accept".into())
        .spawn(move || {
            for conn in listener.incoming() {
                if shared2.stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let _ = stream.set_nodelay(true);
                let Ok(handle) = stream.try_clone() else { continue };
                let shared = shared2.clone();
                let thread = std::thread::Builder::new()
                    .name("http-conn".into())
                    .spawn(move || {
                        let closer = stream.try_clone();
                        if let Err(e) = handle_connection(stream, &shared) {
                            debug!("http connection ended: {e}");
                        }
                        // The accept loop holds a clone; close explicitly so the peer sees EOF.
                        if let Ok(c) = closer {
                            let _ = c.shutdown(Shutdown::Both);
                        }
                    })
                    .expect("spawn http connection");
                let mut list = conns2.lock().unwrap();
                list.retain(|c| !c.thread.as_ref().is_some_and(|t| t.is_finished()));
                list.push(Conn { stream: handle, thread: Some(thread) });
            }
        })
        .expect("spawn http accept");
    Ok(HttpServer { addr: local, shared, accept: Some(accept), conns })
}

impl HttpServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if self.shared.stop.swap(true, Ordering::SeqCst) {
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

impl Drop for HttpServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

struct Request {
    method: String,
    path: String,
    token: Option<String>,
    body: Vec<u8>,
}

fn read_request(reader: &mut BufReader<TcpStream>) -> std::io::Result<Option<Request>> {
    let mut buf = Vec::with_capacity(1024);
    let mut byte = [0u8; 1];
    while !buf.ends_with(b"\r\n\r\n") {
        if buf.len() > MAX_HEAD {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "request head too large"));
        }
        if reader.read(&mut byte)? == 0 {
            return Ok(None);
        }
        buf.push(byte[0]);
    }
    let mut headers = [httparse::EMPTY_HEADER; 32];
    let mut req = httparse::Request::new(&mut headers);
    req.parse(&buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    let header = |name: &str| {
        req.headers
            .iter()
            .find(|h| h.name.eq_ignore_ascii_case(name))
            .and_then(|h| std::str::from_utf8(h.value).ok())
            .map(|v| v.trim().to_owned())
    };
    let len: usize = header("content-length").and_then(|v| v.parse().ok()).unwrap_or(0);
    if len > MAX_BODY {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "request body too large"));
    }
    let token = header("x-fusecast-token");
    let method = req.method.unwrap_or("").to_owned();
    let path = req.path.unwrap_or("/").split('?').next().unwrap_or("/").to_owned();
    let mut body = vec![0; len];
    reader.read_exact(&mut body)?;
    Ok(Some(Request { method, path, token, body }))
}

fn respond(out: &mut TcpStream, status: &str, content_type: &str, body: &[u8]) -> std::io::Result<()> {
    let head = format!(
        "HTTP/1.1 {status}\r\nContent-Type: {content_type}\r\nContent-Length: {}\r\n\
         Access-Control-Allow-Origin: *\r\nCache-Control: no-store\r\nConnection: close\r\n\r\n",
        body.len()
    );
    out.write_all(head.as_bytes())?;
    out.write_all(body)
}

fn handle_connection(stream: TcpStream, shared: &Shared) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(10)))?;
    let mut out = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let Some(req) = read_request(&mut reader)? else { return Ok(()) };
    match (req.method.as_str(), req.path.as_str()) {
        ("GET", "/stream") => stream_mjpeg(&mut out, shared),
        ("GET", "/meta") => match shared.feed.latest() {
            Some(f) => respond(&mut out, "200 OK", "application/json", &serde_json::to_vec(&Meta::of(&f)).unwrap()),
            None => respond(&mut out, "503 Service Unavailable", "application/json", br#"{"error":"no frame yet"}"#),
        },
        ("POST", "/control") => match &shared.control {
            Some(plane) => {
                let body = control_body(plane, req.token.as_deref(), &req.body);
                respond(&mut out, "200 OK", "application/x-ndjson", body.as_bytes())
            }
            None => respond(&mut out, "404 Not Found", "text/plain", b"control disabled\n"),
        },
        ("OPTIONS", _) => out.write_all(
            b"HTTP/1.1 204 No Content\r\nAccess-Control-Allow-Origin: *\r\n\
              Access-Control-Allow-Methods: GET, POST, OPTIONS\r\n\
              Access-Control-Allow-Headers: Content-Type, X-Fusecast-Token\r\nContent-Length: 0\r\nConnection: close\r\n\r\n",
        ),
        _ => respond(&mut out, "404 Not Found", "text/plain", b"not found\n"),
    }
}

fn control_body(plane: &ControlPlane, token: Option<&str>, body: &[u8]) -> String {
    let mut session = plane.session();
    let mut reply = String::new();
    let mut push = |m: &ServerMessage| {
        reply.push_str(&serde_json::to_string(m).expect("reply serializes"));
        reply.push('\n');
    };
    if let Some(t) = token {
        if let Err(e) = plane.hello(&mut session, Some(t)) {
            push(&ServerMessage::Error { id: None, code: e.code().into(), message: e.to_string() });
        }
    }
    for line in String::from_utf8_lossy(body).lines().filter(|l| !l.trim().is_empty()) {
        push(&plane.handle_line(&mut session, line));
    }
    reply
}

fn stream_mjpeg(out: &mut TcpStream, shared: &Shared) -> std::io::Result<()> {
    out.write_all(
        format!(
            "HTTP/1.1 200 OK\r\nContent-Type: multipart/x-mixed-replace; boundary={BOUNDARY}\r\n\
             Access-Control-Allow-Origin: *\r\nCache-Control: no-store\r\nConnection: close\r\n\r\n"
        )
        .as_bytes(),
    )?;
    let sub = shared.feed.subscribe();
    loop {
        match sub.recv_timeout(Duration::from_millis(200)) {
            Err(_) => return Ok(()),
            Ok(None) if shared.stop.load(Ordering::SeqCst) => return Ok(()),
            Ok(None) => continue,
            Ok(Some(frame)) => {
                let jpeg = match frame.jpeg(shared.quality) {
                    Ok(j) => j,
                    Err(e) => {
                        debug!("mjpeg encode failed: {e}");
                        continue;
                    }
                };
                let head = format!(
                    "--{BOUNDARY}\r\nContent-Type: image/jpeg\r\nContent-Length: {}\r\nX-Frame-Seq: {}\r\n\r\n",
                    jpeg.len(),
                    frame.frame_seq
                );
                out.write_all(head.as_bytes())?;
                out.write_all(&jpeg)?;
                out.write_all(b"\r\n")?;
            }
        }
    }
}
