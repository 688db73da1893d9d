//! FUSE/1 over TCP: one connection per subscriber, one fused stream per connection.

use std::io::BufReader;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use log::debug;

use crate::clock::StreamClock;

use super::feed::{FrameFeed, SubscriptionHandle, SubscriptionStats};
use super::link::{LinkedWriter, ShapedLink};
use super::wire::{encode_stream_info, read_message, PixelFormat, StreamInfo, WireFrameHeader, WireMessage};
use super::TransportError;

#[derive(Clone)]
pub struct StreamOptions {
    pub format: PixelFormat,
    pub jpeg_quality: u8,
    pub link: Option<Arc<ShapedLink>>,
    pub info: StreamInfo,
}

impl StreamOptions {
    pub fn raw(clock: &StreamClock, tick_period_us: u64) -> Self {
        Self {
            format: PixelFormat::Raw,
            jpeg_quality: 80,
            link: None,
            info: StreamInfo { epoch_mono_us: clock.epoch_mono_us(), tick_period_us: tick_period_us as u32 },
        }
    }
}

struct Session {
    stream: TcpStream,
    sub: SubscriptionHandle,
    thread: Option<JoinHandle<()>>,
}

/// Running FUSE/1 listener.
pub struct StreamServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    sessions: Arc<Mutex<Vec<Session>>>,
}

pub(crate) fn bind(addr: impl ToSocketAddrs) -> Result<TcpListener, TransportError> {
    let addrs: Vec<SocketAddr> = addr
        .to_socket_addrs()
        .map_err(|e| TransportError::Bind(e.to_string()))?
        .collect();
    TcpListener::bind(&addrs[..]).map_err(|e| TransportError::Bind(format!("{addrs:?}: {e}")))
}

/// Address that reaches `addr` from this host (for waking a blocked accept).
pub(crate) fn loopback_of(addr: SocketAddr) -> SocketAddr {
    let mut a = addr;
    if a.ip().is_unspecified() {
        a.set_ip(if a.is_ipv4() { [127, 0, 0, 1].into() } else { std::net::Ipv6Addr::LOCALHOST.into() });
    }
    a
}

/// Serve `feed` to every connecting subscriber until stopped.
pub fn serve_stream(addr: impl ToSocketAddrs, feed: Arc<FrameFeed>, opts: StreamOptions) -> Result<StreamServer, TransportError> {
    let listener = bind(addr)?;
    let local = listener.local_addr().map_err(|e| TransportError::Bind(e.to_string()))?;
    let stop = Arc::new(AtomicBool::new(false));
    let sessions: Arc<Mutex<Vec<Session>>> = Arc::default();
    let (stop2, sessions2) = (stop.clone(), sessions.clone());
    let accept = std::thread::Builder::new()
        .name("fuse1-accept".into())
        .spawn(move || {
            for conn in listener.incoming() {
                if stop2.load(Ordering::SeqCst) {
                    break;
                }
                let stream = match conn {
                    Ok(s) => s,
                    Err(e) => {
                        debug!("fuse1 accept failed: {e}");
                        continue;
                    }
                };
                let _ = stream.set_nodelay(true);
                let Ok(control) = stream.try_clone() else { continue };
                let sub = feed.subscribe();
                let handle = sub.handle();
                let opts = opts.clone();
                let stop3 = stop2.clone();
                let thread = std::thread::Builder::new()
                    .name(format!("fuse1-session-{}", sub.id()))
                    .spawn(move || {
                        let peer = stream.peer_addr().ok();
                        let closer = stream.try_clone();
                        let mut writer = LinkedWriter::new(stream, opts.link.clone());
                        let mut ok = writer.send(&encode_stream_info(opts.info)).is_ok();
                        while ok {
                            match sub.recv_timeout(Duration::from_millis(200)) {
                                Err(_) => break,
                                Ok(None) if stop3.load(Ordering::SeqCst) => break,
                                Ok(None) => continue,
                                Ok(Some(frame)) => {
                                    let bytes = match frame.wire(opts.format, opts.jpeg_quality) {
                                        Ok(b) => b,
                                        Err(e) => {
                                            debug!("fuse1 encode failed: {e}");
                                            continue;
                                        }
                                    };
                                    if let Err(e) = writer.send(&bytes) {
                                        debug!("fuse1 session {peer:?} closed: {e}");
                                        ok = false;
                                    }
                                }
                            }
                        }
                        drop(writer);
                        if let Ok(c) = closer {
                            let _ = c.shutdown(Shutdown::Both);
                        }
                    })
                    .expect("spawn fuse1 session");
                let mut list = sessions2.lock().unwrap();
                list.retain_mut(|s| {
                    let done = s.thread.as_ref().is_some_and(|t| t.is_finished());
                    if done {
                        let _ = s.stream.shutdown(Shutdown::Both);
                        if let Some(t) = s.thread.take() {
                            let _ = t.join();
                        }
                    }
                    !done
                });
                list.push(Session { stream: control, sub: handle, thread: Some(thread) });
            }
        })
        .expect("spawn fuse1 accept");
    Ok(StreamServer { addr: local, stop, accept: Some(accept), sessions })
}

impl StreamServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn session_stats(&self) -> Vec<SubscriptionStats> {
        self.sessions.lock().unwrap().iter().map(|s| s.sub.stats()).collect()
    }

    /// Close every session and release the port.
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
        let sessions: Vec<Session> = std::mem::take(&mut *self.sessions.lock().unwrap());
        for s in &sessions {
            s.sub.close();
            let _ = s.stream.shutdown(Shutdown::Both);
        }
        for mut s in sessions {
            if let Some(t) = s.thread.take() {
                let _ = t.join();
            }
        }
    }
}

impl Drop for StreamServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// A frame message as it arrived at a subscriber.
#[derive(Debug, Clone)]
pub struct ReceivedFrame {
    pub header: WireFrameHeader,
    pub payload: Vec<u8>,
    /// Completion of the payload read, on the server's stream clock.
    pub arrival_us: u64,
}

/// Subscriber side of a FUSE/1 session.
pub struct FuseConnection {
    reader: BufReader<TcpStream>,
    info: StreamInfo,
    clock: StreamClock,
}

impl FuseConnection {
    /// Connect and read the stream info message. The client clock adopts the
    /// server's epoch, which is only meaningful when both run on one host.
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self, TransportError> {
        let addrs: Vec<SocketAddr> = addr.to_socket_addrs().map_err(TransportError::Connect)?.collect();
        let mut last = None;
        let stream = addrs
            .iter()
            .find_map(|a| match TcpStream::connect_timeout(a, timeout) {
                Ok(s) => Some(s),
                Err(e) => {
                    last = Some(e);
                    None
                }
            })
            .ok_or_else(|| TransportError::Connect(last.unwrap_or_else(|| std::io::ErrorKind::NotFound.into())))?;
        let _ = stream.set_nodelay(true);
        stream.set_read_timeout(Some(timeout)).map_err(TransportError::Connect)?;
        let mut reader = BufReader::with_capacity(256 * 1024, stream);
        let info = match read_message(&mut reader)? {
            Some(WireMessage::StreamInfo(info)) => info,
            Some(WireMessage::Frame { .. }) => return Err(TransportError::Protocol("frame before stream info".into())),
            None => return Err(TransportError::Protocol("stream closed before stream info".into())),
        };
        Ok(Self { reader, info, clock: StreamClock::from_epoch(info.epoch_mono_us) })
    }

    pub fn info(&self) -> StreamInfo {
        self.info
    }

    /// Clock in the server's stream domain.
    pub fn clock(&self) -> StreamClock {
        self.clock
    }

    pub fn set_read_timeout(&self, timeout: Option<Duration>) -> std::io::Result<()> {
        self.reader.get_ref().set_read_timeout(timeout)
    }

    pub fn shutdown(&self) {
        let _ = self.reader.get_ref().shutdown(Shutdown::Both);
    }

    pub fn try_clone_stream(&self) -> std::io::Result<TcpStream> {
        self.reader.get_ref().try_clone()
    }

    /// Next frame message, or `None` when the server closed the stream.
    pub fn next_frame(&mut self) -> Result<Option<ReceivedFrame>, TransportError> {
        loop {
            match read_message(&mut self.reader)? {
                None => return Ok(None),
                Some(WireMessage::StreamInfo(info)) => self.info = info,
                Some(WireMessage::Frame { header, payload }) => {
                    let arrival_us = self.clock.now_us();
                    return Ok(Some(ReceivedFrame { header, payload, arrival_us }));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compositor::FusedFrame;
    use std::time::Instant;

    fn fused(seq: u64) -> FusedFrame {
        FusedFrame { frame_seq: seq, composite_ts: seq, width: 8, height: 8, pixels: vec![seq as u8; 192], channels: vec![] }
    }

    #[test]
    fn subscribers_receive_ordered_suffixes() {
        let clock = StreamClock::new();
        let feed = FrameFeed::new();
        let server = serve_stream("127.0.0.1:0", feed.clone(), StreamOptions::raw(&clock, 33_333)).unwrap();
        let addr = server.local_addr();
        let readers: Vec<_> = (0..3)
            .map(|_| {
                let mut conn = FuseConnection::connect(addr, Duration::from_secs(2)).unwrap();
                std::thread::spawn(move || {
                    let mut seqs = Vec::new();
                    while let Ok(Some(f)) = conn.next_frame() {
                        seqs.push(f.header.frame_seq);
                        if f.header.frame_seq == 99 {
                            break;
                        }
                    }
                    seqs
                })
            })
            .collect();
        while feed.subscriber_count() < 3 {
            std::thread::sleep(Duration::from_millis(5));
        }
        for seq in 0..100 {
            feed.publish(fused(seq));
            std::thread::sleep(Duration::from_millis(2));
        }
        for r in readers {
            let seqs = r.join().unwrap();
            assert!(!seqs.is_empty());
            assert!(seqs.windows(2).all(|w| w[1] > w[0]), "{seqs:?}");
            assert_eq!(*seqs.last().unwrap(), 99);
        }
        server.stop();
    }

    #[test]
    fn stop_releases_port_and_closes_sessions() {
        let clock = StreamClock::new();
        let feed = FrameFeed::new();
        let server = serve_stream("127.0.0.1:0", feed.clone(), StreamOptions::raw(&clock, 33_333)).unwrap();
        let addr = server.local_addr();
        let mut conn = FuseConnection::connect(addr, Duration::from_secs(2)).unwrap();
        let start = Instant::now();
        server.stop();
        assert!(start.elapsed() < Duration::from_secs(2));
        assert!(matches!(conn.next_frame(), Ok(None) | Err(_)));
        TcpListener::bind(addr).expect("port released");
    }

    #[test]
    fn bind_failure_reported() {
        let taken = TcpListener::bind("127.0.0.1:0").unwrap();
        let clock = StreamClock::new();
        let r = serve_stream(taken.local_addr().unwrap(), FrameFeed::new(), StreamOptions::raw(&clock, 1));
        assert!(matches!(r, Err(TransportError::Bind(_))));
    }
}
