//! In-process shaped link: a token bucket on the write path plus a fixed
//! propagation delay.

use std::io::{self, Write};
use std::net::TcpStream;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::StreamClock;

/// Writes are metered in chunks of this size so concurrent streams interleave.
const CHUNK: usize = 32 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    pub bandwidth_bytes_per_s: f64,
    pub burst_bytes: u64,
    pub base_delay_us: u64,
}

impl LinkParams {
    /// Bucket depth of two frames of `frame_bytes`.
    pub fn with_frame_burst(bandwidth_bytes_per_s: f64, frame_bytes: usize, base_delay_us: u64) -> Self {
        Self { bandwidth_bytes_per_s, burst_bytes: 2 * frame_bytes as u64, base_delay_us }
    }
}

struct Bucket {
    tokens: f64,
    last_us: u64,
}

/// Token bucket shared by every stream crossing the same link.
pub struct ShapedLink {
    params: LinkParams,
    clock: StreamClock,
    bucket: Mutex<Bucket>,
}

impl ShapedLink {
    pub fn new(params: LinkParams) -> Result<Arc<Self>, String> {
        if !(params.bandwidth_bytes_per_s.is_finite() && params.bandwidth_bytes_per_s > 0.0) {
            return Err(format!("link bandwidth must be positive, got {}", params.bandwidth_bytes_per_s));
        }
        let clock = StreamClock::new();
        Ok(Arc::new(Self {
            params,
            bucket: Mutex::new(Bucket { tokens: params.burst_bytes as f64, last_us: clock.now_us() }),
            clock,
        }))
    }

    pub fn params(&self) -> LinkParams {
        self.params
    }

    /// Reserve `bytes` of link capacity, sleeping until they are paid for.
    ///
    /// Reservations are served in lock order; a caller that overdraws the
    /// bucket waits for the deficit to refill.
    pub fn acquire(&self, bytes: usize) {
        let wait_s = {
            let mut b = self.bucket.lock().unwrap();
            let now = self.clock.now_us();
            let refill = (now - b.last_us) as f64 * 1e-6 * self.params.bandwidth_bytes_per_s;
            b.tokens = (b.tokens + refill).min(self.params.burst_bytes as f64);
            b.last_us = now;
            b.tokens -= bytes as f64;
            if b.tokens < 0.0 {
                -b.tokens / self.params.bandwidth_bytes_per_s
            } else {
                0.0
            }
        };
        if wait_s > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(wait_s));
        }
    }
}

enum Inner {
    Direct(TcpStream),
    Shaped {
        link: Arc<ShapedLink>,
        stream: TcpStream,
    },
    Delayed {
        link: Arc<ShapedLink>,
        tx: Option<mpsc::Sender<(u64, Vec<u8>)>>,
        failed: Arc<AtomicBool>,
        thread: Option<JoinHandle<()>>,
    },
}

/// A stream writer that optionally crosses a shaped link.
pub struct LinkedWriter {
    inner: Inner,
}

impl LinkedWriter {
    pub fn new(stream: TcpStream, link: Option<Arc<ShapedLink>>) -> Self {
        let inner = match link {
            None => Inner::Direct(stream),
            Some(link) if link.params.base_delay_us == 0 => Inner::Shaped { link, stream },
            Some(link) => {
                let (tx, rx) = mpsc::channel::<(u64, Vec<u8>)>();
                let failed = Arc::new(AtomicBool::new(false));
                let failed2 = failed.clone();
                let clock = link.clock;
                let mut stream = stream;
                let thread = std::thread::Builder::new()
                    .name("link-delay".into())
                    .spawn(move || {
                        for (due, chunk) in rx {
                            let now = clock.now_us();
                            if due > now {
                                std::thread::sleep(Duration::from_micros(due - now));
                            }
                            if stream.write_all(&chunk).is_err() {
                                failed2.store(true, Ordering::Relaxed);
                                break;
                            }
                        }
                    })
                    .expect("spawn link delay thread");
                Inner::Delayed { link, tx: Some(tx), failed, thread: Some(thread) }
            }
        };
        Self { inner }
    }

    pub fn send(&mut self, bytes: &[u8]) -> io::Result<()> {
        match &mut self.inner {
            Inner::Direct(stream) => stream.write_all(bytes),
            Inner::Shaped { link, stream } => {
                for chunk in bytes.chunks(CHUNK) {
                    link.acquire(chunk.len());
                    stream.write_all(chunk)?;
                }
                Ok(())
            }
            Inner::Delayed { link, tx, failed, .. } => {
                for chunk in bytes.chunks(CHUNK) {
                    if failed.load(Ordering::Relaxed) {
                        return Err(io::ErrorKind::BrokenPipe.into());
                    }
                    link.acquire(chunk.len());
                    let due = link.clock.now_us() + link.params.base_delay_us;
                    tx.as_ref()
                        .expect("sender lives until drop")
                        .send((due, chunk.to_vec()))
                        .map_err(|_| io::Error::from(io::ErrorKind::BrokenPipe))?;
                }
                Ok(())
            }
        }
    }
}

impl Drop for LinkedWriter {
    fn drop(&mut self) {
        if let Inner::Delayed { tx, thread, .. } = &mut self.inner {
            tx.take();
            if let Some(t) = thread.take() {
                let _ = t.join();
            }
        }
    }
}
