//! One-producer, many-consumer fan-out of fused frames.
//!
//! Each subscription owns a queue of depth 2. Publishing never blocks: a
//! full queue drops its oldest frame, so a slow subscriber only loses frames
//! of its own.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, OnceLock, Weak};
use std::time::Duration;

use crate::compositor::FusedFrame;

use super::wire::{encode_jpeg, frame_message, PixelFormat, WireError};

pub const QUEUE_DEPTH: usize = 2;

/// A published frame plus lazily computed encodings shared by all sessions.
#[derive(Debug)]
pub struct FeedFrame {
    pub frame: FusedFrame,
    raw_wire: OnceLock<Arc<Vec<u8>>>,
    jpeg: OnceLock<Result<Arc<Vec<u8>>, String>>,
    jpeg_wire: OnceLock<Result<Arc<Vec<u8>>, String>>,
}

impl FeedFrame {
    pub fn new(frame: FusedFrame) -> Self {
        Self { frame, raw_wire: OnceLock::new(), jpeg: OnceLock::new(), jpeg_wire: OnceLock::new() }
    }

    /// JPEG image of the canvas, encoded once per frame.
    pub fn jpeg(&self, quality: u8) -> Result<Arc<Vec<u8>>, WireError> {
        self.jpeg
            .get_or_init(|| encode_jpeg(&self.frame, quality).map(Arc::new).map_err(|e| e.to_string()))
            .clone()
            .map_err(WireError::EncodeFailure)
    }

    /// FUSE/1 frame message in `format`, encoded once per frame.
    pub fn wire(&self, format: PixelFormat, jpeg_quality: u8) -> Result<Arc<Vec<u8>>, WireError> {
        match format {
            PixelFormat::Raw => Ok(self
                .raw_wire
                .get_or_init(|| {
                    Arc::new(frame_message(&self.frame, PixelFormat::Raw, &self.frame.pixels).expect("valid fused frame"))
                })
                .clone()),
            PixelFormat::Jpeg => self
                .jpeg_wire
                .get_or_init(|| {
                    let jpeg = self.jpeg(jpeg_quality).map_err(|e| e.to_string())?;
                    frame_message(&self.frame, PixelFormat::Jpeg, &jpeg).map(Arc::new).map_err(|e| e.to_string())
                })
                .clone()
                .map_err(WireError::EncodeFailure),
        }
    }
}

impl std::ops::Deref for FeedFrame {
    type Target = FusedFrame;

    fn deref(&self) -> &FusedFrame {
        &self.frame
    }
}

struct QueueState {
    frames: VecDeque<Arc<FeedFrame>>,
    closed: bool,
}

struct SubQueue {
    id: u64,
    state: Mutex<QueueState>,
    cv: Condvar,
    delivered: AtomicU64,
    dropped: AtomicU64,
}

impl SubQueue {
    fn push(&self, frame: Arc<FeedFrame>) {
        let mut st = self.state.lock().unwrap();
        if st.closed {
            return;
        }
        if st.frames.len() >= QUEUE_DEPTH {
            st.frames.pop_front();
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
        st.frames.push_back(frame);
        self.cv.notify_one();
    }

    fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.cv.notify_all();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubscriptionStats {
    pub id: u64,
    pub delivered: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Closed;

/// A subscriber's view of the feed, starting at the next published frame.
pub struct Subscription {
    queue: Arc<SubQueue>,
}

impl Subscription {
    pub fn id(&self) -> u64 {
        self.queue.id
    }

    /// Oldest queued frame, waiting up to `timeout`. `Ok(None)` on timeout.
    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<Arc<FeedFrame>>, Closed> {
        let mut st = self.queue.state.lock().unwrap();
        if st.frames.is_empty() && !st.closed {
            st = self.queue.cv.wait_timeout(st, timeout).unwrap().0;
        }
        match st.frames.pop_front() {
            Some(f) => {
                self.queue.delivered.fetch_add(1, Ordering::Relaxed);
                Ok(Some(f))
            }
            None if st.closed => Err(Closed),
            None => Ok(None),
        }
    }

    pub fn stats(&self) -> SubscriptionStats {
        SubscriptionStats {
            id: self.queue.id,
            delivered: self.queue.delivered.load(Ordering::Relaxed),
            dropped: self.queue.dropped.load(Ordering::Relaxed),
        }
    }

    pub fn close(&self) {
        self.queue.close();
    }

    pub(crate) fn handle(&self) -> SubscriptionHandle {
        SubscriptionHandle(self.queue.clone())
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        self.queue.close();
    }
}

/// Observes or closes a subscription from another thread.
#[derive(Clone)]
pub(crate) struct SubscriptionHandle(Arc<SubQueue>);

impl SubscriptionHandle {
    pub(crate) fn close(&self) {
        self.0.close();
    }

    pub(crate) fn stats(&self) -> SubscriptionStats {
        SubscriptionStats {
            id: self.0.id,
            delivered: self.0.delivered.load(Ordering::Relaxed),
            dropped: self.0.dropped.load(Ordering::Relaxed),
        }
    }
}

struct FeedState {
    subs: Vec<Weak<SubQueue>>,
    latest: Option<Arc<FeedFrame>>,
    closed: bool,
    next_id: u64,
}

/// Fan-out point between the fusion loop and every transport session.
pub struct FrameFeed {
    state: Mutex<FeedState>,
    published: AtomicU64,
}

impl FrameFeed {
    pub fn new() -> Arc<Self> {
        Arc::new(Self {
            state: Mutex::new(FeedState { subs: Vec::new(), latest: None, closed: false, next_id: 0 }),
            published: AtomicU64::new(0),
        })
    }

    pub fn publish(&self, frame: FusedFrame) -> Arc<FeedFrame> {
        let frame = Arc::new(FeedFrame::new(frame));
        let subs: Vec<Arc<SubQueue>> = {
            let mut st = self.state.lock().unwrap();
            st.latest = Some(frame.clone());
            st.subs.retain(|w| w.strong_count() > 0);
            st.subs.iter().filter_map(Weak::upgrade).collect()
        };
        for q in subs {
            q.push(frame.clone());
        }
        self.published.fetch_add(1, Ordering::Relaxed);
        frame
    }

    pub fn subscribe(&self) -> Subscription {
        let mut st = self.state.lock().unwrap();
        let queue = Arc::new(SubQueue {
            id: st.next_id,
            state: Mutex::new(QueueState { frames: VecDeque::with_capacity(QUEUE_DEPTH), closed: st.closed }),
            cv: Condvar::new(),
            delivered: AtomicU64::new(0),
            dropped: AtomicU64::new(0),
        });
        st.next_id += 1;
        st.subs.push(Arc::downgrade(&queue));
        Subscription { queue }
    }

    pub fn latest(&self) -> Option<Arc<FeedFrame>> {
        self.state.lock().unwrap().latest.clone()
    }

    pub fn published(&self) -> u64 {
        self.published.load(Ordering::Relaxed)
    }

    pub fn subscriber_count(&self) -> usize {
        self.state.lock().unwrap().subs.iter().filter(|w| w.strong_count() > 0).count()
    }

    /// Close every subscription; later subscriptions start closed.
    pub fn close(&self) {
        let subs: Vec<Arc<SubQueue>> = {
            let mut st = self.state.lock().unwrap();
            st.closed = true;
            st.subs.iter().filter_map(Weak::upgrade).collect()
        };
        for q in subs {
            q.close();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fused(seq: u64) -> FusedFrame {
        FusedFrame { frame_seq: seq, composite_ts: seq, width: 1, height: 1, pixels: vec![0; 3], channels: vec![] }
    }

    #[test]
    fn slow_subscriber_drops_oldest() {
        let feed = FrameFeed::new();
        let sub = feed.subscribe();
        for seq in 0..5 {
            feed.publish(fused(seq));
        }
        let a = sub.recv_timeout(Duration::ZERO).unwrap().unwrap();
        let b = sub.recv_timeout(Duration::ZERO).unwrap().unwrap();
        assert_eq!((a.frame_seq, b.frame_seq), (3, 4));
        assert!(sub.recv_timeout(Duration::from_millis(1)).unwrap().is_none());
        assert_eq!(sub.stats().dropped, 3);
        assert_eq!(sub.stats().delivered, 2);
    }

    #[test]
    fn subscription_starts_at_next_frame() {
        let feed = FrameFeed::new();
        feed.publish(fused(0));
        let sub = feed.subscribe();
        feed.publish(fused(1));
        assert_eq!(sub.recv_timeout(Duration::ZERO).unwrap().unwrap().frame_seq, 1);
        assert_eq!(feed.latest().unwrap().frame_seq, 1);
    }

    #[test]
    fn close_wakes_waiters() {
        let feed = FrameFeed::new();
        let sub = feed.subscribe();
        let f2 = feed.clone();
        let t = std::thread::spawn(move || {
            std::thread::sleep(Duration::from_millis(20));
            f2.close();
        });
        assert_eq!(sub.recv_timeout(Duration::from_secs(5)).unwrap_err(), Closed);
        t.join().unwrap();
        assert!(feed.subscribe().recv_timeout(Duration::ZERO).is_err());
    }

    #[test]
    fn dropped_subscriptions_are_pruned() {
        let feed = FrameFeed::new();
        let a = feed.subscribe();
        let _b = feed.subscribe();
        drop(a);
        feed.publish(fused(0));
        assert_eq!(feed.subscriber_count(), 1);
    }

    #[test]
    fn encodings_are_cached() {
        let f = FeedFrame::new(fused(7));
        let a = f.wire(PixelFormat::Raw, 80).unwrap();
        let b = f.wire(PixelFormat::Raw, 80).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        let j = f.jpeg(80).unwrap();
        assert_eq!(&j[..2], &[0xFF, 0xD8]);
    }
}
