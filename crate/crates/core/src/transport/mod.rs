//! Delivery of fused frames: the FUSE/1 framed TCP protocol, an MJPEG/HTTP
//! bridge for browsers, per-subscriber fan-out and an optional shaped link.

pub mod feed;
pub mod fuse1;
pub mod link;
pub mod mjpeg;
pub mod wire;

use thiserror::Error;

pub use feed::{FeedFrame, FrameFeed, Subscription, SubscriptionStats, QUEUE_DEPTH};
pub use fuse1::{serve_stream, FuseConnection, ReceivedFrame, StreamOptions, StreamServer};
pub use link::{LinkParams, LinkedWriter, ShapedLink};
pub use mjpeg::{serve_http, HttpServer};
pub use wire::{PixelFormat, StreamInfo, WireError, WireFrameHeader, WireMessage};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("bind failed: {0}")]
    Bind(String),
    #[error("connect failed: {0}")]
    Connect(std::io::Error),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Wire(#[from] WireError),
}
