//! Fused multi-channel live streaming.
//!
//! N input channels are sampled at a fixed tick, composited onto one canvas
//! together with an interaction overlay strip, and delivered to every
//! subscriber as a single stream. The crate also carries the measurement
//! harness used to compare that fused path against a naive per-channel
//! streamer under a shaped link.
//!
//! Module map:
//! - [`channel_model`]: scene configuration and channel accounting.
//! - [`source`]: synthetic and PPM-directory frame producers.
//! - [`compositor`]: canvas layout, last-value registers and the per-tick capture.
//! - [`control`]: interaction commands, acknowledgments and response timing.
//! - [`transport`]: FUSE/1 framed TCP, fan-out queues, MJPEG bridge, shaped links.
//! - [`server`]: wiring of the above into a running streaming side.
//! - [`client`]: the FUSE/1 measuring and verifying subscriber.
//! - [`bench`]: latency, sync, load and response benches plus report output.

pub mod bench;
pub mod channel_model;
pub mod client;
pub mod clock;
pub mod compositor;
pub mod control;
pub mod server;
pub mod source;
pub mod transport;

pub use channel_model::{ChannelCount, ChannelId, SceneConfig};
pub use clock::StreamClock;
pub use compositor::{Compositor, FusedFrame};
pub use source::Frame;
