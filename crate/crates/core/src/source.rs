//! Frame producers standing in for capture devices.
//!
//! Synthetic frames carry a machine-readable signature in their top-left
//! 64x16 corner: the first 64x8 strip holds the sequence number as 32 bit
//! blocks of 2x8 pixels (white = 1, most significant first), the strip below
//! holds the channel id the same way. The compositor tests and the verifying
//! client read it back with [`decode_signature`].

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use thiserror::Error;

use crate::channel_model::ChannelId;
use crate::clock::{thread_cpu_ns, StopSignal, StreamClock};

/// Width and height of the signature block, unscaled.
pub const SIGNATURE_WIDTH: u32 = 64;
pub const SIGNATURE_HEIGHT: u32 = 16;
const BITS: u32 = 32;
const CELL_W: u32 = 2;
const CELL_H: u32 = 8;

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("DimensionsTooSmall: {0}x{1}, synthetic frames need at least 64x16")]
    DimensionsTooSmall(u32, u32),
    #[error("UndecodableRegion: bit cell {0} is not saturated black or white")]
    UndecodableRegion(usize),
    #[error("FileUnreadable: {0}")]
    FileUnreadable(String),
    #[error("invalid source spec: {0}")]
    InvalidSpec(String),
}

/// One captured RGB8 image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub channel: ChannelId,
    pub seq: u64,
    /// Microseconds since the stream epoch.
    pub capture_ts: u64,
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn view(&self) -> PixelView<'_> {
        PixelView::whole(&self.pixels, self.width, self.height)
    }
}

/// A rectangular window into a packed RGB8 image.
#[derive(Debug, Clone, Copy)]
pub struct PixelView<'a> {
    pub data: &'a [u8],
    /// Image width in pixels (row stride / 3).
    pub stride: u32,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl<'a> PixelView<'a> {
    pub fn whole(data: &'a [u8], width: u32, height: u32) -> Self {
        Self { data, stride: width, x: 0, y: 0, w: width, h: height }
    }

    pub fn sub(&self, x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { data: self.data, stride: self.stride, x: self.x + x, y: self.y + y, w, h }
    }

    fn rgb(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (((self.y + y) * self.stride + self.x + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

fn background(channel: ChannelId) -> [u8; 3] {
    // Golden-angle hue walk, fixed saturation/value so no channel renders
    // as pure black or white.
    let hue = (channel.0 as f32 * 137.508) % 360.0;
    let (s, v) = (0.55f32, 0.7f32);
    let c = v * s;
    let hp = hue / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [((r + m) * 255.0) as u8, ((g + m) * 255.0) as u8, ((b + m) * 255.0) as u8]
}

fn paint_bits(pixels: &mut [u8], width: u32, top: u32, value: u32) {
    for bit in 0..BITS {
        let on = (value >> (BITS - 1 - bit)) & 1 == 1;
        let level = if on { 255 } else { 0 };
        for y in top..top + CELL_H {
            let row = (y * width) as usize * 3;
            let x0 = (bit * CELL_W) as usize * 3;
            pixels[row + x0..row + x0 + CELL_W as usize * 3].fill(level);
        }
    }
}

/// Deterministic test pattern for `(channel, seq)`; `capture_ts` is left 0.
pub fn synthetic_frame(channel: ChannelId, seq: u64, width: u32, height: u32) -> Result<Frame, SourceError> {
    if width < SIGNATURE_WIDTH || height < SIGNATURE_HEIGHT {
        return Err(SourceError::DimensionsTooSmall(width, height));
    }
    let bg = background(channel);
    let mut pixels = Vec::with_capacity((width * height * 3) as usize);
    for _ in 0..width * height {
        pixels.extend_from_slice(&bg);
    }
    // A moving bar below the signature so the stream visibly changes.
    if height > SIGNATURE_HEIGHT {
        let bar_x = ((seq * 4) % width as u64) as u32;
        let bar_w = 4.min(width - bar_x);
        for y in SIGNATURE_HEIGHT..height {
            let i = ((y * width + bar_x) * 3) as usize;
            pixels[i..i + bar_w as usize * 3].fill(230);
        }
    }
    paint_bits(&mut pixels, width, 0, seq as u32);
    paint_bits(&mut pixels, width, CELL_H, channel.0 as u32);
    Ok(Frame { channel, seq, capture_ts: 0, width, height, pixels })
}

/// Read `(channel, seq)` back from a signature block at any scale.
///
/// The view covers the (possibly rescaled) 64x16 block. Each bit cell is
/// judged by majority vote over its central half, so nearest-neighbor and
/// box-filtered rescales decode as long as a cell spans at least one pixel.
pub fn decode_signature(view: PixelView<'_>) -> Result<(ChannelId, u32), SourceError> {
    let mut values = [0u32; 2];
    for (strip, value) in values.iter_mut().enumerate() {
        let y0 = view.h * strip as u32 / 2;
        let y1 = view.h * (strip as u32 + 1) / 2;
        for bit in 0..BITS {
            let x0 = view.w * bit / BITS;
            let x1 = view.w * (bit + 1) / BITS;
            let cell = strip * BITS as usize + bit as usize;
            if x1 <= x0 || y1 <= y0 {
                return Err(SourceError::UndecodableRegion(cell));
            }
            let (sx0, sx1) = central(x0, x1);
            let (sy0, sy1) = central(y0, y1);
            let (mut white, mut black, mut total) = (0u32, 0u32, 0u32);
            for y in sy0..sy1 {
                for x in sx0..sx1 {
                    let [r, g, b] = view.rgb(x, y);
                    let luma = (r as u32 + g as u32 + b as u32) / 3;
                    if luma >= 192 {
                        white += 1;
                    } else if luma <= 63 {
                        black += 1;
                    }
                    total += 1;
                }
            }
            let bit_value = if white * 2 > total {
                1
            } else if black * 2 > total {
                0
            } else {
                return Err(SourceError::UndecodableRegion(cell));
            };
            *value = (*value << 1) | bit_value;
        }
    }
    let channel = u8::try_from(values[1]).map_err(|_| SourceError::UndecodableRegion(BITS as usize))?;
    Ok((ChannelId(channel), values[0]))
}

fn central(a: u32, b: u32) -> (u32, u32) {
    let len = b - a;
    if len < 4 {
        let mid = a + len / 2;
        (mid, mid + 1)
    } else {
        (a + len / 4, b - len / 4)
    }
}

/// Where a source gets its images.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceKind {
    Synthetic,
    /// Directory of numbered binary PPM (P6) images, played in a loop.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceSpec {
    pub channel: ChannelId,
    pub kind: SourceKind,
    pub frame_rate: f64,
    pub width: u32,
    pub height: u32,
    /// Offset of the first emission after the shared start instant.
    pub phase_us: u64,
}

impl SourceSpec {
    pub fn synthetic(channel: ChannelId, frame_rate: f64, width: u32, height: u32) -> Self {
        Self { channel, kind: SourceKind::Synthetic, frame_rate, width, height, phase_us: 0 }
    }

    pub fn period_us(&self) -> u64 {
        (1e6 / self.frame_rate).round() as u64
    }

    pub fn validate(&self) -> Result<(), SourceError> {
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return Err(SourceError::InvalidSpec(format!("frame rate {} must be positive", self.frame_rate)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(SourceError::InvalidSpec(format!("dimensions {}x{}", self.width, self.height)));
        }
        if self.kind == SourceKind::Synthetic && (self.width < SIGNATURE_WIDTH || self.height < SIGNATURE_HEIGHT) {
            return Err(SourceError::DimensionsTooSmall(self.width, self.height));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("SinkClosed: frame consumer went away")]
pub struct SinkClosed;

/// Consumer of frames. Must accept concurrent submissions from many sources.
pub trait FrameSink: Send + Sync + 'static {
    fn submit(&self, frame: Frame) -> Result<(), SinkClosed>;
}

impl FrameSink for std::sync::mpsc::Sender<Frame> {
    fn submit(&self, frame: Frame) -> Result<(), SinkClosed> {
        self.send(frame).map_err(|_| SinkClosed)
    }
}

impl<T: FrameSink> FrameSink for Arc<T> {
    fn submit(&self, frame: Frame) -> Result<(), SinkClosed> {
        (**self).submit(frame)
    }
}

/// CPU time spent inside source threads, summed across sources.
#[derive(Debug, Default)]
pub struct CpuMeter {
    ns: AtomicU64,
}

impl CpuMeter {
    pub fn add(&self, ns: u64) {
        self.ns.fetch_add(ns, Ordering::Relaxed);
    }

    pub fn total_ns(&self) -> u64 {
        self.ns.load(Ordering::Relaxed)
    }
}

/// Shared timing for a group of sources.
#[derive(Debug, Clone)]
pub struct SourceContext {
    pub clock: StreamClock,
    /// Stream time of slot 0 for every source (before `phase_us`).
    pub start_us: u64,
    pub cpu: Option<Arc<CpuMeter>>,
}

impl SourceContext {
    pub fn new(clock: StreamClock) -> Self {
        let start_us = clock.now_us();
        Self { clock, start_us, cpu: None }
    }
}

pub struct SourceHandle {
    stop: Arc<StopSignal>,
    thread: Option<JoinHandle<()>>,
    emitted: Arc<AtomicU64>,
}

impl SourceHandle {
    pub fn emitted(&self) -> u64 {
        self.emitted.load(Ordering::Relaxed)
    }

    pub fn is_finished(&self) -> bool {
        self.thread.as_ref().map_or(true, |t| t.is_finished())
    }

    /// Stop emitting; no frame reaches the sink after this returns.
    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.stop();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for SourceHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn frame_number(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem.chars().filter(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}

/// Load a directory of numbered PPM images, ordered by the number in each name.
pub fn load_ppm_dir(dir: &Path) -> Result<Vec<(u32, u32, Vec<u8>)>, SourceError> {
    let unreadable = |e: &dyn std::fmt::Display| SourceError::FileUnreadable(format!("{}: {e}", dir.display()));
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| unreadable(&e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort_by_key(|p| (frame_number(p), p.clone()));
    if paths.is_empty() {
        return Err(unreadable(&"no .ppm files"));
    }
    paths
        .iter()
        .map(|p| {
            let img = image::ImageReader::open(p)
                .map_err(|e| SourceError::FileUnreadable(format!("{}: {e}", p.display())))?
                .with_guessed_format()
                .map_err(|e| SourceError::FileUnreadable(format!("{}: {e}", p.display())))?
                .decode()
                .map_err(|e| SourceError::FileUnreadable(format!("{}: {e}", p.display())))?
                .into_rgb8();
            Ok((img.width(), img.height(), img.into_raw()))
        })
        .collect()
}

/// Start producing frames for `spec` into `sink` on a dedicated thread.
///
/// Emission slots sit at `start_us + phase_us + k * period`; slots missed
/// under overload are skipped rather than replayed. `capture_ts` is stamped
/// at generation time. File sources loop over their frame list.
pub fn run_source<S: FrameSink>(spec: SourceSpec, sink: S, ctx: SourceContext) -> Result<SourceHandle, SourceError> {
    spec.validate()?;
    let files = match &spec.kind {
        SourceKind::Synthetic => None,
        SourceKind::File(dir) => Some(load_ppm_dir(dir)?),
    };
    let stop = Arc::new(StopSignal::new());
    let emitted = Arc::new(AtomicU64::new(0));
    let (stop2, emitted2) = (stop.clone(), emitted.clone());
    let thread = std::thread::Builder::new()
        .name(format!("source-{}", spec.channel.0))
        .spawn(move || {
            let period = 1e6 / spec.frame_rate;
            let base = ctx.start_us + spec.phase_us;
            let mut slot: u64 = 0;
            let mut seq: u64 = 0;
            let mut last_ts: Option<u64> = None;
            loop {
                let deadline = base + (slot as f64 * period) as u64;
                if stop2.wait_until(&ctx.clock, deadline) {
                    break;
                }
                let cpu_before = ctx.cpu.as_ref().map(|_| thread_cpu_ns());
                let now = ctx.clock.now_us();
                let capture_ts = match last_ts {
                    Some(prev) => now.max(prev + 1),
                    None => now,
                };
                let mut frame = match &files {
                    None => synthetic_frame(spec.channel, seq, spec.width, spec.height)
                        .expect("validated dimensions"),
                    Some(list) => {
                        let (w, h, px) = &list[(seq % list.len() as u64) as usize];
                        Frame { channel: spec.channel, seq, capture_ts: 0, width: *w, height: *h, pixels: px.clone() }
                    }
                };
                frame.capture_ts = capture_ts;
                if stop2.is_stopped() || sink.submit(frame).is_err() {
                    break;
                }
                if let (Some(meter), Some(before)) = (&ctx.cpu, cpu_before) {
                    meter.add(thread_cpu_ns().saturating_sub(before));
                }
                emitted2.fetch_add(1, Ordering::Relaxed);
                last_ts = Some(capture_ts);
                seq += 1;
                slot += 1;
                // Skip slots that are already in the past.
                let now = ctx.clock.now_us();
                let next = base + (slot as f64 * period) as u64;
                if now > next + period as u64 {
                    slot = ((now - base) as f64 / period).ceil() as u64;
                }
            }
        })
        .expect("spawn source thread");
    Ok(SourceHandle { stop, thread: Some(thread), emitted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::mpsc;
    use std::time::Duration;

    /// Independent reader: samples one pixel per bit block of an unscaled frame.
    fn oracle_bits(frame: &Frame, top: u32) -> u32 {
        (0..32).fold(0u32, |acc, bit| {
            let i = (((top + 3) * frame.width + bit * 2) * 3) as usize;
            (acc << 1) | (frame.pixels[i] == 255) as u32
        })
    }

    #[test]
    fn seq_zero_strip_is_black() {
        let f = synthetic_frame(ChannelId(0), 0, 128, 64).unwrap();
        for y in 0..8 {
            for x in 0..64 {
                let i = ((y * 128 + x) * 3) as usize;
                assert_eq!(&f.pixels[i..i + 3], &[0, 0, 0], "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn seq_strip_holds_bits() {
        let f = synthetic_frame(ChannelId(3), 5, 128, 64).unwrap();
        assert_eq!(oracle_bits(&f, 0), 5);
        assert_eq!(oracle_bits(&f, 8), 3);
        assert_eq!(decode_signature(f.view().sub(0, 0, 64, 16)).unwrap(), (ChannelId(3), 5));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synthetic_frame(ChannelId(9), 77, 160, 90).unwrap();
        let b = synthetic_frame(ChannelId(9), 77, 160, 90).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pixels.len(), 160 * 90 * 3);
    }

    #[test]
    fn too_small_rejected() {
        assert!(matches!(
            synthetic_frame(ChannelId(0), 0, 63, 16),
            Err(SourceError::DimensionsTooSmall(63, 16))
        ));
    }

    #[test]
    fn gray_region_is_undecodable() {
        let gray = vec![128u8; 64 * 16 * 3];
        assert!(matches!(
            decode_signature(PixelView::whole(&gray, 64, 16)),
            Err(SourceError::UndecodableRegion(0))
        ));
    }

    #[test]
    fn box_downscale_decodes() {
        let f = synthetic_frame(ChannelId(200), 0xDEAD_BEEF, 128, 64).unwrap();
        // 2x box filter over the whole frame.
        let (w, h) = (64u32, 32u32);
        let mut small = vec![0u8; (w * h * 3) as usize];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let at = |dx: u32, dy: u32| f.pixels[(((2 * y + dy) * 128 + 2 * x + dx) * 3 + c) as usize] as u32;
                    let avg = (at(0, 0) + at(1, 0) + at(0, 1) + at(1, 1)) / 4;
                    small[((y * w + x) * 3 + c) as usize] = avg as u8;
                }
            }
        }
        let view = PixelView::whole(&small, w, h).sub(0, 0, 32, 8);
        assert_eq!(decode_signature(view).unwrap(), (ChannelId(200), 0xDEAD_BEEF));
    }

    #[test]
    fn nearest_upscale_decodes() {
        let f = synthetic_frame(ChannelId(17), 123_456, 64, 16).unwrap();
        let (w, h) = (64 * 3, 16 * 3);
        let mut big = vec![0u8; (w * h * 3) as usize];
        for y in 0..h {
            for x in 0..w {
                let s = (((y / 3) * 64 + x / 3) * 3) as usize;
                let d = ((y * w + x) * 3) as usize;
                big[d..d + 3].copy_from_slice(&f.pixels[s..s + 3]);
            }
        }
        assert_eq!(decode_signature(PixelView::whole(&big, w, h)).unwrap(), (ChannelId(17), 123_456));
    }

    #[test]
    fn round_trip_thousand_random() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        for _ in 0..1000 {
            let ch = ChannelId(rng.gen());
            let seq: u32 = rng.gen();
            let f = synthetic_frame(ch, seq as u64, 64, 16).unwrap();
            assert_eq!(decode_signature(f.view()).unwrap(), (ch, seq));
        }
    }

    proptest! {
        #[test]
        fn signature_round_trip(ch in any::<u8>(), seq in any::<u32>(), w in 64u32..200, h in 16u32..80) {
            let f = synthetic_frame(ChannelId(ch), seq as u64, w, h).unwrap();
            prop_assert_eq!(decode_signature(f.view().sub(0, 0, 64, 16)).unwrap(), (ChannelId(ch), seq));
        }
    }

    #[test]
    fn synthetic_source_rate() {
        let (tx, rx) = mpsc::channel();
        let ctx = SourceContext::new(StreamClock::new());
        let h = run_source(SourceSpec::synthetic(ChannelId(1), 30.0, 64, 16), tx, ctx).unwrap();
        std::thread::sleep(Duration::from_millis(1000));
        h.stop();
        let frames: Vec<Frame> = rx.try_iter().collect();
        assert!((28..=32).contains(&frames.len()), "got {} frames", frames.len());
        for pair in frames.windows(2) {
            assert!(pair[1].seq == pair[0].seq + 1);
            assert!(pair[1].capture_ts > pair[0].capture_ts);
            let delta = pair[1].capture_ts - pair[0].capture_ts;
            assert!((23_333..=43_333).contains(&delta), "delta {delta}");
        }
    }

    #[test]
    fn no_frames_after_stop() {
        let (tx, rx) = mpsc::channel();
        let ctx = SourceContext::new(StreamClock::new());
        let h = run_source(SourceSpec::synthetic(ChannelId(1), 100.0, 64, 16), tx, ctx).unwrap();
        std::thread::sleep(Duration::from_millis(50));
        h.stop();
        let n = rx.try_iter().count();
        std::thread::sleep(Duration::from_millis(50));
        assert!(n > 0);
        assert_eq!(rx.try_iter().count(), 0);
    }

    #[test]
    fn sink_closed_ends_source() {
        let (tx, rx) = mpsc::channel();
        drop(rx);
        let ctx = SourceContext::new(StreamClock::new());
        let h = run_source(SourceSpec::synthetic(ChannelId(1), 200.0, 64, 16), tx, ctx).unwrap();
        std::thread::sleep(Duration::from_millis(50));
        assert!(h.is_finished());
        assert_eq!(h.emitted(), 0);
    }

    #[test]
    fn file_source_cycles() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3u8 {
            let img = image::RgbImage::from_pixel(8, 4, image::Rgb([i * 50, 0, 0]));
            img.save(dir.path().join(format!("frame{}.ppm", i + 1))).unwrap();
        }
        let files = load_ppm_dir(dir.path()).unwrap();
        assert_eq!(files.len(), 3);

        let (tx, rx) = mpsc::channel();
        let spec = SourceSpec {
            channel: ChannelId(2),
            kind: SourceKind::File(dir.path().to_path_buf()),
            frame_rate: 30.0,
            width: 8,
            height: 4,
            phase_us: 0,
        };
        let h = run_source(spec, tx, SourceContext::new(StreamClock::new())).unwrap();
        std::thread::sleep(Duration::from_millis(1000));
        h.stop();
        let frames: Vec<Frame> = rx.try_iter().collect();
        assert!(frames.len() >= 28);
        for (i, f) in frames.iter().enumerate() {
            assert_eq!(f.seq, i as u64);
            assert_eq!(f.pixels[0], (i % 3) as u8 * 50);
        }
    }

    #[test]
    fn unreadable_dir() {
        let spec = SourceSpec {
            channel: ChannelId(0),
            kind: SourceKind::File(PathBuf::from("/nonexistent/frames")),
            frame_rate: 30.0,
            width: 8,
            height: 8,
            phase_us: 0,
        };
        let (tx, _rx) = mpsc::channel();
        assert!(matches!(
            run_source(spec, tx, SourceContext::new(StreamClock::new())),
            Err(SourceError::FileUnreadable(_))
        ));
    }
}
