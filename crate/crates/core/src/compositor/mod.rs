//! The recording area: video canvas, interaction strip and the per-tick capture.
//!
//! Sources write into per-channel last-value registers, and each ingest
//! paints the frame onto its board of a persistent canvas. Every tick
//! the capture copies that canvas without consuming anything and renders the
//! interaction strip underneath, so its cost follows canvas area rather than
//! board count. The result is one [`FusedFrame`] of constant size with
//! per-channel provenance.

mod layout;
mod render;

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use layout::{grid_layout, grid_shape, CanvasLayout, ControlGroup, DisplayBoard, GroupState, LayoutMode, Rect};

use crate::channel_model::{ChannelId, SceneConfig, MAX_CHANNELS};
use crate::source::{Frame, FrameSink, SinkClosed};
use render::{blit_scaled, copy_tile, draw_overlay, fill, BACKGROUND, PLACEHOLDER};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CompositorError {
    #[error("UnknownChannel: no board for channel {0}")]
    UnknownChannel(u8),
    #[error("InvalidLayout: {0}")]
    InvalidLayout(String),
}

/// Provenance of one board within a fused frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelProvenance {
    pub channel: ChannelId,
    pub source_seq: u64,
    pub capture_ts: u64,
    pub rect: Rect,
    /// Frame is older than twice the source period.
    pub stale: bool,
}

/// One capture of both canvases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusedFrame {
    pub frame_seq: u64,
    pub composite_ts: u64,
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
    pub channels: Vec<ChannelProvenance>,
}

impl FusedFrame {
    /// `max - min` capture timestamp across listed channels.
    pub fn spread_us(&self) -> u64 {
        let ts = self.channels.iter().map(|c| c.capture_ts);
        match (ts.clone().min(), ts.max()) {
            (Some(lo), Some(hi)) => hi - lo,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompositorOptions {
    pub overlay_height: u32,
    /// Age after which a held frame is replaced by a placeholder.
    pub placeholder_after_us: u64,
    /// Held frames older than `stale_factor` source periods are flagged stale.
    pub stale_factor: u64,
}

impl CompositorOptions {
    /// Overlay strip of one tenth of the canvas height.
    pub fn for_scene(scene: &SceneConfig) -> Self {
        Self {
            overlay_height: (scene.canvas_height() / 10).max(1),
            placeholder_after_us: 5_000_000,
            stale_factor: 2,
        }
    }
}

/// The persistent video canvas and the frames painted on it.
///
/// Pixels and held frames change together under one lock, so a capture
/// always sees provenance that matches what is drawn.
struct Recording {
    pixels: Vec<u8>,
    /// Layout the pixels currently reflect.
    layout: CanvasLayout,
    held: Vec<Option<Arc<Frame>>>,
    /// Board currently shows the placeholder instead of its held frame.
    placeholder: Vec<bool>,
}

impl Recording {
    /// Redraw every board for `layout`.
    fn repaint(&mut self, layout: CanvasLayout, canvas_w: u32, canvas_h: u32, tick_ts: u64, max_age: u64) {
        fill(&mut self.pixels, canvas_w, Rect::new(0, 0, canvas_w, canvas_h), BACKGROUND);
        for (i, b) in layout.boards.iter().enumerate() {
            let live = self.held[i].as_ref().filter(|f| tick_ts.saturating_sub(f.capture_ts) <= max_age);
            self.placeholder[i] = live.is_none();
            if !b.visible {
                continue;
            }
            match live {
                Some(f) => blit_scaled(&mut self.pixels, canvas_w, b.rect, &f.pixels, f.width, f.height),
                None => fill(&mut self.pixels, canvas_w, b.rect, PLACEHOLDER),
            }
        }
        self.layout = layout;
    }
}

struct LayoutState {
    current: CanvasLayout,
    pending: Option<CanvasLayout>,
    next_seq: u64,
}

pub struct Compositor {
    scene: SceneConfig,
    opts: CompositorOptions,
    slot: [Option<u16>; MAX_CHANNELS],
    recording: Mutex<Recording>,
    periods_us: Vec<AtomicU64>,
    state: Mutex<LayoutState>,
    groups: Mutex<Vec<ControlGroup>>,
    dropped_unknown: AtomicU64,
}

impl Compositor {
    pub fn new(scene: SceneConfig, opts: CompositorOptions) -> Result<Self, CompositorError> {
        let mut slot = [None; MAX_CHANNELS];
        for (i, b) in scene.boards().iter().enumerate() {
            slot[b.channel.index()] = Some(i as u16);
        }
        let visible: BTreeSet<ChannelId> = scene.boards().iter().filter(|b| b.enabled).map(|b| b.channel).collect();
        let initial = CanvasLayout::build(&scene, opts.overlay_height, LayoutMode::Grid, &visible, None);
        initial.validate(&scene).map_err(CompositorError::InvalidLayout)?;
        let n = scene.boards().len();
        let (w, h) = (scene.canvas_width(), scene.canvas_height());
        let mut recording = Recording {
            pixels: vec![0u8; (w * h * 3) as usize],
            layout: initial.clone(),
            held: vec![None; n],
            placeholder: vec![true; n],
        };
        recording.repaint(initial.clone(), w, h, 0, opts.placeholder_after_us);
        let tick = scene.tick_period_us();
        Ok(Self {
            recording: Mutex::new(recording),
            periods_us: (0..n).map(|_| AtomicU64::new(tick)).collect(),
            groups: Mutex::new(Vec::new()),
            state: Mutex::new(LayoutState { current: initial, pending: None, next_seq: 0 }),
            dropped_unknown: AtomicU64::new(0),
            scene,
            opts,
            slot,
        })
    }

    pub fn scene(&self) -> &SceneConfig {
        &self.scene
    }

    pub fn overlay_height(&self) -> u32 {
        self.opts.overlay_height
    }

    /// Expected source frame period, used for the stale threshold.
    pub fn set_source_period(&self, channel: ChannelId, period_us: u64) -> Result<(), CompositorError> {
        let i = self.slot_of(channel)?;
        self.periods_us[i].store(period_us, Ordering::Relaxed);
        Ok(())
    }

    fn slot_of(&self, channel: ChannelId) -> Result<usize, CompositorError> {
        self.slot[channel.index()]
            .map(|s| s as usize)
            .ok_or(CompositorError::UnknownChannel(channel.0))
    }

    /// Replace the channel's register if `frame` is newer than what it holds.
    pub fn ingest(&self, frame: Frame) -> Result<(), CompositorError> {
        self.ingest_shared(Arc::new(frame))
    }

    /// Hold `frame` and paint it onto its board.
    ///
    /// Scaling happens on the caller's thread, outside the canvas lock; the
    /// lock only covers copying the finished tile.
    pub fn ingest_shared(&self, frame: Arc<Frame>) -> Result<(), CompositorError> {
        let i = match self.slot_of(frame.channel) {
            Ok(i) => i,
            Err(e) => {
                self.dropped_unknown.fetch_add(1, Ordering::Relaxed);
                return Err(e);
            }
        };
        let target = {
            let rec = self.recording.lock().unwrap();
            if rec.held[i].as_ref().is_some_and(|h| frame.seq <= h.seq) {
                return Ok(());
            }
            let b = &rec.layout.boards[i];
            b.visible.then_some(b.rect)
        };
        let tile = target.map(|r| {
            let mut pixels = vec![0u8; (r.w * r.h * 3) as usize];
            blit_scaled(&mut pixels, r.w, Rect::new(0, 0, r.w, r.h), &frame.pixels, frame.width, frame.height);
            (r, pixels)
        });
        let canvas_w = self.scene.canvas_width();
        let mut rec = self.recording.lock().unwrap();
        if rec.held[i].as_ref().is_some_and(|h| frame.seq <= h.seq) {
            return Ok(());
        }
        let b = rec.layout.boards[i];
        if b.visible {
            match tile {
                Some((r, t)) if r == b.rect => copy_tile(&mut rec.pixels, canvas_w, r, &t),
                // The layout changed while scaling.
                _ => blit_scaled(&mut rec.pixels, canvas_w, b.rect, &frame.pixels, frame.width, frame.height),
            }
        }
        rec.placeholder[i] = false;
        rec.held[i] = Some(frame);
        Ok(())
    }

    /// Sequence number currently held for `channel`.
    pub fn register_seq(&self, channel: ChannelId) -> Option<u64> {
        let i = self.slot_of(channel).ok()?;
        self.recording.lock().unwrap().held[i].as_ref().map(|f| f.seq)
    }

    pub fn dropped_unknown(&self) -> u64 {
        self.dropped_unknown.load(Ordering::Relaxed)
    }

    /// Queue `layout` for the next capture; returns the frame_seq that will show it.
    pub fn apply_layout(&self, layout: CanvasLayout) -> Result<u64, CompositorError> {
        layout.validate(&self.scene).map_err(CompositorError::InvalidLayout)?;
        if layout.overlay_height != self.opts.overlay_height {
            return Err(CompositorError::InvalidLayout("overlay height is fixed for a session".into()));
        }
        let mut state = self.state.lock().unwrap();
        state.pending = Some(layout);
        Ok(state.next_seq)
    }

    /// The most recently requested layout (pending or current).
    pub fn layout(&self) -> CanvasLayout {
        let state = self.state.lock().unwrap();
        state.pending.clone().unwrap_or_else(|| state.current.clone())
    }

    pub fn next_frame_seq(&self) -> u64 {
        self.state.lock().unwrap().next_seq
    }

    /// Group states as rendered by the last capture.
    pub fn control_groups(&self) -> Vec<ControlGroup> {
        self.groups.lock().unwrap().clone()
    }

    /// Capture both canvases at `tick_ts` into one fused frame.
    pub fn capture(&self, tick_ts: u64) -> FusedFrame {
        let (frame_seq, changed) = {
            let mut state = self.state.lock().unwrap();
            let changed = state.pending.take().map(|next| {
                state.current = next.clone();
                next
            });
            let seq = state.next_seq;
            state.next_seq += 1;
            (seq, changed)
        };

        let (w, h) = (self.scene.canvas_width(), self.scene.canvas_height());
        let max_age = self.opts.placeholder_after_us;
        let mut rec = self.recording.lock().unwrap();
        if let Some(layout) = changed {
            rec.repaint(layout, w, h, tick_ts, max_age);
        }
        let mut channels = Vec::new();
        let mut stale = vec![false; rec.held.len()];
        for i in 0..rec.held.len() {
            let board = rec.layout.boards[i];
            if !board.visible {
                continue;
            }
            let Some(frame) = rec.held[i].clone() else { continue };
            let age = tick_ts.saturating_sub(frame.capture_ts);
            stale[i] = age > self.opts.stale_factor * self.periods_us[i].load(Ordering::Relaxed);
            if age > max_age {
                if !rec.placeholder[i] {
                    fill(&mut rec.pixels, w, board.rect, PLACEHOLDER);
                    rec.placeholder[i] = true;
                }
                continue;
            }
            channels.push(ChannelProvenance {
                channel: board.channel,
                source_seq: frame.seq,
                capture_ts: frame.capture_ts,
                rect: board.rect,
                stale: stale[i],
            });
        }
        let mut pixels = rec.pixels.clone();
        let layout = rec.layout.clone();
        drop(rec);

        let groups: Vec<(ControlGroup, bool)> = layout
            .boards
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let group = ControlGroup {
                    channel: b.channel,
                    state: if layout.selected == Some(b.channel) { GroupState::Selected } else { GroupState::Unselected },
                    stale: stale[i],
                };
                (group, b.visible)
            })
            .collect();
        let strip = Rect::new(0, h - layout.overlay_height, w, layout.overlay_height);
        draw_overlay(&mut pixels, w, strip, &groups);
        *self.groups.lock().unwrap() = groups
            .into_iter()
            .filter(|(g, _)| self.scene.has_group(g.channel))
            .map(|(g, _)| g)
            .collect();

        let newest = channels.iter().map(|c| c.capture_ts).max().unwrap_or(0);
        FusedFrame {
            frame_seq,
            composite_ts: tick_ts.max(newest),
            width: w,
            height: h,
            pixels,
            channels,
        }
    }
}

impl FrameSink for Compositor {
    fn submit(&self, frame: Frame) -> Result<(), SinkClosed> {
        // Unknown channels are counted and dropped; the source keeps running.
        let _ = self.ingest(frame);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::source::{decode_signature, synthetic_frame, PixelView, SIGNATURE_HEIGHT, SIGNATURE_WIDTH};
    use std::time::{Duration, Instant};

    fn compositor(n: usize) -> Compositor {
        let scene = SceneConfig::paired(n, 1280, 720, 30.0).unwrap();
        let opts = CompositorOptions::for_scene(&scene);
        assert_eq!(opts.overlay_height, 72);
        Compositor::new(scene, opts).unwrap()
    }

    fn frame(ch: u8, seq: u64, ts: u64) -> Frame {
        let mut f = synthetic_frame(ChannelId(ch), seq, 640, 324).unwrap();
        f.capture_ts = ts;
        f
    }

    fn decode_tile(f: &FusedFrame, p: &ChannelProvenance, src_w: u32, src_h: u32) -> (ChannelId, u32) {
        let view = PixelView::whole(&f.pixels, f.width, f.height);
        let w = SIGNATURE_WIDTH * p.rect.w / src_w;
        let h = SIGNATURE_HEIGHT * p.rect.h / src_h;
        decode_signature(view.sub(p.rect.x, p.rect.y, w, h)).unwrap()
    }

    fn pixel(f: &FusedFrame, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * f.width + x) * 3) as usize;
        [f.pixels[i], f.pixels[i + 1], f.pixels[i + 2]]
    }

    #[test]
    fn register_keeps_newest() {
        let c = compositor(1);
        assert_eq!(c.register_seq(ChannelId(0)), None);
        c.ingest(frame(0, 5, 100)).unwrap();
        c.ingest(frame(0, 4, 200)).unwrap();
        assert_eq!(c.register_seq(ChannelId(0)), Some(5));
    }

    #[test]
    fn unknown_channel_counted() {
        let c = compositor(1);
        assert_eq!(c.ingest(frame(9, 0, 0)), Err(CompositorError::UnknownChannel(9)));
        assert_eq!(c.dropped_unknown(), 1);
    }

    #[test]
    fn racing_producers_end_at_max_seq() {
        for _ in 0..50 {
            let c = Arc::new(compositor(1));
            let (a, b) = (c.clone(), c.clone());
            let fa = frame(0, 10, 1);
            let fb = frame(0, 11, 2);
            let ta = std::thread::spawn(move || a.ingest(fa).unwrap());
            let tb = std::thread::spawn(move || b.ingest(fb).unwrap());
            ta.join().unwrap();
            tb.join().unwrap();
            assert_eq!(c.register_seq(ChannelId(0)), Some(11));
        }
    }

    #[test]
    fn tiles_decode_to_latest_seq() {
        let c = compositor(3);
        for ch in 0..3u8 {
            for seq in 0..3 {
                c.ingest(frame(ch, seq + ch as u64 * 10, 1_000 + seq)).unwrap();
            }
        }
        let f = c.capture(2_000);
        assert_eq!(f.channels.len(), 3);
        for p in &f.channels {
            assert_eq!(decode_tile(&f, p, 640, 324), (p.channel, p.source_seq as u32));
            assert_eq!(Some(p.source_seq), c.register_seq(p.channel));
        }
        // Sampling does not consume.
        let g = c.capture(3_000);
        assert_eq!(g.channels.iter().map(|p| p.source_seq).collect::<Vec<_>>(), vec![2, 12, 22]);
        assert_eq!(g.frame_seq, f.frame_seq + 1);
    }

    #[test]
    fn empty_scene_captures_background() {
        let c = compositor(0);
        let f = c.capture(0);
        assert!(f.channels.is_empty());
        assert_eq!((f.width, f.height), (1280, 720));
        for y in (0..648).step_by(37) {
            for x in (0..1280).step_by(53) {
                assert_eq!(pixel(&f, x, y), BACKGROUND);
            }
        }
    }

    #[test]
    fn stalled_channel_becomes_placeholder() {
        let c = compositor(2);
        c.ingest(frame(0, 0, 0)).unwrap();
        let t = 5_100_000;
        c.ingest(frame(1, 150, t - 10_000)).unwrap();
        let f = c.capture(t);
        let listed: Vec<ChannelId> = f.channels.iter().map(|p| p.channel).collect();
        assert_eq!(listed, vec![ChannelId(1)]);
        let tile0 = grid_layout(2, 1280, 720, 72)[0];
        assert_eq!(pixel(&f, tile0.x + 100, tile0.y + 100), PLACEHOLDER);
        assert_eq!(decode_tile(&f, &f.channels[0], 640, 324), (ChannelId(1), 150));
        let groups = c.control_groups();
        assert!(groups[0].stale && !groups[1].stale);
    }

    #[test]
    fn held_frame_flagged_stale_before_placeholder() {
        let c = compositor(1);
        c.ingest(frame(0, 3, 1_000_000)).unwrap();
        let fresh = c.capture(1_000_000 + 60_000);
        assert!(!fresh.channels[0].stale);
        let held = c.capture(1_000_000 + 70_000);
        assert!(held.channels[0].stale);
        assert_eq!(held.channels[0].source_seq, 3);
    }

    #[test]
    fn empty_register_is_placeholder_and_unlisted() {
        let c = compositor(2);
        c.ingest(frame(1, 0, 10)).unwrap();
        let f = c.capture(20);
        assert_eq!(f.channels.len(), 1);
        assert_eq!(pixel(&f, 10, 10), PLACEHOLDER);
    }

    #[test]
    fn focus_then_grid() {
        let c = compositor(4);
        for ch in 0..4 {
            c.ingest(frame(ch, 1, 5)).unwrap();
        }
        let _ = c.capture(10);
        let all: BTreeSet<ChannelId> = c.scene().channels().into_iter().collect();
        let focus = CanvasLayout::build(c.scene(), 72, LayoutMode::Focus(ChannelId(2)), &all, Some(ChannelId(2)));
        let applied = c.apply_layout(focus).unwrap();
        let f = c.capture(20);
        assert_eq!(f.frame_seq, applied);
        assert_eq!(f.channels.len(), 1);
        assert_eq!(f.channels[0].channel, ChannelId(2));
        assert_eq!(f.channels[0].rect, Rect::new(0, 0, 1280, 648));
        assert_eq!(decode_tile(&f, &f.channels[0], 640, 324), (ChannelId(2), 1));
        assert_eq!(c.control_groups()[2].state, GroupState::Selected);

        let grid = CanvasLayout::build(c.scene(), 72, LayoutMode::Grid, &all, None);
        let applied = c.apply_layout(grid).unwrap();
        let f = c.capture(30);
        assert_eq!(f.frame_seq, applied);
        assert_eq!(f.channels.len(), 4);
    }

    #[test]
    fn invalid_layout_rejected() {
        let c = compositor(4);
        let all: BTreeSet<ChannelId> = c.scene().channels().into_iter().collect();
        let bad = CanvasLayout::build(c.scene(), 72, LayoutMode::Focus(ChannelId(99)), &all, None);
        assert!(matches!(c.apply_layout(bad), Err(CompositorError::InvalidLayout(_))));
    }

    #[test]
    fn output_size_fixed_and_tile_area_shrinks() {
        let video_area = 1280u64 * 648;
        let mut sizes = Vec::new();
        for n in [1usize, 4, 16] {
            let c = compositor(n);
            for ch in 0..n as u8 {
                c.ingest(frame(ch, 0, 0)).unwrap();
            }
            let f = c.capture(1);
            sizes.push(f.pixels.len());
            let (cols, rows) = grid_shape(n);
            for p in &f.channels {
                assert_eq!(p.rect.area(), video_area / (cols * rows) as u64);
            }
        }
        assert!(sizes.iter().all(|&s| s == 1280 * 720 * 3));
    }

    #[test]
    fn composite_ts_covers_every_capture() {
        let c = compositor(2);
        c.ingest(frame(0, 0, 500)).unwrap();
        c.ingest(frame(1, 0, 900)).unwrap();
        let f = c.capture(800);
        assert!(f.channels.iter().all(|p| p.capture_ts <= f.composite_ts));
        assert_eq!(f.spread_us(), 400);
    }

    #[test]
    fn capture_with_empty_registers_is_fast() {
        let c = compositor(16);
        let start = Instant::now();
        let f = c.capture(0);
        assert!(f.channels.is_empty());
        assert!(start.elapsed() < Duration::from_micros(33_333));
    }
}
