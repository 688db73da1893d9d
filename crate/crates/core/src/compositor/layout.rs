use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::channel_model::{ChannelId, SceneConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn overlaps(&self, other: &Rect) -> bool {
        self.x < other.x + other.w && other.x < self.x + self.w && self.y < other.y + other.h && other.y < self.y + self.h
    }

    pub fn within(&self, w: u32, h: u32) -> bool {
        self.x as u64 + self.w as u64 <= w as u64 && self.y as u64 + self.h as u64 <= h as u64
    }
}

/// Grid dimensions `(cols, rows)` for `n` tiles: `cols = ceil(sqrt n)`, `rows = ceil(n / cols)`.
pub fn grid_shape(n: usize) -> (u32, u32) {
    if n == 0 {
        return (0, 0);
    }
    let mut cols = (n as f64).sqrt() as u32;
    while (cols as usize) * (cols as usize) < n {
        cols += 1;
    }
    let rows = (n as u32).div_ceil(cols);
    (cols, rows)
}

/// Tile rectangles for `n` boards filling the video region above the overlay
/// strip, left-to-right then top-to-bottom.
pub fn grid_layout(n: usize, canvas_w: u32, canvas_h: u32, overlay_height: u32) -> Vec<Rect> {
    grid_cells(n, canvas_w, canvas_h, overlay_height).into_iter().take(n).collect()
}

/// Every cell of the grid for `n` tiles, including the unused trailing ones.
pub(crate) fn grid_cells(n: usize, canvas_w: u32, canvas_h: u32, overlay_height: u32) -> Vec<Rect> {
    let (cols, rows) = grid_shape(n);
    if n == 0 {
        return Vec::new();
    }
    let video_h = canvas_h.saturating_sub(overlay_height);
    let (tw, th) = (canvas_w / cols, video_h / rows);
    (0..rows)
        .flat_map(|r| (0..cols).map(move |c| Rect::new(c * tw, r * th, tw, th)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "channel", rename_all = "snake_case")]
pub enum LayoutMode {
    Grid,
    Focus(ChannelId),
}

/// A board on the video canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisplayBoard {
    pub channel: ChannelId,
    pub rect: Rect,
    pub visible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupState {
    Selected,
    Unselected,
}

/// A board's interactive counterpart on the overlay strip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlGroup {
    pub channel: ChannelId,
    pub state: GroupState,
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanvasLayout {
    pub mode: LayoutMode,
    /// One entry per board slot in the scene, ordered by channel.
    pub boards: Vec<DisplayBoard>,
    pub overlay_height: u32,
    pub selected: Option<ChannelId>,
}

impl CanvasLayout {
    /// Place boards for `mode`. In grid mode the boards in `visible` share
    /// the grid in channel order; in focus mode the focused board covers the
    /// whole video region.
    pub fn build(
        scene: &SceneConfig,
        overlay_height: u32,
        mode: LayoutMode,
        visible: &BTreeSet<ChannelId>,
        selected: Option<ChannelId>,
    ) -> Self {
        let (w, h) = (scene.canvas_width(), scene.canvas_height());
        let video = Rect::new(0, 0, w, h.saturating_sub(overlay_height));
        let mut boards: Vec<DisplayBoard> = scene
            .channels()
            .into_iter()
            .map(|channel| DisplayBoard { channel, rect: Rect::default(), visible: false })
            .collect();
        match mode {
            LayoutMode::Grid => {
                let shown: Vec<usize> = boards
                    .iter()
                    .enumerate()
                    .filter(|(_, b)| visible.contains(&b.channel))
                    .map(|(i, _)| i)
                    .collect();
                let rects = grid_layout(shown.len(), w, h, overlay_height);
                for (i, rect) in shown.into_iter().zip(rects) {
                    boards[i].rect = rect;
                    boards[i].visible = true;
                }
            }
            LayoutMode::Focus(ch) => {
                if let Some(b) = boards.iter_mut().find(|b| b.channel == ch) {
                    b.rect = video;
                    b.visible = true;
                }
            }
        }
        Self { mode, boards, overlay_height, selected }
    }

    pub fn visible_boards(&self) -> impl Iterator<Item = &DisplayBoard> {
        self.boards.iter().filter(|b| b.visible)
    }

    pub fn validate(&self, scene: &SceneConfig) -> Result<(), String> {
        let (w, h) = (scene.canvas_width(), scene.canvas_height());
        if self.overlay_height >= h {
            return Err(format!("overlay height {} leaves no video region in {h} rows", self.overlay_height));
        }
        let video_h = h - self.overlay_height;
        let mut seen = BTreeSet::new();
        for b in &self.boards {
            if !scene.has_board(b.channel) {
                return Err(format!("no board for channel {}", b.channel.0));
            }
            if !seen.insert(b.channel) {
                return Err(format!("channel {} placed twice", b.channel.0));
            }
            if b.visible && !b.rect.within(w, video_h) {
                return Err(format!("board {} rect {:?} outside the video region", b.channel.0, b.rect));
            }
        }
        let visible: Vec<&DisplayBoard> = self.visible_boards().collect();
        for (i, a) in visible.iter().enumerate() {
            for b in &visible[i + 1..] {
                if a.rect.overlaps(&b.rect) {
                    return Err(format!("boards {} and {} overlap", a.channel.0, b.channel.0));
                }
            }
        }
        if let LayoutMode::Focus(ch) = self.mode {
            if !scene.has_board(ch) {
                return Err(format!("no board for channel {}", ch.0));
            }
            let full = Rect::new(0, 0, w, video_h);
            if visible.len() != 1 || visible[0].channel != ch || visible[0].rect != full {
                return Err(format!("focus on channel {} must show exactly that board over the full video region", ch.0));
            }
        }
        if let Some(sel) = self.selected {
            if !scene.has_board(sel) {
                return Err(format!("selected channel {} has no board", sel.0));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_tile_fills_video_region() {
        assert_eq!(grid_layout(1, 1280, 720, 72), vec![Rect::new(0, 0, 1280, 648)]);
    }

    #[test]
    fn four_tiles() {
        // cols = rows = 2
        let (tw, th) = (1280 / 2, (720 - 72) / 2);
        assert_eq!(
            grid_layout(4, 1280, 720, 72),
            vec![
                Rect::new(0, 0, tw, th),
                Rect::new(tw, 0, tw, th),
                Rect::new(0, th, tw, th),
                Rect::new(tw, th, tw, th)
            ]
        );
        assert_eq!((tw, th), (640, 324));
    }

    #[test]
    fn three_tiles_leave_one_cell() {
        let rects = grid_layout(3, 1280, 720, 72);
        let origins: Vec<(u32, u32)> = rects.iter().map(|r| (r.x, r.y)).collect();
        assert_eq!(origins, vec![(0, 0), (640, 0), (0, 324)]);
        assert!(rects.iter().all(|r| r.w == 640 && r.h == 324));
        assert_eq!(grid_cells(3, 1280, 720, 72).len(), 4);
    }

    #[test]
    fn empty_grid() {
        assert!(grid_layout(0, 1280, 720, 72).is_empty());
    }

    #[test]
    fn shape_formula() {
        // Oracle: smallest cols with cols^2 >= n, then rows = ceil(n / cols).
        for n in 1..=256usize {
            let cols = (1..).find(|c: &usize| c * c >= n).unwrap();
            let rows = n.div_ceil(cols);
            assert_eq!(grid_shape(n), (cols as u32, rows as u32), "n = {n}");
        }
    }

    #[test]
    fn grid_tiles_are_disjoint_and_inside() {
        for n in [1usize, 2, 5, 7, 16, 50, 255, 256] {
            let rects = grid_layout(n, 1280, 720, 72);
            assert_eq!(rects.len(), n);
            for (i, a) in rects.iter().enumerate() {
                assert!(a.within(1280, 648));
                for b in &rects[i + 1..] {
                    assert!(!a.overlaps(b));
                }
            }
        }
    }

    #[test]
    fn focus_layout_validates() {
        let scene = SceneConfig::paired(4, 1280, 720, 30.0).unwrap();
        let all: BTreeSet<ChannelId> = scene.channels().into_iter().collect();
        let focus = CanvasLayout::build(&scene, 72, LayoutMode::Focus(ChannelId(2)), &all, None);
        focus.validate(&scene).unwrap();
        assert_eq!(focus.visible_boards().count(), 1);
        let grid = CanvasLayout::build(&scene, 72, LayoutMode::Grid, &all, None);
        grid.validate(&scene).unwrap();
        assert_eq!(grid.visible_boards().count(), 4);

        let bad = CanvasLayout::build(&scene, 72, LayoutMode::Focus(ChannelId(99)), &all, None);
        assert!(bad.validate(&scene).is_err());
        let mut overlapping = grid.clone();
        overlapping.boards[1].rect = overlapping.boards[0].rect;
        assert!(overlapping.validate(&scene).is_err());
    }
}
