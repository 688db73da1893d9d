//! Pixel operations on packed RGB8 canvases.

use super::layout::{ControlGroup, GroupState, Rect};

pub(crate) const BACKGROUND: [u8; 3] = [16, 16, 20];
pub(crate) const PLACEHOLDER: [u8; 3] = [40, 40, 40];
const STRIP: [u8; 3] = [48, 48, 52];
const CELL_SHOWN: [u8; 3] = [96, 96, 104];
const CELL_HIDDEN: [u8; 3] = [28, 28, 30];
const SELECTED: [u8; 3] = [240, 200, 40];
const STALE: [u8; 3] = [210, 40, 40];

pub(crate) fn fill(dst: &mut [u8], canvas_w: u32, rect: Rect, rgb: [u8; 3]) {
    if rect.w == 0 {
        return;
    }
    let mut row = Vec::with_capacity(rect.w as usize * 3);
    for _ in 0..rect.w {
        row.extend_from_slice(&rgb);
    }
    for y in rect.y..rect.y + rect.h {
        let start = ((y * canvas_w + rect.x) * 3) as usize;
        dst[start..start + row.len()].copy_from_slice(&row);
    }
}

/// Nearest-neighbor scale of a `src_w x src_h` RGB8 image into `rect`.
pub(crate) fn blit_scaled(dst: &mut [u8], canvas_w: u32, rect: Rect, src: &[u8], src_w: u32, src_h: u32) {
    if rect.w == 0 || rect.h == 0 || src_w == 0 || src_h == 0 {
        return;
    }
    let xmap: Vec<usize> = (0..rect.w)
        .map(|dx| ((dx as u64 * src_w as u64 / rect.w as u64) * 3) as usize)
        .collect();
    for dy in 0..rect.h {
        let sy = (dy as u64 * src_h as u64 / rect.h as u64) as usize;
        let src_row = &src[sy * src_w as usize * 3..(sy + 1) * src_w as usize * 3];
        let start = (((rect.y + dy) * canvas_w + rect.x) * 3) as usize;
        let dst_row = &mut dst[start..start + rect.w as usize * 3];
        for (d, &s) in dst_row.chunks_exact_mut(3).zip(&xmap) {
            d.copy_from_slice(&src_row[s..s + 3]);
        }
    }
}

/// Copy a packed `rect.w x rect.h` image into `rect`.
pub(crate) fn copy_tile(dst: &mut [u8], canvas_w: u32, rect: Rect, tile: &[u8]) {
    let row = rect.w as usize * 3;
    for (dy, src) in tile.chunks_exact(row).take(rect.h as usize).enumerate() {
        let start = (((rect.y + dy as u32) * canvas_w + rect.x) * 3) as usize;
        dst[start..start + row].copy_from_slice(src);
    }
}

/// Draw the interaction strip: one status cell per board slot.
///
/// Each cell is shaded by visibility, carries a yellow top band when its
/// group is selected, a red bottom band when the channel is stale, and the
/// channel index as eight black/white bars when the cell is wide enough.
pub(crate) fn draw_overlay(dst: &mut [u8], canvas_w: u32, strip: Rect, cells: &[(ControlGroup, bool)]) {
    if strip.h == 0 || strip.w == 0 {
        return;
    }
    let cell_w = (canvas_w / cells.len().max(1) as u32).max(1);
    let gap = u32::from(cell_w >= 4);
    let band = (strip.h / 4).max(1);
    let bars = (cell_w - gap) / 8 >= 1 && strip.h >= 3 * band;

    // A strip row is one of at most four patterns: top band, bottom band,
    // both (very short strips), or the middle with the index bars. Each is
    // built once and copied down, so the cost is the strip's area.
    let pattern = |top: bool, bottom: bool| -> Vec<u8> {
        let mut row = vec![0u8; canvas_w as usize * 3];
        let mut paint = |x: u32, w: u32, rgb: [u8; 3]| {
            let end = (x + w).min(canvas_w);
            for px in row[x as usize * 3..end as usize * 3].chunks_exact_mut(3) {
                px.copy_from_slice(&rgb);
            }
        };
        paint(strip.x, strip.w, STRIP);
        for (i, (group, shown)) in cells.iter().enumerate() {
            let x = i as u32 * cell_w;
            if x + cell_w > canvas_w {
                break;
            }
            let w = cell_w - gap;
            paint(x, w, if *shown { CELL_SHOWN } else { CELL_HIDDEN });
            if top && group.state == GroupState::Selected {
                paint(x, w, SELECTED);
            }
            if bottom && group.stale {
                paint(x, w, STALE);
            }
            if !top && !bottom && bars {
                let bar_w = w / 8;
                for bit in 0..8u32 {
                    let on = (group.channel.0 >> (7 - bit)) & 1 == 1;
                    paint(x + bit * bar_w, bar_w, if on { [255, 255, 255] } else { [0, 0, 0] });
                }
            }
        }
        row
    };
    let mut cache: [Option<Vec<u8>>; 4] = Default::default();
    let span = strip.x as usize * 3..(strip.x + strip.w) as usize * 3;
    for dy in 0..strip.h {
        let (top, bottom) = (dy < band, dy >= strip.h - band);
        let row = cache[usize::from(top) * 2 + usize::from(bottom)].get_or_insert_with(|| pattern(top, bottom));
        let start = ((strip.y + dy) * canvas_w) as usize * 3;
        dst[start + span.start..start + span.end].copy_from_slice(&row[span.clone()]);
    }
}
