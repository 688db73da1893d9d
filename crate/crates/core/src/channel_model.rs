//! Channel accounting for a fused scene.
//!
//! A scene carries one display board per input device on the video canvas
//! and, optionally, one control group per board on the interaction canvas.
//! Boards and groups are 0/1 indicators per device; the main capture wraps
//! both canvases and adds no count of its own.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum number of input devices a scene can address.
pub const MAX_CHANNELS: usize = 256;

/// Index of an input device, `0..=255`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChannelId(pub u8);

impl ChannelId {
    pub fn new(id: u32) -> Result<Self, SceneError> {
        u8::try_from(id)
            .map(ChannelId)
            .map_err(|_| SceneError::ChannelOutOfRange(id))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ch{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("CapacityExceeded: {0} boards requested, at most {MAX_CHANNELS} devices are addressable")]
    CapacityExceeded(usize),
    #[error("DanglingControlGroup: control group for channel {0} has no enabled board")]
    DanglingControlGroup(u32),
    #[error("DuplicateChannel: channel {0} declared more than once")]
    DuplicateChannel(u32),
    #[error("ChannelOutOfRange: channel id {0} exceeds 255")]
    ChannelOutOfRange(u32),
    #[error("BadDimensions: canvas {0}x{1} must be non-zero and at most 65535 per side")]
    BadDimensions(u32, u32),
    #[error("BadTickRate: tick rate {0} Hz must be positive and finite")]
    BadTickRate(f64),
    #[error("scene file: {0}")]
    Io(String),
    #[error("scene file is not valid JSON: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DisplayBoardSpec {
    pub channel: ChannelId,
    pub enabled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlGroupSpec {
    pub channel: ChannelId,
    pub enabled: bool,
}

/// A validated scene. Immutable; reconfiguration builds a new value.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    boards: Vec<DisplayBoardSpec>,
    control_groups: Vec<ControlGroupSpec>,
    canvas_width: u32,
    canvas_height: u32,
    tick_rate: f64,
}

impl SceneConfig {
    /// `n` channels `0..n`, each with an enabled board and a paired group.
    pub fn paired(n: usize, canvas_width: u32, canvas_height: u32, tick_rate: f64) -> Result<Self, SceneError> {
        let ids: Vec<u32> = (0..n as u32).collect();
        validate_config(RawScene {
            canvas_width,
            canvas_height,
            tick_rate,
            boards: ids.iter().map(|&id| RawEntry { id, enabled: true }).collect(),
            control_groups: ids.iter().map(|&id| RawEntry { id, enabled: true }).collect(),
        })
    }

    pub fn boards(&self) -> &[DisplayBoardSpec] {
        &self.boards
    }

    pub fn control_groups(&self) -> &[ControlGroupSpec] {
        &self.control_groups
    }

    pub fn canvas_width(&self) -> u32 {
        self.canvas_width
    }

    pub fn canvas_height(&self) -> u32 {
        self.canvas_height
    }

    pub fn tick_rate(&self) -> f64 {
        self.tick_rate
    }

    pub fn tick_period_us(&self) -> u64 {
        (1e6 / self.tick_rate).round() as u64
    }

    pub fn has_board(&self, channel: ChannelId) -> bool {
        self.boards.iter().any(|b| b.channel == channel)
    }

    pub fn has_group(&self, channel: ChannelId) -> bool {
        self.control_groups.iter().any(|g| g.channel == channel)
    }

    /// Channel ids with a board slot, ascending.
    pub fn channels(&self) -> Vec<ChannelId> {
        self.boards.iter().map(|b| b.channel).collect()
    }

    pub fn to_raw(&self) -> RawScene {
        RawScene {
            canvas_width: self.canvas_width,
            canvas_height: self.canvas_height,
            tick_rate: self.tick_rate,
            boards: self
                .boards
                .iter()
                .map(|b| RawEntry { id: b.channel.0 as u32, enabled: b.enabled })
                .collect(),
            control_groups: self
                .control_groups
                .iter()
                .map(|g| RawEntry { id: g.channel.0 as u32, enabled: g.enabled })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&SceneFile::from(&self.to_raw())).expect("scene serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawEntry {
    pub id: u32,
    pub enabled: bool,
}

/// An unvalidated scene description.
#[derive(Debug, Clone, PartialEq)]
pub struct RawScene {
    pub canvas_width: u32,
    pub canvas_height: u32,
    pub tick_rate: f64,
    pub boards: Vec<RawEntry>,
    pub control_groups: Vec<RawEntry>,
}

/// Non-interactive channel count: enabled boards.
pub fn count_noninteractive(config: &SceneConfig) -> usize {
    config.boards.iter().filter(|b| b.enabled).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelCount {
    pub non_interactive: usize,
    pub interactive: usize,
    pub total: usize,
}

/// Channels carried by the single main capture: boards plus control groups.
pub fn count_total_channels(config: &SceneConfig) -> ChannelCount {
    let non_interactive = count_noninteractive(config);
    let interactive = config.control_groups.iter().filter(|g| g.enabled).count();
    ChannelCount {
        non_interactive,
        interactive,
        total: non_interactive + interactive,
    }
}

pub fn validate_config(raw: RawScene) -> Result<SceneConfig, SceneError> {
    if raw.boards.len() > MAX_CHANNELS {
        return Err(SceneError::CapacityExceeded(raw.boards.len()));
    }
    if raw.canvas_width == 0
        || raw.canvas_height == 0
        || raw.canvas_width > u16::MAX as u32
        || raw.canvas_height > u16::MAX as u32
    {
        return Err(SceneError::BadDimensions(raw.canvas_width, raw.canvas_height));
    }
    if !(raw.tick_rate.is_finite() && raw.tick_rate > 0.0) {
        return Err(SceneError::BadTickRate(raw.tick_rate));
    }

    let mut seen = BTreeSet::new();
    let mut boards = Vec::with_capacity(raw.boards.len());
    for entry in &raw.boards {
        let channel = ChannelId::new(entry.id)?;
        if !seen.insert(channel) {
            return Err(SceneError::DuplicateChannel(entry.id));
        }
        boards.push(DisplayBoardSpec { channel, enabled: entry.enabled });
    }
    boards.sort_by_key(|b| b.channel);

    let mut seen_groups = BTreeSet::new();
    let mut control_groups = Vec::with_capacity(raw.control_groups.len());
    for entry in &raw.control_groups {
        let channel = ChannelId::new(entry.id)?;
        if !seen_groups.insert(channel) {
            return Err(SceneError::DuplicateChannel(entry.id));
        }
        let paired = boards.iter().any(|b| b.channel == channel && b.enabled);
        if !paired {
            return Err(SceneError::DanglingControlGroup(entry.id));
        }
        control_groups.push(ControlGroupSpec { channel, enabled: entry.enabled });
    }
    control_groups.sort_by_key(|g| g.channel);

    Ok(SceneConfig {
        boards,
        control_groups,
        canvas_width: raw.canvas_width,
        canvas_height: raw.canvas_height,
        tick_rate: raw.tick_rate,
    })
}

// JSON scene file:
// {"canvas": {"width": 1280, "height": 720}, "tick_rate": 30,
//  "channels": [{"id": 0, "board": true, "control_group": true}, ...]}

#[derive(Debug, Serialize, Deserialize)]
struct CanvasSize {
    width: u32,
    height: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct ChannelEntry {
    id: u32,
    #[serde(default = "yes")]
    board: bool,
    #[serde(default)]
    control_group: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneFile {
    canvas: CanvasSize,
    tick_rate: f64,
    channels: Vec<ChannelEntry>,
}

impl From<&RawScene> for SceneFile {
    fn from(raw: &RawScene) -> Self {
        let groups: BTreeSet<u32> = raw.control_groups.iter().map(|g| g.id).collect();
        SceneFile {
            canvas: CanvasSize {
                width: raw.canvas_width,
                height: raw.canvas_height,
            },
            tick_rate: raw.tick_rate,
            channels: raw
                .boards
                .iter()
                .map(|b| ChannelEntry {
                    id: b.id,
                    board: b.enabled,
                    control_group: groups.contains(&b.id),
                })
                .collect(),
        }
    }
}

impl From<SceneFile> for RawScene {
    fn from(file: SceneFile) -> Self {
        RawScene {
            canvas_width: file.canvas.width,
            canvas_height: file.canvas.height,
            tick_rate: file.tick_rate,
            boards: file
                .channels
                .iter()
                .map(|c| RawEntry { id: c.id, enabled: c.board })
                .collect(),
            control_groups: file
                .channels
                .iter()
                .filter(|c| c.control_group)
                .map(|c| RawEntry { id: c.id, enabled: true })
                .collect(),
        }
    }
}

pub fn parse_scene_json(text: &str) -> Result<SceneConfig, SceneError> {
    let file: SceneFile = serde_json::from_str(text).map_err(|e| SceneError::Parse(e.to_string()))?;
    validate_config(file.into())
}

pub fn load_scene(path: &Path) -> Result<SceneConfig, SceneError> {
    let text = std::fs::read_to_string(path).map_err(|e| SceneError::Io(format!("{}: {e}", path.display())))?;
    parse_scene_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(boards: &[u32], groups: &[u32]) -> RawScene {
        RawScene {
            canvas_width: 1280,
            canvas_height: 720,
            tick_rate: 30.0,
            boards: boards.iter().map(|&id| RawEntry { id, enabled: true }).collect(),
            control_groups: groups.iter().map(|&id| RawEntry { id, enabled: true }).collect(),
        }
    }

    #[test]
    fn empty_scene_counts_zero() {
        let cfg = validate_config(raw(&[], &[])).unwrap();
        assert_eq!(count_noninteractive(&cfg), 0);
        assert_eq!(
            count_total_channels(&cfg),
            ChannelCount { non_interactive: 0, interactive: 0, total: 0 }
        );
    }

    #[test]
    fn three_boards() {
        let cfg = validate_config(raw(&[0, 1, 2], &[])).unwrap();
        assert_eq!(count_noninteractive(&cfg), 3);
    }

    #[test]
    fn full_capacity_counts_every_board() {
        let ids: Vec<u32> = (0..256).collect();
        let cfg = validate_config(raw(&ids, &[])).unwrap();
        // Oracle: count the enabled entries directly.
        let expected = cfg.boards().iter().filter(|b| b.enabled).count();
        assert_eq!(expected, 256);
        assert_eq!(count_noninteractive(&cfg), expected);
    }

    #[test]
    fn paired_totals() {
        let cfg = validate_config(raw(&[0, 1, 2], &[0, 1, 2])).unwrap();
        assert_eq!(
            count_total_channels(&cfg),
            ChannelCount { non_interactive: 3, interactive: 3, total: 6 }
        );
        let cfg = validate_config(raw(&[0], &[])).unwrap();
        assert_eq!(
            count_total_channels(&cfg),
            ChannelCount { non_interactive: 1, interactive: 0, total: 1 }
        );
        let cfg = SceneConfig::paired(255, 1280, 720, 30.0).unwrap();
        let c = count_total_channels(&cfg);
        assert_eq!((c.non_interactive, c.interactive), (cfg.boards().len(), cfg.control_groups().len()));
        assert_eq!(c.total, 510);
    }

    #[test]
    fn disabled_board_keeps_slot_but_counts_zero() {
        let mut r = raw(&[0, 1], &[0]);
        r.boards[1].enabled = false;
        let cfg = validate_config(r).unwrap();
        assert!(cfg.has_board(ChannelId(1)));
        assert_eq!(count_noninteractive(&cfg), 1);
    }

    #[test]
    fn rejects_over_capacity() {
        let ids: Vec<u32> = (0..257).collect();
        assert_eq!(validate_config(raw(&ids, &[])), Err(SceneError::CapacityExceeded(257)));
    }

    #[test]
    fn rejects_dangling_group() {
        assert_eq!(
            validate_config(raw(&[0, 1], &[7])),
            Err(SceneError::DanglingControlGroup(7))
        );
        let mut r = raw(&[0, 7], &[7]);
        r.boards[1].enabled = false;
        assert_eq!(validate_config(r), Err(SceneError::DanglingControlGroup(7)));
    }

    #[test]
    fn rejects_duplicates_and_bad_values() {
        assert_eq!(validate_config(raw(&[3, 3], &[])), Err(SceneError::DuplicateChannel(3)));
        assert_eq!(validate_config(raw(&[300], &[])), Err(SceneError::ChannelOutOfRange(300)));
        let mut r = raw(&[0], &[]);
        r.canvas_width = 0;
        assert!(matches!(validate_config(r), Err(SceneError::BadDimensions(0, 720))));
        let mut r = raw(&[0], &[]);
        r.tick_rate = 0.0;
        assert!(matches!(validate_config(r), Err(SceneError::BadTickRate(_))));
    }

    #[test]
    fn ten_paired_channels_valid() {
        let ids: Vec<u32> = (0..10).collect();
        let cfg = validate_config(raw(&ids, &ids)).unwrap();
        assert_eq!(cfg.boards().len(), 10);
        assert_eq!(cfg.control_groups().len(), 10);
        assert_eq!((cfg.canvas_width(), cfg.canvas_height()), (1280, 720));
        assert_eq!(cfg.tick_period_us(), 33_333);
    }

    #[test]
    fn parses_scene_file() {
        let text = r#"{"canvas": {"width": 1280, "height": 720}, "tick_rate": 30,
            "channels": [{"id": 0, "board": true, "control_group": true},
                         {"id": 1, "board": true, "control_group": false}]}"#;
        let cfg = parse_scene_json(text).unwrap();
        assert_eq!(count_total_channels(&cfg).total, 3);
        assert!(matches!(parse_scene_json("{"), Err(SceneError::Parse(_))));
    }

    proptest! {
        #[test]
        fn paired_total_is_twice_n(n in 0usize..=256) {
            let cfg = SceneConfig::paired(n, 640, 360, 30.0).unwrap();
            prop_assert_eq!(count_total_channels(&cfg).total, 2 * n);
        }

        #[test]
        fn count_ignores_board_order(ids in proptest::collection::btree_set(0u32..256, 0..40), seed in any::<u64>()) {
            let ids: Vec<u32> = ids.into_iter().collect();
            let mut shuffled = ids.clone();
            // deterministic shuffle
            let mut s = seed;
            for i in (1..shuffled.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (s >> 33) as usize % (i + 1));
            }
            let a = validate_config(raw(&ids, &ids)).unwrap();
            let b = validate_config(raw(&shuffled, &shuffled)).unwrap();
            prop_assert_eq!(count_total_channels(&a), count_total_channels(&b));
        }

        #[test]
        fn validate_serialize_validate_is_idempotent(
            ids in proptest::collection::btree_set(0u32..256, 0..30),
            mask in any::<u64>(),
        ) {
            let ids: Vec<u32> = ids.into_iter().collect();
            let groups: Vec<u32> = ids.iter().copied().filter(|id| mask >> (id % 64) & 1 == 1).collect();
            let cfg = validate_config(raw(&ids, &groups)).unwrap();
            let again = parse_scene_json(&cfg.to_json()).unwrap();
            prop_assert_eq!(&cfg, &again);
            prop_assert_eq!(validate_config(again.to_raw()).unwrap(), cfg);
        }
    }
}
