//! Flag value grammars.

use std::path::PathBuf;

/// `WxH`.
pub fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let w: u32 = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h: u32 = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    if w == 0 || h == 0 {
        return Err(format!("size {s:?} must be non-zero"));
    }
    Ok((w, h))
}

#[derive(Debug, Clone, PartialEq)]
pub enum SourceArg {
    Synthetic(usize),
    File { dir: PathBuf, fps: f64 },
}

/// `synthetic:<n>` or `file:<dir>@<fps>`.
pub fn parse_source(s: &str) -> Result<SourceArg, String> {
    if let Some(n) = s.strip_prefix("synthetic:") {
        return n.parse().map(SourceArg::Synthetic).map_err(|_| format!("bad channel count in {s:?}"));
    }
    if let Some(rest) = s.strip_prefix("file:") {
        let (dir, fps) = rest.rsplit_once('@').ok_or_else(|| format!("expected file:<dir>@<fps>, got {s:?}"))?;
        let fps: f64 = fps.parse().map_err(|_| format!("bad frame rate in {s:?}"))?;
        if !(fps.is_finite() && fps > 0.0) {
            return Err(format!("frame rate in {s:?} must be positive"));
        }
        return Ok(SourceArg::File { dir: PathBuf::from(dir), fps });
    }
    Err(format!("expected synthetic:<n> or file:<dir>@<fps>, got {s:?}"))
}

/// `fuse1:<port>`.
pub fn parse_transport(s: &str) -> Result<u16, String> {
    s.strip_prefix("fuse1:")
        .and_then(|p| p.parse().ok())
        .ok_or_else(|| format!("expected fuse1:<port>, got {s:?}"))
}

/// Bandwidth in bytes per second from `<x>gbps`, `<x>mbps`, `<x>kbps`,
/// `<x>bps` (bits) or `<x>B/s` (bytes).
pub fn parse_bandwidth(s: &str) -> Result<f64, String> {
    let lower = s.trim().to_ascii_lowercase();
    let (num, scale) = if let Some(n) = lower.strip_suffix("gbps") {
        (n, 1e9 / 8.0)
    } else if let Some(n) = lower.strip_suffix("mbps") {
        (n, 1e6 / 8.0)
    } else if let Some(n) = lower.strip_suffix("kbps") {
        (n, 1e3 / 8.0)
    } else if let Some(n) = lower.strip_suffix("bps") {
        (n, 1.0 / 8.0)
    } else if let Some(n) = lower.strip_suffix("b/s") {
        (n, 1.0)
    } else {
        return Err(format!("bandwidth {s:?} needs a gbps, mbps, kbps, bps or B/s suffix"));
    };
    let v: f64 = num.trim().parse().map_err(|_| format!("bad bandwidth {s:?}"))?;
    if !(v.is_finite() && v > 0.0) {
        return Err(format!("bandwidth {s:?} must be positive"));
    }
    Ok(v * scale)
}

pub fn parse_duration(s: &str) -> Result<std::time::Duration, String> {
    humantime::parse_duration(s).map_err(|e| format!("{s:?}: {e}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, clap::ValueEnum)]
pub enum Mode {
    Fused,
    Naive,
    Response,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("1280x720"), Ok((1280, 720)));
        assert!(parse_size("1280").is_err());
        assert!(parse_size("0x5").is_err());
    }

    #[test]
    fn sources() {
        assert_eq!(parse_source("synthetic:4"), Ok(SourceArg::Synthetic(4)));
        assert_eq!(parse_source("file:/tmp/a@b@12.5"), Ok(SourceArg::File { dir: "/tmp/a@b".into(), fps: 12.5 }));
        assert!(parse_source("file:/tmp@0").is_err());
        assert!(parse_source("camera:0").is_err());
    }

    #[test]
    fn bandwidths() {
        assert_eq!(parse_bandwidth("50mbps"), Ok(6.25e6));
        assert_eq!(parse_bandwidth("800kbps"), Ok(1e5));
        assert_eq!(parse_bandwidth("1000B/s"), Ok(1000.0));
        assert!(parse_bandwidth("50").is_err());
        assert!(parse_bandwidth("-1mbps").is_err());
    }

    #[test]
    fn transports() {
        assert_eq!(parse_transport("fuse1:9000"), Ok(9000));
        assert!(parse_transport("rtsp:554").is_err());
    }
}
