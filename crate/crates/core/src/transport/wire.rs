//! FUSE/1 byte layout.
//!
//! Every message starts with the preamble `FUS1` and a type byte. All
//! integers are little-endian.
//!
//! Frame message (type `0x01`):
//!
//! ```text
//! frame_seq u64 | composite_ts_us u64 | width u16 | height u16 |
//! pixel_format u8 | channel_count u16 | reserved u16                 25 bytes
//! channel_count x (channel_id u16 | flags u16 | source_seq u64 |
//!   capture_ts_us u64 | x u16 | y u16 | w u16 | h u16 | reserved u16) 30 bytes each
//! payload_len u32
//! payload (raw RGB8 rows, or one JPEG image)
//! ```
//!
//! Stream info (type `0x02`, sent once when a session opens):
//! `epoch_monotonic_us u64 | tick_period_us u32`.

use std::io::{self, Read};

use thiserror::Error;

use crate::channel_model::ChannelId;
use crate::compositor::{ChannelProvenance, FusedFrame, Rect};

pub const PREAMBLE: &[u8; 4] = b"FUS1";
pub const MSG_FRAME: u8 = 0x01;
pub const MSG_STREAM_INFO: u8 = 0x02;
pub const PREAMBLE_LEN: usize = 5;
pub const FIXED_HEADER_LEN: usize = 25;
pub const DESCRIPTOR_LEN: usize = 30;
pub const PAYLOAD_LEN_FIELD: usize = 4;
const STREAM_INFO_LEN: usize = 12;
const FLAG_STALE: u16 = 1;
/// Upper bound on accepted payloads (a 65535x65535 RGB canvas would not fit anyway).
pub const MAX_PAYLOAD: usize = 256 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PixelFormat {
    Raw = 0,
    Jpeg = 1,
}

impl TryFrom<u8> for PixelFormat {
    type Error = WireError;

    fn try_from(v: u8) -> Result<Self, WireError> {
        match v {
            0 => Ok(Self::Raw),
            1 => Ok(Self::Jpeg),
            other => Err(WireError::BadPixelFormat(other)),
        }
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("bad preamble {0:?}")]
    BadPreamble([u8; 4]),
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("unknown pixel format {0}")]
    BadPixelFormat(u8),
    #[error("payload of {0} bytes exceeds limit")]
    TooLarge(usize),
    #[error("raw payload of {got} bytes does not match {width}x{height}")]
    PayloadMismatch { got: usize, width: u16, height: u16 },
    #[error("EncodeFailure: {0}")]
    EncodeFailure(String),
    #[error("frame does not fit the wire format: {0}")]
    Unrepresentable(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WireDescriptor {
    pub channel_id: u16,
    pub flags: u16,
    pub source_seq: u64,
    pub capture_ts_us: u64,
    pub x: u16,
    pub y: u16,
    pub w: u16,
    pub h: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireFrameHeader {
    pub frame_seq: u64,
    pub composite_ts_us: u64,
    pub width: u16,
    pub height: u16,
    pub pixel_format: PixelFormat,
    pub channels: Vec<WireDescriptor>,
    pub payload_len: u32,
}

impl WireFrameHeader {
    /// Bytes after the preamble up to and including `payload_len`.
    pub fn encoded_len(channel_count: usize) -> usize {
        FIXED_HEADER_LEN + DESCRIPTOR_LEN * channel_count + PAYLOAD_LEN_FIELD
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamInfo {
    pub epoch_mono_us: u64,
    pub tick_period_us: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireMessage {
    Frame { header: WireFrameHeader, payload: Vec<u8> },
    StreamInfo(StreamInfo),
}

fn u16_field(v: u32, what: &str) -> Result<u16, WireError> {
    u16::try_from(v).map_err(|_| WireError::Unrepresentable(format!("{what} = {v}")))
}

pub fn encode_stream_info(info: StreamInfo) -> Vec<u8> {
    let mut out = Vec::with_capacity(PREAMBLE_LEN + STREAM_INFO_LEN);
    out.extend_from_slice(PREAMBLE);
    out.push(MSG_STREAM_INFO);
    out.extend_from_slice(&info.epoch_mono_us.to_le_bytes());
    out.extend_from_slice(&info.tick_period_us.to_le_bytes());
    out
}

pub fn encode_jpeg(f: &FusedFrame, quality: u8) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::new();
    let mut enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, quality);
    enc.encode(&f.pixels, f.width, f.height, image::ExtendedColorType::Rgb8)
        .map_err(|e| WireError::EncodeFailure(e.to_string()))?;
    Ok(out)
}

/// Serialize `f` as a FUSE/1 frame message.
pub fn encode_frame(f: &FusedFrame, format: PixelFormat) -> Result<Vec<u8>, WireError> {
    encode_frame_with(f, format, 80)
}

pub fn encode_frame_with(f: &FusedFrame, format: PixelFormat, jpeg_quality: u8) -> Result<Vec<u8>, WireError> {
    let jpeg;
    let payload: &[u8] = match format {
        PixelFormat::Raw => &f.pixels,
        PixelFormat::Jpeg => {
            jpeg = encode_jpeg(f, jpeg_quality)?;
            &jpeg
        }
    };
    frame_message(f, format, payload)
}

/// Assemble a frame message around an already encoded payload.
pub fn frame_message(f: &FusedFrame, format: PixelFormat, payload: &[u8]) -> Result<Vec<u8>, WireError> {
    let n = f.channels.len();
    let width = u16_field(f.width, "width")?;
    let height = u16_field(f.height, "height")?;
    let count = u16_field(n as u32, "channel_count")?;
    let payload_len = u32::try_from(payload.len()).map_err(|_| WireError::TooLarge(payload.len()))?;

    let mut out = Vec::with_capacity(PREAMBLE_LEN + WireFrameHeader::encoded_len(n) + payload.len());
    out.extend_from_slice(PREAMBLE);
    out.push(MSG_FRAME);
    out.extend_from_slice(&f.frame_seq.to_le_bytes());
    out.extend_from_slice(&f.composite_ts.to_le_bytes());
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&height.to_le_bytes());
    out.push(format as u8);
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for c in &f.channels {
        out.extend_from_slice(&(c.channel.0 as u16).to_le_bytes());
        let flags = if c.stale { FLAG_STALE } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&c.source_seq.to_le_bytes());
        out.extend_from_slice(&c.capture_ts.to_le_bytes());
        for v in [c.rect.x, c.rect.y, c.rect.w, c.rect.h] {
            out.extend_from_slice(&u16_field(v, "rect")?.to_le_bytes());
        }
        out.extend_from_slice(&0u16.to_le_bytes());
    }
    out.extend_from_slice(&payload_len.to_le_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

fn read_array<const N: usize>(r: &mut impl Read) -> io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u16(r: &mut impl Read) -> io::Result<u16> {
    read_array::<2>(r).map(u16::from_le_bytes)
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    read_array::<4>(r).map(u32::from_le_bytes)
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    read_array::<8>(r).map(u64::from_le_bytes)
}

/// Read one message. Returns `Ok(None)` on a clean end of stream before a preamble.
pub fn read_message(r: &mut impl Read) -> Result<Option<WireMessage>, WireError> {
    let mut preamble = [0u8; PREAMBLE_LEN];
    let mut got = 0;
    while got < PREAMBLE_LEN {
        match r.read(&mut preamble[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(k) => got += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let magic: [u8; 4] = preamble[..4].try_into().unwrap();
    if &magic != PREAMBLE {
        return Err(WireError::BadPreamble(magic));
    }
    match preamble[4] {
        MSG_FRAME => read_frame_body(r).map(Some),
        MSG_STREAM_INFO => Ok(Some(WireMessage::StreamInfo(StreamInfo {
            epoch_mono_us: read_u64(r)?,
            tick_period_us: read_u32(r)?,
        }))),
        other => Err(WireError::UnknownType(other)),
    }
}

fn read_frame_body(r: &mut impl Read) -> Result<WireMessage, WireError> {
    let frame_seq = read_u64(r)?;
    let composite_ts_us = read_u64(r)?;
    let width = read_u16(r)?;
    let height = read_u16(r)?;
    let pixel_format = PixelFormat::try_from(read_array::<1>(r)?[0])?;
    let count = read_u16(r)?;
    let _reserved = read_u16(r)?;
    let mut channels = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let channel_id = read_u16(r)?;
        let flags = read_u16(r)?;
        let source_seq = read_u64(r)?;
        let capture_ts_us = read_u64(r)?;
        let (x, y, w, h) = (read_u16(r)?, read_u16(r)?, read_u16(r)?, read_u16(r)?);
        let _reserved = read_u16(r)?;
        channels.push(WireDescriptor { channel_id, flags, source_seq, capture_ts_us, x, y, w, h });
    }
    let payload_len = read_u32(r)?;
    if payload_len as usize > MAX_PAYLOAD {
        return Err(WireError::TooLarge(payload_len as usize));
    }
    let mut payload = vec![0u8; payload_len as usize];
    r.read_exact(&mut payload)?;
    Ok(WireMessage::Frame {
        header: WireFrameHeader { frame_seq, composite_ts_us, width, height, pixel_format, channels, payload_len },
        payload,
    })
}

/// Decode one message from a byte slice; returns the message and bytes consumed.
pub fn decode_message(bytes: &[u8]) -> Result<(WireMessage, usize), WireError> {
    let mut cursor = io::Cursor::new(bytes);
    let msg = read_message(&mut cursor)?.ok_or_else(|| io::Error::from(io::ErrorKind::UnexpectedEof))?;
    Ok((msg, cursor.position() as usize))
}

/// Rebuild a fused frame from a decoded frame message, decoding JPEG payloads.
pub fn to_fused_frame(header: &WireFrameHeader, payload: Vec<u8>) -> Result<FusedFrame, WireError> {
    let (w, h) = (header.width as u32, header.height as u32);
    let pixels = match header.pixel_format {
        PixelFormat::Raw => {
            if payload.len() != (w * h * 3) as usize {
                return Err(WireError::PayloadMismatch { got: payload.len(), width: header.width, height: header.height });
            }
            payload
        }
        PixelFormat::Jpeg => image::load_from_memory_with_format(&payload, image::ImageFormat::Jpeg)
            .map_err(|e| WireError::EncodeFailure(e.to_string()))?
            .into_rgb8()
            .into_raw(),
    };
    let channels = header
        .channels
        .iter()
        .map(|d| {
            let channel = u8::try_from(d.channel_id)
                .map(ChannelId)
                .map_err(|_| WireError::Unrepresentable(format!("channel id {}", d.channel_id)))?;
            Ok(ChannelProvenance {
                channel,
                source_seq: d.source_seq,
                capture_ts: d.capture_ts_us,
                rect: Rect::new(d.x as u32, d.y as u32, d.w as u32, d.h as u32),
                stale: d.flags & FLAG_STALE != 0,
            })
        })
        .collect::<Result<Vec<_>, WireError>>()?;
    Ok(FusedFrame {
        frame_seq: header.frame_seq,
        composite_ts: header.composite_ts_us,
        width: w,
        height: h,
        pixels,
        channels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(n: usize, w: u32, h: u32) -> FusedFrame {
        FusedFrame {
            frame_seq: 42,
            composite_ts: 1_000_000,
            width: w,
            height: h,
            pixels: (0..w * h * 3).map(|i| (i % 251) as u8).collect(),
            channels: (0..n)
                .map(|i| ChannelProvenance {
                    channel: ChannelId(i as u8),
                    source_seq: 1000 + i as u64,
                    capture_ts: 999_000 + i as u64,
                    rect: Rect::new(i as u32, 0, 1, 1),
                    stale: i % 2 == 1,
                })
                .collect(),
        }
    }

    #[test]
    fn raw_size_formula() {
        let bytes = encode_frame(&frame(2, 1280, 720), PixelFormat::Raw).unwrap();
        assert_eq!(bytes.len(), 5 + 25 + 60 + 4 + 2_764_800);
    }

    #[test]
    fn zero_channel_header() {
        let f = frame(0, 4, 2);
        let bytes = encode_frame(&f, PixelFormat::Raw).unwrap();
        assert_eq!(bytes.len(), 5 + 25 + 4 + 24);
        assert_eq!(u16::from_le_bytes([bytes[26], bytes[27]]), 0);
        let (msg, used) = decode_message(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        let WireMessage::Frame { header, payload } = msg else { panic!("not a frame") };
        assert!(header.channels.is_empty());
        assert_eq!(to_fused_frame(&header, payload).unwrap(), f);
    }

    #[test]
    fn field_offsets() {
        let bytes = encode_frame(&frame(1, 2, 1), PixelFormat::Raw).unwrap();
        assert_eq!(&bytes[..5], b"FUS1\x01");
        assert_eq!(u64::from_le_bytes(bytes[5..13].try_into().unwrap()), 42);
        assert_eq!(u64::from_le_bytes(bytes[13..21].try_into().unwrap()), 1_000_000);
        assert_eq!(u16::from_le_bytes([bytes[21], bytes[22]]), 2);
        assert_eq!(u16::from_le_bytes([bytes[23], bytes[24]]), 1);
        assert_eq!(bytes[25], 0);
        assert_eq!(u16::from_le_bytes([bytes[26], bytes[27]]), 1);
        let d = 30;
        assert_eq!(u64::from_le_bytes(bytes[d + 4..d + 12].try_into().unwrap()), 1000);
        let len_at = 30 + 30;
        assert_eq!(u32::from_le_bytes(bytes[len_at..len_at + 4].try_into().unwrap()), 6);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(decode_message(b"NOPE\x01"), Err(WireError::BadPreamble(_))));
        assert!(matches!(decode_message(b"FUS1\x09"), Err(WireError::UnknownType(9))));
        let mut bytes = encode_frame(&frame(1, 2, 1), PixelFormat::Raw).unwrap();
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(decode_message(&bytes), Err(WireError::Io(_))));
    }

    #[test]
    fn stream_info_round_trip() {
        let info = StreamInfo { epoch_mono_us: 123_456_789, tick_period_us: 33_333 };
        let bytes = encode_stream_info(info);
        assert_eq!(decode_message(&bytes).unwrap(), (WireMessage::StreamInfo(info), 17));
    }

    #[test]
    fn jpeg_payload_decodes_to_same_size() {
        let f = frame(3, 64, 32);
        let bytes = encode_frame(&f, PixelFormat::Jpeg).unwrap();
        let (WireMessage::Frame { header, payload }, _) = decode_message(&bytes).unwrap() else { panic!() };
        assert_eq!(header.pixel_format, PixelFormat::Jpeg);
        assert_eq!(&payload[..2], &[0xFF, 0xD8]);
        let back = to_fused_frame(&header, payload).unwrap();
        assert_eq!((back.width, back.height, back.pixels.len()), (64, 32, 64 * 32 * 3));
        assert_eq!(back.channels, f.channels);
    }

    proptest! {
        #[test]
        fn header_len_formula(n in 0usize..=256) {
            let f = frame(n, 3, 2);
            let bytes = encode_frame(&f, PixelFormat::Raw).unwrap();
            prop_assert_eq!(bytes.len(), PREAMBLE_LEN + WireFrameHeader::encoded_len(n) + 18);
            prop_assert_eq!(WireFrameHeader::encoded_len(n), 25 + 30 * n + 4);
        }
    }
}
