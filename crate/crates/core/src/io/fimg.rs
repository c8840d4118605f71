//! FIMG: a minimal self-describing float raster format.
//!
//! Layout (little endian): magic `FIMG`, u32 version = 1, u32 width, u32
//! height, u32 channels, u8 channel-semantics tag, then
//! `width * height * channels` f32 values, row-major, channel-interleaved.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FIMG";
const VERSION: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 + 4 + 4 + 4 + 1;

/// What the channels of a raster mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelSemantics {
    TocMean,
    TocLogVar,
    Normal,
    Mask,
    Depth,
}

impl ChannelSemantics {
    pub fn tag(self) -> u8 {
        match self {
            ChannelSemantics::TocMean => 0,
            ChannelSemantics::TocLogVar => 1,
            ChannelSemantics::Normal => 2,
            ChannelSemantics::Mask => 3,
            ChannelSemantics::Depth => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ChannelSemantics::TocMean,
            1 => ChannelSemantics::TocLogVar,
            2 => ChannelSemantics::Normal,
            3 => ChannelSemantics::Mask,
            4 => ChannelSemantics::Depth,
            _ => return None,
        })
    }

    pub fn channels(self) -> u32 {
        match self {
            ChannelSemantics::Mask | ChannelSemantics::Depth => 1,
            _ => 3,
        }
    }
}

/// In-memory float raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub semantics: ChannelSemantics,
    /// Row-major, channel-interleaved.
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(width: u32, height: u32, semantics: ChannelSemantics, fill: f32) -> Self {
        let channels = semantics.channels();
        Raster {
            width,
            height,
            channels,
            semantics,
            data: vec![fill; (width * height * channels) as usize],
        }
    }
}

pub fn write_fimg(path: &Path, raster: &Raster) -> Result<()> {
    let expect = (raster.width * raster.height * raster.channels) as usize;
    assert_eq!(raster.data.len(), expect, "raster payload length mismatch");
    let mut bytes = Vec::with_capacity(HEADER_LEN as usize + raster.data.len() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&raster.width.to_le_bytes());
    bytes.extend_from_slice(&raster.height.to_le_bytes());
    bytes.extend_from_slice(&raster.channels.to_le_bytes());
    bytes.push(raster.semantics.tag());
    for v in &raster.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_fimg(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |reason: String, offset: u64| Error::Format {
        path: path.to_path_buf(),
        reason,
        offset,
    };
    if bytes.len() < HEADER_LEN as usize {
        return Err(fmt(
            format!("file too short for header ({} bytes)", bytes.len()),
            0,
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fmt(
            format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4])),
            0,
        ));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(fmt(format!("unknown version {version}"), 4));
    }
    let width = u32_at(8);
    let height = u32_at(12);
    let channels = u32_at(16);
    let tag = bytes[20];
    let semantics = ChannelSemantics::from_tag(tag)
        .ok_or_else(|| fmt(format!("unknown channel-semantics tag {tag}"), 20))?;
    let expect = width as u64 * height as u64 * channels as u64 * 4;
    let actual = bytes.len() as u64 - HEADER_LEN;
    if actual != expect {
        return Err(fmt(
            format!("payload length mismatch: expected {expect} bytes, got {actual}"),
            HEADER_LEN,
        ));
    }
    let data = bytes[HEADER_LEN as usize..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Raster {
        width,
        height,
        channels,
        semantics,
        data,
    })
}
