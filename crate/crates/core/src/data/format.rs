//! `LTG1` grid files.
//!
//! Layout: magic `LTG1`, then little-endian u32 height, width and channels,
//! then `height * width * channels` little-endian f32 values, row-major with
//! the channel index varying fastest.

use std::path::Path;

use super::{ImageGrid, ValueRange};
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"LTG1";
pub const HEADER_LEN: usize = 16;

/// Grid file contents before any range validation.
#[derive(Clone, Debug, PartialEq)]
pub struct RawGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f32>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GridFormatError {
    #[error("bad magic bytes {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("dimensions {0}x{1}x{2} overflow the addressable size")]
    DimensionOverflow(u32, u32, u32),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("zero-sized dimension {0}x{1}x{2}")]
    Empty(u32, u32, u32),
}

pub fn encode(grid: &RawGrid) -> Vec<u8> {
    assert_eq!(grid.values.len(), grid.height * grid.width * grid.channels);
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * grid.values.len());
    out.extend_from_slice(&MAGIC);
    for dim in [grid.height, grid.width, grid.channels] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in &grid.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<RawGrid, GridFormatError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(GridFormatError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(GridFormatError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(GridFormatError::BadMagic(magic));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (h, w, c) = (word(0), word(1), word(2));
    if h == 0 || w == 0 || c == 0 {
        return Err(GridFormatError::Empty(h, w, c));
    }
    let payload = (h as usize)
        .checked_mul(w as usize)
        .and_then(|n| n.checked_mul(c as usize))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or(GridFormatError::DimensionOverflow(h, w, c))?;
    if bytes.len() < payload {
        return Err(GridFormatError::Truncated {
            expected: payload,
            found: bytes.len(),
        });
    }
    if bytes.len() > payload {
        return Err(GridFormatError::TrailingBytes(bytes.len() - payload));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(RawGrid {
        height: h as usize,
        width: w as usize,
        channels: c as usize,
        values,
    })
}

pub fn write_raw(path: impl AsRef<Path>, grid: &RawGrid) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, encode(grid)).map_err(|e| Error::io(path, e))
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<RawGrid> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn write_grid(path: impl AsRef<Path>, grid: &ImageGrid) -> Result<()> {
    write_raw(
        path,
        &RawGrid {
            height: grid.height(),
            width: grid.width(),
            channels: 1,
            values: grid.values().to_vec(),
        },
    )
}

fn read_single_channel(path: &Path, range: ValueRange) -> Result<ImageGrid> {
    let raw = read_raw(path)?;
    if raw.channels != 1 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            reason: format!("expected 1 channel, found {}", raw.channels),
        });
    }
    ImageGrid::new(raw.height, raw.width, raw.values, range)
}

/// Reads an MRI slice; values must lie in [-1, 1].
pub fn read_grid(path: impl AsRef<Path>) -> Result<ImageGrid> {
    read_single_channel(path.as_ref(), ValueRange::Intensity)
}

/// Reads a binary mask; values must be 0 or 1.
pub fn read_mask(path: impl AsRef<Path>) -> Result<ImageGrid> {
    read_single_channel(path.as_ref(), ValueRange::Binary)
}
