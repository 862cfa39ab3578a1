//! ANYT feature container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   4 bytes  "ANYT"
//! version u8       1
//! dtype   u8       1 = float32
//! ndim    u8       3
//! dims    3 x u32  height, width, channels
//! payload h*w*c x f32, row-major, channel-fastest
//! ```
//!
//! No padding, no checksum. Writes are deterministic, so identical maps
//! produce byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::FeatureMap;
use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"ANYT";
const VERSION: u8 = 1;
const DTYPE_F32: u8 = 1;
const NDIM: u8 = 3;

pub fn write_feature_map(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&MAGIC)?;
    out.write_all(&[VERSION, DTYPE_F32, NDIM])?;
    for dim in [map.height(), map.width(), map.channels()] {
        out.write_all(&(dim as u32).to_le_bytes())?;
    }
    for v in map.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let mut reader = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::format(format!(
            "bad magic bytes {:?}, expected \"ANYT\"",
            magic
        )));
    }

    let mut head = [0u8; 3];
    reader.read_exact(&mut head)?;
    let [version, dtype, ndim] = head;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported container version {version}, expected {VERSION}"
        )));
    }
    if dtype != DTYPE_F32 {
        return Err(Error::Unsupported(format!(
            "dtype code {dtype} not supported, only 1 (float32)"
        )));
    }
    if ndim != NDIM {
        return Err(Error::format(format!("ndim {ndim} not supported, expected 3")));
    }

    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let mut buf = [0u8; 4];
        reader.read_exact(&mut buf)?;
        *d = u32::from_le_bytes(buf) as usize;
    }
    let [height, width, channels] = dims;
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::invalid(format!(
            "container declares zero-sized dimension {height}x{width}x{channels}"
        )));
    }

    let count = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::format("dimension product overflows"))?;
    let mut payload = vec![0u8; count * 4];
    reader.read_exact(&mut payload)?;

    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(Error::format("trailing bytes after payload"));
    }

    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    FeatureMap::new(height, width, channels, data)
}
