//! "VXSG" volume files.
//!
//! ```text
//! b"VXSG" | version u16 | kind u8 (0 image, 1 label) | D, H, W u32
//! | spacing z, y, x f32 | origin z, y, x f32 | D·H·W f32 values (x fastest)
//! ```
//!
//! All multi-byte fields are little-endian; there is no compression.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{VolumeGrid, VolumeKind};
use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 4] = b"VXSG";
pub const VOLUME_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 12 + 12 + 12;

pub fn encode_volume(v: &VolumeGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * v.values.len());
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    out.push(match v.kind {
        VolumeKind::Image => 0,
        VolumeKind::Label => 1,
    });
    for e in v.extents {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for f in v.spacing.iter().chain(&v.origin) {
        out.extend_from_slice(&f.to_le_bytes());
    }
    for f in &v.values {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn f32_at(b: &[u8], at: usize) -> f32 {
    f32::from_bits(u32_at(b, at))
}

pub fn decode_volume(bytes: &[u8]) -> Result<VolumeGrid> {
    if bytes.len() < 4 || &bytes[..4] != VOLUME_MAGIC {
        let got = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(Error::Format(format!("bad magic {got:?}, expected \"VXSG\"")));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "truncated header: {} bytes, need {HEADER_LEN}",
            bytes.len()
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VOLUME_VERSION {
        return Err(Error::Format(format!("unsupported volume version {version}, expected {VOLUME_VERSION}")));
    }
    let kind = match bytes[6] {
        0 => VolumeKind::Image,
        1 => VolumeKind::Label,
        k => return Err(Error::Format(format!("unknown volume kind {k}"))),
    };
    let extents = [0, 1, 2].map(|i| u32_at(bytes, 7 + 4 * i) as usize);
    let spacing = [0, 1, 2].map(|i| f32_at(bytes, 19 + 4 * i));
    let origin = [0, 1, 2].map(|i| f32_at(bytes, 31 + 4 * i));
    let n = extents
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format("extents overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != n * 4 {
        return Err(Error::Format(format!(
            "payload holds {} bytes, extents {extents:?} need {}",
            payload.len(),
            n * 4
        )));
    }
    let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    VolumeGrid::new(kind, extents, spacing, origin, values).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_volume(v: &VolumeGrid, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_volume(v))?;
    w.flush()?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<VolumeGrid> {
    decode_volume(&std::fs::read(path)?)
}
