//! Binary file formats and configuration parsing.
//!
//! All integers and floats are little-endian.
//!
//! `.pvol`: magic `PVOL1\0`, then `u32` X, Y, Z, C, then `C*Z*Y*X` `f32`
//! values in `((c*Z + z)*Y + y)*X + x` order. A 2x2x2 single-channel volume
//! is `6 + 16 + 32 = 54` bytes.
//!
//! `.pmsk`: magic `PMSK1\0`, the same header, then one byte per voxel per
//! channel, each 0 or 1.
//!
//! Checkpoints (`SGCK1\0`) are described in [`checkpoint`].

pub mod checkpoint;
pub mod config;
mod reader;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Mask, Volume};

pub use checkpoint::{Checkpoint, OptimizerGroup, ScheduleState};
pub use config::Config;
use reader::Reader;

pub const PVOL_MAGIC: &[u8; 6] = b"PVOL1\0";
pub const PMSK_MAGIC: &[u8; 6] = b"PMSK1\0";

fn header(out: &mut Vec<u8>, magic: &[u8; 6], channels: usize, dims: [usize; 3]) {
    out.extend_from_slice(magic);
    let [z, y, x] = dims;
    for v in [x, y, z, channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
}

fn read_header(r: &mut Reader, magic: &[u8; 6]) -> Result<(usize, [usize; 3])> {
    r.magic(magic)?;
    let x = r.u32()? as usize;
    let y = r.u32()? as usize;
    let z = r.u32()? as usize;
    let c = r.u32()? as usize;
    if x == 0 || y == 0 || z == 0 || c == 0 {
        return Err(r.error("zero extent in header"));
    }
    Ok((c, [z, y, x]))
}

pub fn encode_pvol(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(22 + 4 * v.data.len());
    header(&mut out, PVOL_MAGIC, v.channels, v.dims);
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_pvol(bytes: &[u8]) -> Result<Volume> {
    let mut r = Reader::new(bytes, "pvol");
    let (c, dims) = read_header(&mut r, PVOL_MAGIC)?;
    let n = c * dims.iter().product::<usize>();
    let data = r.f32s(n)?;
    r.finish()?;
    Volume::new(c, dims, data)
}

pub fn encode_pmsk(m: &Mask) -> Vec<u8> {
    let mut out = Vec::with_capacity(22 + m.data.len());
    header(&mut out, PMSK_MAGIC, m.channels, m.dims);
    out.extend_from_slice(&m.data);
    out
}

pub fn decode_pmsk(bytes: &[u8]) -> Result<Mask> {
    let mut r = Reader::new(bytes, "pmsk");
    let (c, dims) = read_header(&mut r, PMSK_MAGIC)?;
    let n = c * dims.iter().product::<usize>();
    let start = r.offset();
    let data = r.bytes(n)?.to_vec();
    if let Some(i) = data.iter().position(|&b| b > 1) {
        return Err(Error::Format {
            what: "pmsk",
            offset: (start + i) as u64,
            msg: format!("mask byte {} is not 0 or 1", data[i]),
        });
    }
    r.finish()?;
    Mask::new(c, dims, data)
}

pub fn write_pvol(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    Ok(fs::write(path, encode_pvol(v))?)
}

pub fn read_pvol(path: impl AsRef<Path>) -> Result<Volume> {
    decode_pvol(&fs::read(path)?)
}

pub fn write_pmsk(path: impl AsRef<Path>, m: &Mask) -> Result<()> {
    Ok(fs::write(path, encode_pmsk(m))?)
}

pub fn read_pmsk(path: impl AsRef<Path>) -> Result<Mask> {
    decode_pmsk(&fs::read(path)?)
}

#[cfg(test)]
mod tests;
