//! TSDF volume file: magic "RVNV", version u32, extents 3 x u64, voxel_size
//! f64, truncation u32, f32 value payload, f32 weight payload;
//! little-endian throughout.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::TsdfVolume;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RVNV";
pub const VERSION: u32 = 1;

pub fn save_tsdf(path: &Path, vol: &TsdfVolume) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for &e in &vol.extents {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    w.write_all(&vol.voxel_size.to_le_bytes())?;
    w.write_all(&vol.truncation_voxels.to_le_bytes())?;
    for &v in &vol.values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    for &v in &vol.weights {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_tsdf(path: &Path) -> Result<TsdfVolume> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad TSDF magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported TSDF version {version}")));
    }
    let mut extents = [0usize; 3];
    let mut b8 = [0u8; 8];
    for e in &mut extents {
        r.read_exact(&mut b8)?;
        *e = u64::from_le_bytes(b8) as usize;
    }
    r.read_exact(&mut b8)?;
    let voxel_size = f64::from_le_bytes(b8);
    r.read_exact(&mut b4)?;
    let truncation_voxels = u32::from_le_bytes(b4);
    let n = extents[0] * extents[1] * extents[2];
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b4)?;
        values.push(f32::from_le_bytes(b4) as f64);
    }
    let mut weights = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b4)?;
        weights.push(f32::from_le_bytes(b4) as f64);
    }
    Ok(TsdfVolume { extents, voxel_size, truncation_voxels, values, weights })
}
