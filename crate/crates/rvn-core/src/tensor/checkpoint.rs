//! Parameter checkpoint file.
//!
//! Layout, all integers little-endian:
//!   magic "RVNT", format version u32, metadata length u32 + UTF-8 JSON
//!   metadata, then per-parameter records until EOF. Each record:
//!   name length u32 + UTF-8 name, rank u32, extents u64 each, raw
//!   little-endian f64 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::optim::ParamSet;
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"RVNT";
pub const VERSION: u32 = 1;

pub fn save<T: Scalar>(path: &Path, meta_json: &str, params: &ParamSet<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta = meta_json.as_bytes();
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta)?;
    for (_, name, value) in params.iter() {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&(value.rank() as u32).to_le_bytes())?;
        for &e in value.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in value.data() {
            w.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One parameter record read back from a checkpoint.
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub struct Checkpoint {
    pub meta_json: String,
    pub records: Vec<Record>,
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let meta_json = String::from_utf8(meta)
        .map_err(|e| Error::Format(format!("checkpoint metadata is not UTF-8: {e}")))?;

    let mut records = Vec::new();
    loop {
        let mut len4 = [0u8; 4];
        match r.read(&mut len4)? {
            0 => break,
            4 => {}
            n => {
                // A short read can still be a partial u32; finish it or fail.
                let mut rest = len4;
                r.read_exact(&mut rest[n..])
                    .map_err(|_| Error::Format("truncated parameter record".into()))?;
                len4 = rest;
            }
        }
        let name_len = u32::from_le_bytes(len4) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Format(format!("parameter name is not UTF-8: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        records.push(Record { name, shape, data });
    }
    Ok(Checkpoint { meta_json, records })
}

/// Overwrite matching parameters of `params` with checkpoint records.
/// Every parameter must be present with the right shape.
pub fn restore<T: Scalar>(ckpt: &Checkpoint, params: &mut ParamSet<T>) -> Result<()> {
    let by_name: std::collections::HashMap<&str, &Record> =
        ckpt.records.iter().map(|r| (r.name.as_str(), r)).collect();
    let ids: Vec<_> = params.iter().map(|(id, name, value)| {
        (id, name.to_string(), value.shape().to_vec())
    }).collect();
    for (id, name, shape) in ids {
        let rec = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint is missing parameter '{name}'")))?;
        if rec.shape != shape {
            return Err(Error::Shape(format!(
                "checkpoint parameter '{name}' has shape {:?}, model wants {shape:?}",
                rec.shape
            )));
        }
        let data: Vec<T> = rec.data.iter().map(|&v| T::of_f64(v)).collect();
        params.set_value(id, Tensor::new(&shape, data)?)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
