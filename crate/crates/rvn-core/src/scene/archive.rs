//! Scene archive file: magic "RVNS", version u32, voxel_size f64, grid
//! extents 3 x u64, instance table (class_id u32, box 6 x f64 center+size,
//! run-length-encoded mask bits), then view table (intrinsics 4 x f64,
//! extrinsics 12 x f64 row-major world-from-camera, image extents 2 x u32,
//! f32 depth payload, f32 RGB payload). All integers little-endian.
//!
//! RLE encoding: u32 run count, then u32 run lengths alternating free /
//! occupied, starting with free.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{CameraView, InstanceGT, Scene, OWNER_NONE};

pub const MAGIC: &[u8; 4] = b"RVNS";
pub const VERSION: u32 = 1;

pub(crate) fn rle_encode(bits: &[bool]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for &b in bits {
        if b == current {
            len += 1;
        } else {
            runs.push(len);
            current = b;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub(crate) fn rle_decode(runs: &[u32], n: usize) -> Result<Vec<bool>> {
    let mut bits = Vec::with_capacity(n);
    let mut current = false;
    for &r in runs {
        for _ in 0..r {
            bits.push(current);
        }
        current = !current;
    }
    if bits.len() != n {
        return Err(Error::Format(format!("RLE decodes to {} bits, wanted {n}", bits.len())));
    }
    Ok(bits)
}

pub fn save_scene(path: &Path, scene: &Scene, views: &[CameraView]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&scene.voxel_size.to_le_bytes())?;
    for &e in &scene.extents {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    w.write_all(&(scene.gt.len() as u32).to_le_bytes())?;
    for inst in &scene.gt {
        w.write_all(&(inst.class_id as u32).to_le_bytes())?;
        let b = inst.bbox();
        for v in b.center.iter().chain(b.size.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        let runs = rle_encode(&inst.mask);
        w.write_all(&(runs.len() as u32).to_le_bytes())?;
        for r in runs {
            w.write_all(&r.to_le_bytes())?;
        }
    }
    w.write_all(&(views.len() as u32).to_le_bytes())?;
    for v in views {
        for x in [v.fx, v.fy, v.cx, v.cy] {
            w.write_all(&x.to_le_bytes())?;
        }
        // Rows of [R | t].
        for row in 0..3 {
            for col in 0..3 {
                w.write_all(&v.rotation[row][col].to_le_bytes())?;
            }
            w.write_all(&v.translation[row].to_le_bytes())?;
        }
        w.write_all(&(v.width as u32).to_le_bytes())?;
        w.write_all(&(v.height as u32).to_le_bytes())?;
        for d in &v.depth {
            w.write_all(&d.to_le_bytes())?;
        }
        for c in &v.color {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a scene archive. The returned scene's occupancy is the union of the
/// instance masks; the room shell only exists at generation/render time.
pub fn load_scene(path: &Path) -> Result<(Scene, Vec<CameraView>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad scene magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported scene version {version}")));
    }
    let voxel_size = read_f64(&mut r)?;
    if voxel_size <= 0.0 {
        return Err(Error::Format("nonpositive voxel size".into()));
    }
    let mut extents = [0usize; 3];
    for e in &mut extents {
        *e = read_u64(&mut r)? as usize;
    }
    let n_inst = read_u32(&mut r)? as usize;
    let mut gt = Vec::with_capacity(n_inst);
    for _ in 0..n_inst {
        let class_id = read_u32(&mut r)? as usize;
        let mut b = [0.0f64; 6];
        for v in &mut b {
            *v = read_f64(&mut r)?;
        }
        // Boxes are lattice-aligned; recover integer bounds by rounding.
        let mut lo = [0usize; 3];
        let mut dims = [0usize; 3];
        for i in 0..3 {
            let l = (b[i] - b[3 + i] / 2.0).round();
            let d = b[3 + i].round();
            if l < 0.0 || d <= 0.0 {
                return Err(Error::Format(format!("instance box out of lattice: {b:?}")));
            }
            lo[i] = l as usize;
            dims[i] = d as usize;
        }
        let n_runs = read_u32(&mut r)? as usize;
        let mut runs = Vec::with_capacity(n_runs);
        for _ in 0..n_runs {
            runs.push(read_u32(&mut r)?);
        }
        let mask = rle_decode(&runs, dims[0] * dims[1] * dims[2])?;
        if !mask.iter().any(|&m| m) {
            return Err(Error::Format("instance mask is empty".into()));
        }
        gt.push(InstanceGT { class_id, lo, dims, mask });
    }
    let n_views = read_u32(&mut r)? as usize;
    let mut views = Vec::with_capacity(n_views);
    for _ in 0..n_views {
        let fx = read_f64(&mut r)?;
        let fy = read_f64(&mut r)?;
        let cx = read_f64(&mut r)?;
        let cy = read_f64(&mut r)?;
        let mut rotation = [[0.0; 3]; 3];
        let mut translation = [0.0; 3];
        for row in 0..3 {
            for col in 0..3 {
                rotation[row][col] = read_f64(&mut r)?;
            }
            translation[row] = read_f64(&mut r)?;
        }
        let width = read_u32(&mut r)? as usize;
        let height = read_u32(&mut r)? as usize;
        let mut depth = Vec::with_capacity(width * height);
        for _ in 0..width * height {
            depth.push(read_f32(&mut r)?);
        }
        let mut color = Vec::with_capacity(3 * width * height);
        for _ in 0..3 * width * height {
            color.push(read_f32(&mut r)?);
        }
        let view = CameraView { fx, fy, cx, cy, rotation, translation, width, height, depth, color };
        view.validate()?;
        views.push(view);
    }

    // Rebuild occupancy and owners from the instance masks.
    let n = extents[0] * extents[1] * extents[2];
    let mut occupancy = vec![false; n];
    let mut owner = vec![OWNER_NONE; n];
    for (idx, inst) in gt.iter().enumerate() {
        for v in inst.occupied_voxels() {
            if v.iter().zip(extents.iter()).any(|(a, b)| a >= b) {
                return Err(Error::Format("instance voxel outside grid".into()));
            }
            let flat = (v[0] * extents[1] + v[1]) * extents[2] + v[2];
            occupancy[flat] = true;
            owner[flat] = idx as u16;
        }
    }
    Ok((Scene { extents, voxel_size, gt, occupancy, owner }, views))
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

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}
