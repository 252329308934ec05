//! Procedural synthetic scenes: labeled objects with complete per-voxel
//! occupancy inside a walled room, plus posed RGB-D views rendered from them.

pub mod archive;
pub mod chunk;
pub mod render;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Box3;

/// Names of the shape classes, index = class id.
pub const CLASS_NAMES: [&str; 4] = ["box", "cylinder", "lshape", "table"];

/// Owner tag for voxels occupied by the room shell.
pub const OWNER_ROOM: u16 = u16::MAX - 1;


/// Owner tag for free voxels.
pub const OWNER_NONE: u16 = u16::MAX;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SceneConfig {
    pub seed: u64,
    /// Grid extents in voxels (x, y up, z).
    pub extents: [usize; 3],
    /// Voxel edge length in meters.
    pub voxel_size: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub n_classes: usize,
    /// Room wall/floor thickness in voxels.
    pub wall_thickness: usize,
    /// Views rendered per scene.
    pub n_views: usize,
    pub image_width: usize,
    pub image_height: usize,
    /// Std-dev of additive depth noise in meters (0 disables the hook).
    pub depth_noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            extents: [64, 32, 64],
            voxel_size: 0.0469,
            min_objects: 2,
            max_objects: 5,
            n_classes: 4,
            wall_thickness: 2,
            n_views: 12,
            image_width: 64,
            image_height: 48,
            depth_noise: 0.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.voxel_size <= 0.0 {
            return Err(Error::Config("voxel_size must be positive".into()));
        }
        if self.n_classes < 2 || self.n_classes > CLASS_NAMES.len() {
            return Err(Error::Config(format!(
                "n_classes must be in 2..={}",
                CLASS_NAMES.len()
            )));
        }
        if self.extents.iter().any(|&e| e < 32) {
            return Err(Error::Config("grid extents must be at least 32 per axis".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("object count range is inverted".into()));
        }
        if self.n_views == 0 || self.image_width == 0 || self.image_height == 0 {
            return Err(Error::Config("render dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Ground-truth instance: class, lattice-aligned box and the dense complete
/// occupancy mask over the box extent (row-major x, y, z).
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceGT {
    pub class_id: usize,
    /// Minimum voxel corner of the mask region.
    pub lo: [usize; 3],
    /// Mask extents in voxels.
    pub dims: [usize; 3],
    pub mask: Vec<bool>,
}

impl InstanceGT {
    pub fn bbox(&self) -> Box3<f64> {
        Box3::from_voxel_bounds(self.lo, [
            self.lo[0] + self.dims[0],
            self.lo[1] + self.dims[1],
            self.lo[2] + self.dims[2],
        ])
    }

    pub fn mask_at(&self, local: [usize; 3]) -> bool {
        self.mask[(local[0] * self.dims[1] + local[1]) * self.dims[2] + local[2]]
    }

    pub fn voxel_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Iterate global voxel indices of occupied mask cells.
    pub fn occupied_voxels(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let dims = self.dims;
        let lo = self.lo;
        self.mask.iter().enumerate().filter(|(_, &b)| b).map(move |(i, _)| {
            let x = i / (dims[1] * dims[2]);
            let y = (i / dims[2]) % dims[1];
            let z = i % dims[2];
            [lo[0] + x, lo[1] + y, lo[2] + z]
        })
    }
}

/// A generated scene: full complete-geometry occupancy (room shell plus all
/// objects), per-voxel owner tags and the ground-truth instance list. The
/// world-from-grid transform is a pure scale: world = voxel index *
/// voxel_size, origin at zero.
#[derive(Clone, Debug)]
pub struct Scene {
    pub extents: [usize; 3],
    pub voxel_size: f64,
    pub gt: Vec<InstanceGT>,
    pub occupancy: Vec<bool>,
    /// Instance index, OWNER_ROOM or OWNER_NONE per voxel.
    pub owner: Vec<u16>,
}

impl Scene {
    pub fn voxel_index(&self, v: [usize; 3]) -> usize {
        (v[0] * self.extents[1] + v[1]) * self.extents[2] + v[2]
    }

    pub fn occupied(&self, v: [i64; 3]) -> bool {
        if v[0] < 0
            || v[1] < 0
            || v[2] < 0
            || v[0] >= self.extents[0] as i64
            || v[1] >= self.extents[1] as i64
            || v[2] >= self.extents[2] as i64
        {
            return false;
        }
        self.occupancy[(v[0] as usize * self.extents[1] + v[1] as usize) * self.extents[2]
            + v[2] as usize]
    }

    /// True surface voxels: occupied with at least one free 6-neighbor
    /// inside the grid. Faces against the grid boundary (wall backs, the
    /// floor underside) are not observable and do not count.
    pub fn surface_voxels(&self) -> Vec<[usize; 3]> {
        let inside = |q: [i64; 3]| {
            q[0] >= 0
                && q[1] >= 0
                && q[2] >= 0
                && q[0] < self.extents[0] as i64
                && q[1] < self.extents[1] as i64
                && q[2] < self.extents[2] as i64
        };
        let mut out = Vec::new();
        for x in 0..self.extents[0] {
            for y in 0..self.extents[1] {
                for z in 0..self.extents[2] {
                    if !self.occupancy[self.voxel_index([x, y, z])] {
                        continue;
                    }
                    let p = [x as i64, y as i64, z as i64];
                    let neighbors = [
                        [p[0] - 1, p[1], p[2]],
                        [p[0] + 1, p[1], p[2]],
                        [p[0], p[1] - 1, p[2]],
                        [p[0], p[1] + 1, p[2]],
                        [p[0], p[1], p[2] - 1],
                        [p[0], p[1], p[2] + 1],
                    ];
                    if neighbors.iter().any(|&q| inside(q) && !self.occupied(q)) {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }
}

/// Pinhole camera with a rigid world-from-camera pose and rendered images.
/// Camera axes: +z forward, +x right, +y image-down. Depth images store
/// camera-space z in meters, 0 marking invalid pixels.
#[derive(Clone, Debug)]
pub struct CameraView {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Rotation part of world-from-camera (columns are camera axes in world).
    pub rotation: [[f64; 3]; 3],
    /// Camera origin in world coordinates (meters).
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
    /// Row-major [height][width], meters, 0 = invalid.
    pub depth: Vec<f32>,
    /// Channel-major [3][height][width], values in [0, 1].
    pub color: Vec<f32>,
}

impl CameraView {
    /// World point (meters) to (pixel u, pixel v, camera z in meters).
    pub fn project(&self, p: [f64; 3]) -> (f64, f64, f64) {
        let d = [
            p[0] - self.translation[0],
            p[1] - self.translation[1],
            p[2] - self.translation[2],
        ];
        // camera = R^T * (p - t)
        let cam = [
            self.rotation[0][0] * d[0] + self.rotation[1][0] * d[1] + self.rotation[2][0] * d[2],
            self.rotation[0][1] * d[0] + self.rotation[1][1] * d[1] + self.rotation[2][1] * d[2],
            self.rotation[0][2] * d[0] + self.rotation[1][2] * d[1] + self.rotation[2][2] * d[2],
        ];
        (self.fx * cam[0] / cam[2] + self.cx, self.fy * cam[1] / cam[2] + self.cy, cam[2])
    }

    /// Camera-space point for pixel (u, v) at depth z, in world coordinates.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> [f64; 3] {
        let cam = [(u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z];
        [
            self.rotation[0][0] * cam[0] + self.rotation[0][1] * cam[1]
                + self.rotation[0][2] * cam[2]
                + self.translation[0],
            self.rotation[1][0] * cam[0] + self.rotation[1][1] * cam[1]
                + self.rotation[1][2] * cam[2]
                + self.translation[1],
            self.rotation[2][0] * cam[0] + self.rotation[2][1] * cam[1]
                + self.rotation[2][2] * cam[2]
                + self.translation[2],
        ]
    }

    pub fn depth_at(&self, px: usize, py: usize) -> f64 {
        self.depth[py * self.width + px] as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Invalid("camera focal lengths must be positive".into()));
        }
        if self.depth.iter().any(|&d| d < 0.0 || !d.is_finite()) {
            return Err(Error::Invalid("depth image must be nonnegative and finite".into()));
        }
        // Orthonormality of the rotation part to 1e-9.
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for (ri, rj) in r.iter().map(|row| row[i]).zip(r.iter().map(|row| row[j])) {
                    dot += ri * rj;
                }
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return Err(Error::Invalid("camera rotation is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }
}

/// Per-class size ranges in voxels: ((x lo, x hi), (y lo, y hi), (z lo, z hi)).
fn class_dims(class_id: usize, rng: &mut impl Rng) -> [usize; 3] {
    match class_id {
        0 => [rng.gen_range(5..=10), rng.gen_range(4..=9), rng.gen_range(5..=10)],
        1 => {
            let d = rng.gen_range(5..=9);
            [d, rng.gen_range(6..=12), d]
        }
        2 => [rng.gen_range(8..=13), rng.gen_range(5..=10), rng.gen_range(8..=13)],
        _ => {
            // Elongated table: the long axis exceeds the big-anchor split.
            let long = rng.gen_range(25..=30);
            let short = rng.gen_range(10..=14);
            let (dx, dz) = if rng.gen_bool(0.5) { (long, short) } else { (short, long) };
            [dx, rng.gen_range(8..=12), dz]
        }
    }
}

/// Dense complete mask for one object in its local box, row-major (x, y, z).
fn class_mask(class_id: usize, dims: [usize; 3], rng: &mut impl Rng) -> Vec<bool> {
    let [dx, dy, dz] = dims;
    let idx = |x: usize, y: usize, z: usize| (x * dy + y) * dz + z;
    let mut m = vec![false; dx * dy * dz];
    match class_id {
        0 => m.fill(true),
        1 => {
            let cx = dx as f64 / 2.0;
            let cz = dz as f64 / 2.0;
            let r = dx.min(dz) as f64 / 2.0;
            for x in 0..dx {
                for z in 0..dz {
                    let ddx = x as f64 + 0.5 - cx;
                    let ddz = z as f64 + 0.5 - cz;
                    if ddx * ddx + ddz * ddz <= r * r {
                        for y in 0..dy {
                            m[idx(x, y, z)] = true;
                        }
                    }
                }
            }
        }
        2 => {
            let ax = ((dx as f64) * rng.gen_range(0.4..0.6)).round().max(2.0) as usize;
            let az = ((dz as f64) * rng.gen_range(0.4..0.6)).round().max(2.0) as usize;
            for x in 0..dx {
                for z in 0..dz {
                    if x < ax || z < az {
                        for y in 0..dy {
                            m[idx(x, y, z)] = true;
                        }
                    }
                }
            }
        }
        _ => {
            let top = 2.min(dy);
            let leg = 2.min(dx).min(dz);
            for x in 0..dx {
                for z in 0..dz {
                    for y in dy - top..dy {
                        m[idx(x, y, z)] = true;
                    }
                }
            }
            for &(lx, lz) in
                &[(0, 0), (dx - leg, 0), (0, dz - leg), (dx - leg, dz - leg)]
            {
                for x in lx..lx + leg {
                    for z in lz..lz + leg {
                        for y in 0..dy - top {
                            m[idx(x, y, z)] = true;
                        }
                    }
                }
            }
        }
    }
    m
}

/// Generate a labeled scene. Deterministic in the config (including its
/// seed); placement failures after bounded retries drop the object rather
/// than producing an invalid scene, and instances never interpenetrate.
pub fn generate_scene(config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let [nx, ny, nz] = config.extents;
    let wall = config.wall_thickness;
    let mut occupancy = vec![false; nx * ny * nz];
    let mut owner = vec![OWNER_NONE; nx * ny * nz];
    let vidx = |x: usize, y: usize, z: usize| (x * ny + y) * nz + z;

    // Room shell: floor slab plus four full-height walls, open top.
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let in_floor = y < wall;
                let in_wall = x < wall || x >= nx - wall || z < wall || z >= nz - wall;
                if in_floor || in_wall {
                    occupancy[vidx(x, y, z)] = true;
                    owner[vidx(x, y, z)] = OWNER_ROOM;
                }
            }
        }
    }

    let n_objects = rng.gen_range(config.min_objects..=config.max_objects);
    let mut gt: Vec<InstanceGT> = Vec::new();
    let mut placed_regions: Vec<([usize; 3], [usize; 3])> = Vec::new();

    for _ in 0..n_objects {
        let class_id = rng.gen_range(0..config.n_classes);
        let mut placed = false;
        for _retry in 0..40 {
            let dims = class_dims(class_id, &mut rng);
            // Keep a clear corridor along the walls and wide slots between
            // objects so every surface stays observable from inside.
            let margin = wall + 4;
            if nx < dims[0] + 2 * margin || nz < dims[2] + 2 * margin || ny < dims[1] + wall + 1 {
                continue;
            }
            let lo = [
                rng.gen_range(margin..=nx - margin - dims[0]),
                wall,
                rng.gen_range(margin..=nz - margin - dims[2]),
            ];
            let hi = [lo[0] + dims[0], lo[1] + dims[1], lo[2] + dims[2]];
            let gap = 4;
            let clash = placed_regions.iter().any(|&(plo, phi)| {
                (0..3).all(|i| lo[i] < phi[i] + gap && plo[i] < hi[i] + gap)
            });
            if clash {
                continue;
            }
            let mask = class_mask(class_id, dims, &mut rng);
            let inst = InstanceGT { class_id, lo, dims, mask };
            let inst_idx = gt.len() as u16;
            for v in inst.occupied_voxels() {
                occupancy[vidx(v[0], v[1], v[2])] = true;
                owner[vidx(v[0], v[1], v[2])] = inst_idx;
            }
            placed_regions.push((lo, hi));
            gt.push(inst);
            placed = true;
            break;
        }
        let _ = placed;
    }

    Ok(Scene { extents: config.extents, voxel_size: config.voxel_size, gt, occupancy, owner })
}
