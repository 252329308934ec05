//! TSDF volumetric fusion of posed depth maps and the differentiable
//! back-projection of 2D features into the voxel grid.

pub mod backproject;
mod file;

pub use backproject::{backproject_features, FeatureVolume, ViewPooling};
pub use file::{load_tsdf, save_tsdf};

use crate::error::{Error, Result};
use crate::scene::CameraView;

/// Truncation band of the signed distance field, in voxels.
pub const TRUNCATION_VOXELS: u32 = 3;

/// Occlusion tolerance for voxel-in-view visibility, in voxel units.
pub const OCCLUSION_TOL_VOXELS: f64 = 2.0;

/// Voxel grid of truncated signed distances (normalized to [-1, 1] by the
/// truncation band) and per-voxel fusion weights. Unobserved voxels hold the
/// empty-space default +1 at weight 0.
#[derive(Clone, Debug)]
pub struct TsdfVolume {
    pub extents: [usize; 3],
    pub voxel_size: f64,
    pub truncation_voxels: u32,
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
}

impl TsdfVolume {
    pub fn empty(extents: [usize; 3], voxel_size: f64) -> Self {
        let n = extents[0] * extents[1] * extents[2];
        Self {
            extents,
            voxel_size,
            truncation_voxels: TRUNCATION_VOXELS,
            values: vec![1.0; n],
            weights: vec![0.0; n],
        }
    }

    pub fn index(&self, v: [usize; 3]) -> usize {
        (v[0] * self.extents[1] + v[1]) * self.extents[2] + v[2]
    }

    /// Crop a sub-volume `[lo, lo+dims)`.
    pub fn crop(&self, lo: [usize; 3], dims: [usize; 3]) -> TsdfVolume {
        let mut out = TsdfVolume::empty(dims, self.voxel_size);
        out.truncation_voxels = self.truncation_voxels;
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    let src = self.index([lo[0] + x, lo[1] + y, lo[2] + z]);
                    let dst = out.index([x, y, z]);
                    out.values[dst] = self.values[src];
                    out.weights[dst] = self.weights[src];
                }
            }
        }
        out
    }

    /// Voxels adjacent to a sign change between observed voxels.
    pub fn zero_crossing_voxels(&self) -> Vec<[usize; 3]> {
        let [nx, ny, nz] = self.extents;
        let mut out = Vec::new();
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let i = self.index([x, y, z]);
                    if self.weights[i] <= 0.0 {
                        continue;
                    }
                    let v = self.values[i];
                    let mut crossing = v == 0.0;
                    let mut check = |nb: [usize; 3]| {
                        let j = self.index(nb);
                        if self.weights[j] > 0.0 && self.values[j] * v < 0.0 {
                            crossing = true;
                        }
                    };
                    if x + 1 < nx {
                        check([x + 1, y, z]);
                    }
                    if y + 1 < ny {
                        check([x, y + 1, z]);
                    }
                    if z + 1 < nz {
                        check([x, y, z + 1]);
                    }
                    if x > 0 {
                        check([x - 1, y, z]);
                    }
                    if y > 0 {
                        check([x, y - 1, z]);
                    }
                    if z > 0 {
                        check([x, y, z - 1]);
                    }
                    if crossing {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }

    /// Observed near-surface voxels: weight > 0 and |value| < 1.
    pub fn surface_occupancy(&self) -> Vec<bool> {
        self.values
            .iter()
            .zip(self.weights.iter())
            .map(|(&v, &w)| w > 0.0 && v.abs() < 1.0)
            .collect()
    }
}

/// Result of projecting a voxel center into a view.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedVoxel {
    /// Continuous pixel coordinates.
    pub u: f64,
    pub v: f64,
    /// Camera-space depth in meters.
    pub z: f64,
    /// Integer pixel when inside the image with positive depth.
    pub pixel: Option<[usize; 2]>,
    /// True when additionally the depth map confirms the voxel is observed
    /// (|depth(p) - z| within the occlusion tolerance).
    pub observed: bool,
}

/// Pinhole projection of a voxel center with visibility checks.
pub fn project_voxel(voxel: [usize; 3], view: &CameraView, voxel_size: f64) -> ProjectedVoxel {
    let p = [
        (voxel[0] as f64 + 0.5) * voxel_size,
        (voxel[1] as f64 + 0.5) * voxel_size,
        (voxel[2] as f64 + 0.5) * voxel_size,
    ];
    let (u, v, z) = view.project(p);
    let mut out = ProjectedVoxel { u, v, z, pixel: None, observed: false };
    if z <= 0.0 || !u.is_finite() || !v.is_finite() {
        return out;
    }
    let (px, py) = (u.floor(), v.floor());
    if px < 0.0 || py < 0.0 || px >= view.width as f64 || py >= view.height as f64 {
        return out;
    }
    let pixel = [px as usize, py as usize];
    out.pixel = Some(pixel);
    let d = view.depth_at(pixel[0], pixel[1]);
    if d > 0.0 && (d - z).abs() <= OCCLUSION_TOL_VOXELS * voxel_size {
        out.observed = true;
    }
    out
}

/// Weighted-average TSDF fusion of posed depth maps over the grid
/// `[0, extents)`. Signed distances are measured along the camera ray
/// (depth(p) - z), normalized by the truncation band and clamped to [-1, 1];
/// voxels more than one band behind the surface are left untouched.
pub fn fuse_tsdf(
    views: &[CameraView],
    extents: [usize; 3],
    voxel_size: f64,
) -> Result<TsdfVolume> {
    if views.is_empty() {
        return Err(Error::Invalid("fusion needs at least one view".into()));
    }
    let mut vol = TsdfVolume::empty(extents, voxel_size);
    let trunc = vol.truncation_voxels as f64 * voxel_size;
    for x in 0..extents[0] {
        for y in 0..extents[1] {
            for z in 0..extents[2] {
                let i = vol.index([x, y, z]);
                let mut value = 0.0f64;
                let mut weight = 0.0f64;
                for view in views {
                    let pr = project_voxel([x, y, z], view, voxel_size);
                    let Some(pixel) = pr.pixel else { continue };
                    let d = view.depth_at(pixel[0], pixel[1]);
                    if d <= 0.0 {
                        continue;
                    }
                    let sdf = (d - pr.z) / trunc;
                    if sdf < -1.0 {
                        // Far behind the observed surface: no carving.
                        continue;
                    }
                    let clamped = sdf.min(1.0);
                    value = (value * weight + clamped) / (weight + 1.0);
                    weight += 1.0;
                }
                if weight > 0.0 {
                    vol.values[i] = value;
                    vol.weights[i] = weight;
                }
            }
        }
    }
    Ok(vol)
}
