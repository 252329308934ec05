//! Training chunk extraction: random crops, the 50% instance inclusion rule
//! and greedy selection of the most-covering views.

use rand::Rng;

use crate::error::{Error, Result};
use crate::fusion::project_voxel;

use super::{CameraView, InstanceGT, Scene};

/// One training sample: a chunk region of a scene, the ground truth clipped
/// into chunk coordinates and the indices of the selected color views.
#[derive(Clone, Debug)]
pub struct TrainingChunk {
    pub origin: [usize; 3],
    pub extents: [usize; 3],
    /// Instances with at least half their complete mask inside the chunk,
    /// translated to chunk coordinates and clipped to its bounds.
    pub gt: Vec<InstanceGT>,
    pub view_indices: Vec<usize>,
}

/// Clip an instance to `[origin, origin+extents)` and translate it into
/// chunk coordinates. `None` when nothing remains.
fn clip_instance(
    inst: &InstanceGT,
    origin: [usize; 3],
    extents: [usize; 3],
) -> Option<InstanceGT> {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for i in 0..3 {
        lo[i] = inst.lo[i].max(origin[i]);
        hi[i] = (inst.lo[i] + inst.dims[i]).min(origin[i] + extents[i]);
        if lo[i] >= hi[i] {
            return None;
        }
    }
    let dims = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let mut mask = vec![false; dims[0] * dims[1] * dims[2]];
    let mut any = false;
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let g = [lo[0] + x, lo[1] + y, lo[2] + z];
                let local = [g[0] - inst.lo[0], g[1] - inst.lo[1], g[2] - inst.lo[2]];
                if inst.mask_at(local) {
                    mask[(x * dims[1] + y) * dims[2] + z] = true;
                    any = true;
                }
            }
        }
    }
    if !any {
        return None;
    }
    Some(InstanceGT {
        class_id: inst.class_id,
        lo: [lo[0] - origin[0], lo[1] - origin[1], lo[2] - origin[2]],
        dims,
        mask,
    })
}

/// Number of complete-mask voxels inside the chunk region.
fn voxels_inside(inst: &InstanceGT, origin: [usize; 3], extents: [usize; 3]) -> usize {
    inst.occupied_voxels()
        .filter(|v| (0..3).all(|i| v[i] >= origin[i] && v[i] < origin[i] + extents[i]))
        .count()
}

/// Visible object-surface voxels inside the chunk: mask voxels with a free
/// 6-neighbor in the full scene occupancy.
pub fn chunk_surface_voxels(
    scene: &Scene,
    included: &[&InstanceGT],
    origin: [usize; 3],
    extents: [usize; 3],
) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for inst in included {
        for v in inst.occupied_voxels() {
            if (0..3).any(|i| v[i] < origin[i] || v[i] >= origin[i] + extents[i]) {
                continue;
            }
            let p = [v[0] as i64, v[1] as i64, v[2] as i64];
            let free = [
                [p[0] - 1, p[1], p[2]],
                [p[0] + 1, p[1], p[2]],
                [p[0], p[1] - 1, p[2]],
                [p[0], p[1] + 1, p[2]],
                [p[0], p[1], p[2] - 1],
                [p[0], p[1], p[2] + 1],
            ]
            .iter()
            .any(|&q| !scene.occupied(q));
            if free {
                out.push(v);
            }
        }
    }
    out
}

/// Surface voxels of `surf` visible in `view` (projected, in-image and
/// passing the occlusion check).
pub fn visible_in_view(surf: &[[usize; 3]], view: &CameraView, voxel_size: f64) -> Vec<bool> {
    surf.iter().map(|&v| project_voxel(v, view, voxel_size).observed).collect()
}

/// Cut a random chunk: uniform origin, the >= 50% complete-geometry
/// inclusion rule (ties included), and greedy selection of at most
/// `max_views` views by marginal visible-surface coverage.
pub fn crop_chunk(
    scene: &Scene,
    views: &[CameraView],
    chunk_extents: [usize; 3],
    rng: &mut impl Rng,
    max_views: usize,
) -> Result<TrainingChunk> {
    for i in 0..3 {
        if scene.extents[i] < chunk_extents[i] {
            return Err(Error::Invalid(format!(
                "scene extents {:?} smaller than chunk {:?}",
                scene.extents, chunk_extents
            )));
        }
    }
    let origin = [
        rng.gen_range(0..=scene.extents[0] - chunk_extents[0]),
        rng.gen_range(0..=scene.extents[1] - chunk_extents[1]),
        rng.gen_range(0..=scene.extents[2] - chunk_extents[2]),
    ];
    crop_chunk_at(scene, views, chunk_extents, origin, max_views)
}

/// Deterministic variant with an explicit origin.
pub fn crop_chunk_at(
    scene: &Scene,
    views: &[CameraView],
    chunk_extents: [usize; 3],
    origin: [usize; 3],
    max_views: usize,
) -> Result<TrainingChunk> {
    let mut included_src: Vec<&InstanceGT> = Vec::new();
    let mut gt = Vec::new();
    for inst in &scene.gt {
        let inside = voxels_inside(inst, origin, chunk_extents);
        let total = inst.voxel_count();
        if total == 0 || (inside as f64) < 0.5 * total as f64 {
            continue;
        }
        if let Some(clipped) = clip_instance(inst, origin, chunk_extents) {
            included_src.push(inst);
            gt.push(clipped);
        }
    }

    let surf = chunk_surface_voxels(scene, &included_src, origin, chunk_extents);
    let visible: Vec<Vec<bool>> =
        views.iter().map(|v| visible_in_view(&surf, v, scene.voxel_size)).collect();

    let mut covered = vec![false; surf.len()];
    let mut chosen: Vec<usize> = Vec::new();
    while chosen.len() < max_views {
        let mut best_view = usize::MAX;
        let mut best_gain = 0usize;
        for (vi, vis) in visible.iter().enumerate() {
            if chosen.contains(&vi) {
                continue;
            }
            let gain = vis.iter().zip(covered.iter()).filter(|(&v, &c)| v && !c).count();
            if gain > best_gain {
                best_gain = gain;
                best_view = vi;
            }
        }
        if best_view == usize::MAX || best_gain == 0 {
            break;
        }
        for (c, &v) in covered.iter_mut().zip(visible[best_view].iter()) {
            *c = *c || v;
        }
        chosen.push(best_view);
    }

    Ok(TrainingChunk { origin, extents: chunk_extents, gt, view_indices: chosen })
}
