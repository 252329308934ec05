//! Depth and color rendering of scenes by ray casting the occupancy grid.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CameraView, Scene, SceneConfig, OWNER_ROOM};

/// Per-class albedo plus a room color.
fn albedo(owner: u16, gt_class: impl Fn(u16) -> usize) -> [f32; 3] {
    if owner == OWNER_ROOM {
        return [0.60, 0.60, 0.62];
    }
    match gt_class(owner) {
        0 => [0.85, 0.25, 0.20],
        1 => [0.20, 0.60, 0.85],
        2 => [0.30, 0.80, 0.30],
        _ => [0.85, 0.70, 0.20],
    }
}

/// Cast one ray through the grid (grid units). `dir` need not be normalized;
/// the returned t is in multiples of `dir`. Returns (t_entry, hit voxel,
/// entry axis) or None.
fn raycast(
    scene: &Scene,
    origin: [f64; 3],
    dir: [f64; 3],
) -> Option<(f64, [usize; 3], usize)> {
    let ext = scene.extents;
    let mut voxel = [
        origin[0].floor() as i64,
        origin[1].floor() as i64,
        origin[2].floor() as i64,
    ];
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for i in 0..3 {
        if dir[i] > 0.0 {
            step[i] = 1;
            t_max[i] = ((voxel[i] + 1) as f64 - origin[i]) / dir[i];
            t_delta[i] = 1.0 / dir[i];
        } else if dir[i] < 0.0 {
            step[i] = -1;
            t_max[i] = (voxel[i] as f64 - origin[i]) / dir[i];
            t_delta[i] = -1.0 / dir[i];
        }
    }
    let max_steps = ext[0] + ext[1] + ext[2] + 3;
    let mut axis;
    for _ in 0..max_steps {
        // Advance across the nearest voxel boundary.
        axis = 0;
        if t_max[1] < t_max[axis] {
            axis = 1;
        }
        if t_max[2] < t_max[axis] {
            axis = 2;
        }
        let t_entry = t_max[axis];
        voxel[axis] += step[axis];
        t_max[axis] += t_delta[axis];
        if voxel[axis] < 0 || voxel[axis] >= ext[axis] as i64 {
            return None;
        }
        if scene.occupied(voxel) {
            return Some((t_entry, [voxel[0] as usize, voxel[1] as usize, voxel[2] as usize], axis));
        }
    }
    None
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// World-from-camera rotation looking from `pos` toward `target` (+z
/// forward, +y image-down), both in grid units.
fn look_at(pos: [f64; 3], target: [f64; 3]) -> [[f64; 3]; 3] {
    let f = normalize([target[0] - pos[0], target[1] - pos[1], target[2] - pos[2]]);
    let up = if f[1].abs() > 0.98 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let x = normalize(cross(up, f));
    let y = cross(f, x);
    // Columns are the camera axes expressed in world coordinates.
    [[x[0], y[0], f[0]], [x[1], y[1], f[1]], [x[2], y[2], f[2]]]
}

/// Render `n_views` posed RGB-D views of the scene. Cameras sit in free
/// space looking at the populated interior; placement retries are bounded
/// with a deterministic center-orbit fallback.
pub fn render_views(scene: &Scene, config: &SceneConfig, n_views: usize, seed: u64) -> Vec<CameraView> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let [nx, ny, nz] = scene.extents;
    let (w, h) = (config.image_width, config.image_height);
    let fx = 0.87 * w as f64;
    let fy = fx;
    let cx = w as f64 / 2.0;
    let cy = h as f64 / 2.0;
    let wall = config.wall_thickness as f64;

    let fract = |v: f64| v - v.floor();
    let mut views = Vec::with_capacity(n_views);
    for vi in 0..n_views {
        // Even views walk a deterministic ring (golden-angle azimuths,
        // heights sweeping the whole band, targets sweeping low to high
        // across the room) so walls, floor and object flanks all get seen.
        // Odd views are sampled in free interior space.
        let mut pos = None;
        if vi % 2 == 1 {
            for _ in 0..50 {
                let cand = [
                    rng.gen_range(wall + 1.5..nx as f64 - wall - 1.5),
                    rng.gen_range(0.45 * ny as f64..0.88 * ny as f64),
                    rng.gen_range(wall + 1.5..nz as f64 - wall - 1.5),
                ];
                let v = [cand[0] as i64, cand[1] as i64, cand[2] as i64];
                if !scene.occupied(v) {
                    pos = Some(cand);
                    break;
                }
            }
        }
        let pos = pos.unwrap_or_else(|| {
            let i = vi as f64;
            let ang = i * 2.399963 + 0.7;
            let r = 0.36 * (nx.min(nz) as f64 - 2.0 * wall);
            let x = nx as f64 / 2.0 + r * ang.cos();
            let z = nz as f64 / 2.0 + r * ang.sin();
            // Lift out of any object the ring lands in.
            let mut y = (0.30 + 0.55 * fract(i * 0.415)) * ny as f64;
            while y < 0.92 * ny as f64 && scene.occupied([x as i64, y as i64, z as i64]) {
                y += 1.0;
            }
            [x, y, z]
        });
        let target = if vi % 2 == 0 {
            let i = vi as f64;
            let ang = i * 2.399963 + 0.7 + std::f64::consts::PI + (fract(i * 0.239) - 0.5) * 1.4;
            let tr = (0.08 + 0.38 * fract(i * 0.777)) * nx.min(nz) as f64;
            // Cycle aim height through low / mid / high bands so wall bases
            // and top bands both get direct looks.
            let band = [0.08, 0.45, 0.92][vi / 2 % 3];
            [
                nx as f64 / 2.0 + tr * ang.cos(),
                wall + band * (ny as f64 - wall),
                nz as f64 / 2.0 + tr * ang.sin(),
            ]
        } else {
            [
                nx as f64 / 2.0 + rng.gen_range(-0.2..0.2) * nx as f64,
                wall + 1.0 + rng.gen_range(0.0..0.3) * ny as f64,
                nz as f64 / 2.0 + rng.gen_range(-0.2..0.2) * nz as f64,
            ]
        };
        let rotation = look_at(pos, target);

        let mut depth = vec![0.0f32; w * h];
        let mut color = vec![0.0f32; 3 * w * h];
        for py in 0..h {
            for px in 0..w {
                let dir_cam = [
                    (px as f64 + 0.5 - cx) / fx,
                    (py as f64 + 0.5 - cy) / fy,
                    1.0,
                ];
                // World direction; t along it equals camera-space z.
                let dir = [
                    rotation[0][0] * dir_cam[0] + rotation[0][1] * dir_cam[1] + rotation[0][2],
                    rotation[1][0] * dir_cam[0] + rotation[1][1] * dir_cam[1] + rotation[1][2],
                    rotation[2][0] * dir_cam[0] + rotation[2][1] * dir_cam[1] + rotation[2][2],
                ];
                if let Some((t, voxel, axis)) = raycast(scene, pos, dir) {
                    if t <= 0.0 {
                        continue;
                    }
                    let mut z = t * scene.voxel_size;
                    if config.depth_noise > 0.0 {
                        // Box-Muller; the hook defaults off.
                        let u1: f64 = rng.gen_range(1e-12..1.0);
                        let u2: f64 = rng.gen_range(0.0..1.0);
                        z += config.depth_noise
                            * (-2.0 * u1.ln()).sqrt()
                            * (std::f64::consts::TAU * u2).cos();
                        z = z.max(1e-4);
                    }
                    depth[py * w + px] = z as f32;
                    let owner = scene.owner[scene.voxel_index(voxel)];
                    let alb = albedo(owner, |o| scene.gt[o as usize].class_id);
                    let mut normal = [0.0f64; 3];
                    normal[axis] = -dir[axis].signum();
                    let light = normalize([0.5, -0.8, 0.3]);
                    let lambert =
                        (normal[0] * light[0] + normal[1] * light[1] + normal[2] * light[2]).abs();
                    let shade = (0.35 + 0.65 * lambert) as f32;
                    for c in 0..3 {
                        color[c * w * h + py * w + px] = (alb[c] * shade).clamp(0.0, 1.0);
                    }
                }
            }
        }
        views.push(CameraView {
            fx,
            fy,
            cx,
            cy,
            rotation,
            // Camera origin in meters.
            translation: [
                pos[0] * scene.voxel_size,
                pos[1] * scene.voxel_size,
                pos[2] * scene.voxel_size,
            ],
            width: w,
            height: h,
            depth,
            color,
        });
    }
    views
}
