//! Axis-aligned 3D boxes in voxel coordinates.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box: center and per-axis size, both in voxel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3<T = f64> {
    pub center: [T; 3],
    pub size: [T; 3],
}

impl<T: Float + std::fmt::Debug> Box3<T> {
    pub fn new(center: [T; 3], size: [T; 3]) -> Self {
        Self { center, size }
    }

    /// Box covering voxel indices `[lo, hi)`.
    pub fn from_voxel_bounds(lo: [usize; 3], hi: [usize; 3]) -> Self {
        let half = T::from(0.5).unwrap();
        let mut center = [T::zero(); 3];
        let mut size = [T::zero(); 3];
        for i in 0..3 {
            let l = T::from(lo[i]).unwrap();
            let h = T::from(hi[i]).unwrap();
            center[i] = (l + h) * half;
            size[i] = h - l;
        }
        Self { center, size }
    }

    pub fn min_corner(&self) -> [T; 3] {
        let half = T::from(0.5).unwrap();
        [
            self.center[0] - self.size[0] * half,
            self.center[1] - self.size[1] * half,
            self.center[2] - self.size[2] * half,
        ]
    }

    pub fn max_corner(&self) -> [T; 3] {
        let half = T::from(0.5).unwrap();
        [
            self.center[0] + self.size[0] * half,
            self.center[1] + self.size[1] * half,
            self.center[2] + self.size[2] * half,
        ]
    }

    pub fn volume(&self) -> T {
        self.size[0] * self.size[1] * self.size[2]
    }

    pub fn is_valid(&self) -> bool {
        self.size.iter().all(|s| *s > T::zero()) && self.center.iter().all(|c| c.is_finite())
    }

    /// Validate sizes are strictly positive.
    pub fn check(&self) -> Result<()> {
        if !self.is_valid() {
            return Err(Error::Invalid(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    /// Intersection volume over union volume; 0 for disjoint boxes.
    pub fn iou(&self, other: &Self) -> T {
        let (amin, amax) = (self.min_corner(), self.max_corner());
        let (bmin, bmax) = (other.min_corner(), other.max_corner());
        let mut inter = T::one();
        for i in 0..3 {
            let lo = amin[i].max(bmin[i]);
            let hi = amax[i].min(bmax[i]);
            if hi <= lo {
                return T::zero();
            }
            inter = inter * (hi - lo);
        }
        let union = self.volume() + other.volume() - inter;
        if union <= T::zero() {
            T::zero()
        } else {
            inter / union
        }
    }

    /// Clip to the grid `[0, extents)`; `None` if nothing remains.
    pub fn clipped_to(&self, extents: [usize; 3]) -> Option<Self> {
        let (amin, amax) = (self.min_corner(), self.max_corner());
        let half = T::from(0.5).unwrap();
        let mut center = [T::zero(); 3];
        let mut size = [T::zero(); 3];
        for i in 0..3 {
            let lo = amin[i].max(T::zero());
            let hi = amax[i].min(T::from(extents[i]).unwrap());
            if hi <= lo {
                return None;
            }
            center[i] = (lo + hi) * half;
            size[i] = hi - lo;
        }
        Some(Self { center, size })
    }

    /// Integer voxel footprint on a grid: every voxel whose center lies
    /// inside the box, clamped to `[0, extents)` and never empty as long as
    /// the clipped box is nonempty. Returns `(lo, hi)` with `hi` exclusive.
    pub fn voxel_footprint(&self, extents: [usize; 3]) -> Option<([usize; 3], [usize; 3])> {
        let clipped = self.clipped_to(extents)?;
        let (bmin, bmax) = (clipped.min_corner(), clipped.max_corner());
        let half = T::from(0.5).unwrap();
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for i in 0..3 {
            let ext = extents[i] as isize;
            // Voxel v has center v + 0.5; v inside iff bmin - 0.5 <= v < bmax - 0.5.
            let l = (bmin[i] - half).ceil().to_f64().unwrap() as isize;
            let h = (bmax[i] - half).ceil().to_f64().unwrap() as isize;
            let l = l.clamp(0, ext - 1);
            let h = h.clamp(l + 1, ext);
            lo[i] = l as usize;
            hi[i] = h as usize;
        }
        Some((lo, hi))
    }

    /// Footprint on a grid downscaled by `stride` (feature-map coordinates).
    pub fn voxel_footprint_at_stride(
        &self,
        extents: [usize; 3],
        stride: usize,
    ) -> Option<([usize; 3], [usize; 3])> {
        let s = T::from(stride).unwrap();
        let scaled = Box3 {
            center: [self.center[0] / s, self.center[1] / s, self.center[2] / s],
            size: [self.size[0] / s, self.size[1] / s, self.size[2] / s],
        };
        scaled.voxel_footprint(extents)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_identity_and_disjoint() {
        let a = Box3::new([1.0, 1.0, 1.0], [2.0, 2.0, 2.0]);
        assert!((a.iou(&a) - 1.0).abs() < 1e-15);
        let b = Box3::new([10.0, 10.0, 10.0], [2.0, 2.0, 2.0]);
        assert_eq!(a.iou(&b), 0.0);
    }

    #[test]
    fn iou_offset_cubes() {
        // [0,2)^3 vs [1,3)^3: intersection 1, union 15.
        let a = Box3::new([1.0, 1.0, 1.0], [2.0, 2.0, 2.0]);
        let b = Box3::new([2.0, 2.0, 2.0], [2.0, 2.0, 2.0]);
        assert!((a.iou(&b) - 1.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn iou_symmetric() {
        let a = Box3::new([3.2, 4.1, 5.0], [2.0, 3.0, 1.5]);
        let b = Box3::new([3.9, 3.6, 5.2], [1.0, 2.0, 2.5]);
        assert!((a.iou(&b) - b.iou(&a)).abs() < 1e-15);
        assert!(a.iou(&b) >= 0.0 && a.iou(&b) <= 1.0);
    }

    #[test]
    fn footprint_of_integer_box_is_exact() {
        let b: Box3<f64> = Box3::from_voxel_bounds([2, 3, 4], [6, 5, 9]);
        let (lo, hi) = b.voxel_footprint([16, 16, 16]).unwrap();
        assert_eq!(lo, [2, 3, 4]);
        assert_eq!(hi, [6, 5, 9]);
    }

    #[test]
    fn footprint_never_empty_when_inside() {
        let b = Box3::new([4.5, 4.5, 4.5], [0.4, 0.4, 0.4]);
        let (lo, hi) = b.voxel_footprint([8, 8, 8]).unwrap();
        for i in 0..3 {
            assert!(hi[i] > lo[i]);
        }
    }

    #[test]
    fn footprint_outside_grid_is_none() {
        let b = Box3::new([-5.0, 4.0, 4.0], [2.0, 2.0, 2.0]);
        assert!(b.voxel_footprint([8, 8, 8]).is_none());
    }
}
