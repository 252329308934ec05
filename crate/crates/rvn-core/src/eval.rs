//! mAP@0.5 scoring for semantic instance completion, instance segmentation
//! and 3D detection, plus the completeness-binned breakdown.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geom::Box3;

/// Sparse binary mask over a region of the global voxel lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelMask {
    pub lo: [usize; 3],
    pub dims: [usize; 3],
    pub bits: Vec<bool>,
}

impl VoxelMask {
    pub fn empty() -> Self {
        VoxelMask { lo: [0; 3], dims: [0; 3], bits: Vec::new() }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get_global(&self, v: [usize; 3]) -> bool {
        for i in 0..3 {
            if v[i] < self.lo[i] || v[i] >= self.lo[i] + self.dims[i] {
                return false;
            }
        }
        let l = [v[0] - self.lo[0], v[1] - self.lo[1], v[2] - self.lo[2]];
        self.bits[(l[0] * self.dims[1] + l[1]) * self.dims[2] + l[2]]
    }

    pub fn occupied_voxels(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let dims = self.dims;
        let lo = self.lo;
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(move |(i, _)| {
            let x = i / (dims[1] * dims[2]);
            let y = (i / dims[2]) % dims[1];
            let z = i % dims[2];
            [lo[0] + x, lo[1] + y, lo[2] + z]
        })
    }

    /// |a AND b| / |a OR b| on the shared lattice; two empty masks give 0
    /// (an empty prediction can never be a true positive).
    pub fn iou(&self, other: &VoxelMask) -> f64 {
        let na = self.count();
        let nb = other.count();
        if na == 0 || nb == 0 {
            return 0.0;
        }
        // Intersection only needs the overlapping region.
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut overlap = true;
        for i in 0..3 {
            lo[i] = self.lo[i].max(other.lo[i]);
            hi[i] = (self.lo[i] + self.dims[i]).min(other.lo[i] + other.dims[i]);
            if lo[i] >= hi[i] {
                overlap = false;
                break;
            }
        }
        let mut inter = 0usize;
        if overlap {
            for x in lo[0]..hi[0] {
                for y in lo[1]..hi[1] {
                    for z in lo[2]..hi[2] {
                        if self.get_global([x, y, z]) && other.get_global([x, y, z]) {
                            inter += 1;
                        }
                    }
                }
            }
        }
        let union = na + nb - inter;
        inter as f64 / union as f64
    }

    /// Voxelwise AND with a dense grid (the partial-scan surface occupancy).
    pub fn intersect_grid(&self, grid: &[bool], extents: [usize; 3]) -> VoxelMask {
        let mut out = self.clone();
        for (i, b) in out.bits.iter_mut().enumerate() {
            if !*b {
                continue;
            }
            let x = self.lo[0] + i / (self.dims[1] * self.dims[2]);
            let y = self.lo[1] + (i / self.dims[2]) % self.dims[1];
            let z = self.lo[2] + i % self.dims[2];
            let inside = x < extents[0] && y < extents[1] && z < extents[2];
            *b = inside && grid[(x * extents[1] + y) * extents[2] + z];
        }
        out
    }
}

/// Voxelwise AND of a predicted complete mask with the observed partial
/// surface: the induced instance segmentation mask.
pub fn segmentation_from_completion(
    complete: &VoxelMask,
    surface: &[bool],
    extents: [usize; 3],
) -> VoxelMask {
    complete.intersect_grid(surface, extents)
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub class_id: usize,
    pub score: f64,
    pub bbox: Box3<f64>,
    pub mask: VoxelMask,
}

#[derive(Clone, Debug)]
pub struct GtInstance {
    pub class_id: usize,
    pub bbox: Box3<f64>,
    pub mask: VoxelMask,
}

/// Everything needed to score one scene.
#[derive(Clone, Debug)]
pub struct EvalRecord {
    pub scene_id: String,
    pub extents: [usize; 3],
    pub predictions: Vec<Prediction>,
    pub gt: Vec<GtInstance>,
    /// Partial-scan surface occupancy: |tsdf| < 1 and weight > 0.
    pub surface: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Completion,
    Segmentation,
    Detection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskMetrics {
    /// AP per class name; classes without any gt are absent.
    pub per_class: BTreeMap<String, f64>,
    pub map: f64,
}

/// All-point interpolated average precision from (score, is_tp) pairs sorted
/// by descending score, with `n_gt` positives.
fn ap_from_matches(matches: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(matches.len());
    for &(_, is_tp) in matches {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    // Precision envelope, integrated over recall.
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < points.len() {
        let r = points[i].0;
        let max_p =
            points[i..].iter().map(|&(_, p)| p).fold(0.0f64, f64::max);
        if r > prev_recall {
            ap += (r - prev_recall) * max_p;
            prev_recall = r;
        }
        // Skip to the next distinct recall level.
        let mut j = i;
        while j < points.len() && points[j].0 <= r {
            j += 1;
        }
        i = j;
    }
    ap
}

/// IoU of prediction `p` against gt `g` under the task's matching geometry.
fn task_iou(task: Task, p: &Prediction, g: &GtInstance, surface: &[bool], extents: [usize; 3]) -> f64 {
    match task {
        Task::Completion => p.mask.iou(&g.mask),
        Task::Segmentation => {
            let ps = p.mask.intersect_grid(surface, extents);
            let gs = g.mask.intersect_grid(surface, extents);
            ps.iou(&gs)
        }
        Task::Detection => p.bbox.iou(&g.bbox),
    }
}

/// Per-class AP and mAP at the given IoU threshold. Predictions are pooled
/// across scenes, sorted by descending score with ties broken by (scene id,
/// prediction index), and matched greedily to unmatched same-class gt.
pub fn average_precision(
    records: &[EvalRecord],
    task: Task,
    iou_threshold: f64,
    class_names: &[&str],
) -> TaskMetrics {
    let mut per_class = BTreeMap::new();
    let mut sum = 0.0;
    let mut n_classes_with_gt = 0usize;
    for (class_id, &name) in class_names.iter().enumerate() {
        let n_gt: usize =
            records.iter().map(|r| r.gt.iter().filter(|g| g.class_id == class_id).count()).sum();
        if n_gt == 0 {
            continue;
        }
        // (score, scene_idx, pred_idx)
        let mut preds: Vec<(f64, usize, usize)> = Vec::new();
        for (si, r) in records.iter().enumerate() {
            for (pi, p) in r.predictions.iter().enumerate() {
                if p.class_id == class_id {
                    preds.push((p.score, si, pi));
                }
            }
        }
        preds.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| records[a.1].scene_id.cmp(&records[b.1].scene_id))
                .then(a.2.cmp(&b.2))
        });
        let mut used: Vec<Vec<bool>> = records.iter().map(|r| vec![false; r.gt.len()]).collect();
        let mut matches: Vec<(f64, bool)> = Vec::with_capacity(preds.len());
        for &(score, si, pi) in &preds {
            let r = &records[si];
            let p = &r.predictions[pi];
            let mut best = (iou_threshold, usize::MAX);
            for (gi, g) in r.gt.iter().enumerate() {
                if g.class_id != class_id || used[si][gi] {
                    continue;
                }
                let iou = task_iou(task, p, g, &r.surface, r.extents);
                if iou >= best.0 && (iou > best.0 || best.1 == usize::MAX) {
                    best = (iou, gi);
                }
            }
            let is_tp = best.1 != usize::MAX;
            if is_tp {
                used[si][best.1] = true;
            }
            matches.push((score, is_tp));
        }
        let ap = ap_from_matches(&matches, n_gt);
        per_class.insert(name.to_string(), ap);
        sum += ap;
        n_classes_with_gt += 1;
    }
    let map = if n_classes_with_gt == 0 { 0.0 } else { sum / n_classes_with_gt as f64 };
    TaskMetrics { per_class, map }
}

/// Completeness of a gt instance: fraction of its complete-mask surface
/// voxels (mask voxels with a 6-neighbor outside the mask) that lie within
/// Chebyshev distance 1 of an observed-surface voxel.
pub fn instance_completeness(gt: &GtInstance, surface: &[bool], extents: [usize; 3]) -> f64 {
    let mut n_surf = 0usize;
    let mut n_observed = 0usize;
    for v in gt.mask.occupied_voxels() {
        let p = [v[0] as i64, v[1] as i64, v[2] as i64];
        let on_boundary = [
            [p[0] - 1, p[1], p[2]],
            [p[0] + 1, p[1], p[2]],
            [p[0], p[1] - 1, p[2]],
            [p[0], p[1] + 1, p[2]],
            [p[0], p[1], p[2] - 1],
            [p[0], p[1], p[2] + 1],
        ]
        .iter()
        .any(|&q| {
            q.iter().any(|&c| c < 0)
                || q[0] as usize >= extents[0].max(1)
                || q[1] as usize >= extents[1].max(1)
                || q[2] as usize >= extents[2].max(1)
                || !gt.mask.get_global([q[0] as usize, q[1] as usize, q[2] as usize])
        });
        if !on_boundary {
            continue;
        }
        n_surf += 1;
        let mut seen = false;
        'nbhd: for dx in -1i64..=1 {
            for dy in -1i64..=1 {
                for dz in -1i64..=1 {
                    let q = [p[0] + dx, p[1] + dy, p[2] + dz];
                    if q.iter().any(|&c| c < 0)
                        || q[0] as usize >= extents[0]
                        || q[1] as usize >= extents[1]
                        || q[2] as usize >= extents[2]
                    {
                        continue;
                    }
                    if surface[(q[0] as usize * extents[1] + q[1] as usize) * extents[2]
                        + q[2] as usize]
                    {
                        seen = true;
                        break 'nbhd;
                    }
                }
            }
        }
        if seen {
            n_observed += 1;
        }
    }
    if n_surf == 0 {
        0.0
    } else {
        n_observed as f64 / n_surf as f64
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompletenessBin {
    pub lo: f64,
    pub hi: f64,
    pub n_gt: usize,
    /// Absent when the bin holds no gt instances.
    pub map: Option<f64>,
}

/// Verify the bins partition [0, 1]: sorted, contiguous, covering.
pub fn check_bin_partition(bins: &[(f64, f64)]) -> crate::error::Result<()> {
    if bins.is_empty() || bins[0].0 != 0.0 || bins[bins.len() - 1].1 != 1.0 {
        return Err(crate::error::Error::Invalid("bins must cover [0,1]".into()));
    }
    for w in bins.windows(2) {
        if (w[0].1 - w[1].0).abs() > 1e-12 {
            return Err(crate::error::Error::Invalid("bins must be contiguous".into()));
        }
    }
    Ok(())
}

/// Index of the bin holding completeness `c`: half-open `[lo, hi)` except
/// the last bin, which includes 1.0. Every instance lands in exactly one bin.
pub fn bin_of(bins: &[(f64, f64)], c: f64) -> usize {
    for (i, &(lo, hi)) in bins.iter().enumerate() {
        if c >= lo && (c < hi || (i == bins.len() - 1 && c <= hi)) {
            return i;
        }
    }
    bins.len() - 1
}

/// Per-bin mAP over gt instances bucketed by completeness. Predictions whose
/// best same-class match is a gt outside the bin are ignored rather than
/// counted as false positives.
pub fn completeness_histogram(
    records: &[EvalRecord],
    task: Task,
    iou_threshold: f64,
    class_names: &[&str],
    bins: &[(f64, f64)],
) -> crate::error::Result<Vec<CompletenessBin>> {
    check_bin_partition(bins)?;
    // Bucket each gt instance.
    let assignments: Vec<Vec<usize>> = records
        .iter()
        .map(|r| {
            r.gt.iter()
                .map(|g| bin_of(bins, instance_completeness(g, &r.surface, r.extents)))
                .collect()
        })
        .collect();

    let mut out = Vec::with_capacity(bins.len());
    for (bi, &(lo, hi)) in bins.iter().enumerate() {
        // Records restricted to this bin's gt; predictions best-matching an
        // out-of-bin gt are dropped.
        let mut bin_records: Vec<EvalRecord> = Vec::with_capacity(records.len());
        let mut n_gt = 0usize;
        for (r, assign) in records.iter().zip(assignments.iter()) {
            let gt: Vec<GtInstance> = r
                .gt
                .iter()
                .zip(assign.iter())
                .filter(|(_, &a)| a == bi)
                .map(|(g, _)| g.clone())
                .collect();
            n_gt += gt.len();
            let predictions: Vec<Prediction> = r
                .predictions
                .iter()
                .filter(|p| {
                    // Best gt of the same class over all bins.
                    let mut best = (0.0f64, usize::MAX);
                    for (gi, g) in r.gt.iter().enumerate() {
                        if g.class_id != p.class_id {
                            continue;
                        }
                        let iou = task_iou(task, p, g, &r.surface, r.extents);
                        if iou > best.0 {
                            best = (iou, gi);
                        }
                    }
                    match best.1 {
                        usize::MAX => true, // unmatched: a false positive everywhere
                        gi => assign[gi] == bi || best.0 < iou_threshold,
                    }
                })
                .cloned()
                .collect();
            bin_records.push(EvalRecord {
                scene_id: r.scene_id.clone(),
                extents: r.extents,
                predictions,
                gt,
                surface: r.surface.clone(),
            });
        }
        let map = if n_gt == 0 {
            None
        } else {
            Some(average_precision(&bin_records, task, iou_threshold, class_names).map)
        };
        out.push(CompletenessBin { lo, hi, n_gt, map });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube_mask(lo: [usize; 3], d: usize) -> VoxelMask {
        VoxelMask { lo, dims: [d, d, d], bits: vec![true; d * d * d] }
    }

    #[test]
    fn mask_iou_fixtures() {
        let a = cube_mask([0, 0, 0], 2);
        assert_eq!(a.iou(&a), 1.0);
        let b = cube_mask([5, 5, 5], 2);
        assert_eq!(a.iou(&b), 0.0);
        // Half-overlapping equal-size masks: |a|=|b|=8, overlap 4 -> 4/12.
        let c = VoxelMask { lo: [1, 0, 0], dims: [2, 2, 2], bits: vec![true; 8] };
        assert!((a.iou(&c) - 1.0 / 3.0).abs() < 1e-15);
        // Empty vs empty is 0 by definition.
        assert_eq!(VoxelMask::empty().iou(&VoxelMask::empty()), 0.0);
    }

    fn one_class_record(pairs: Vec<(f64, f64)>, n_gt: usize) -> Vec<EvalRecord> {
        // Build synthetic masks: gt cubes spaced apart; a prediction with
        // requested IoU is simulated by overlapping partial cubes.
        // Simpler: craft predictions directly against gts using bbox IoU via
        // the detection task, with boxes sized to hit the wanted IoU.
        let extents = [64, 16, 64];
        let mut gt = Vec::new();
        for gi in 0..n_gt {
            gt.push(GtInstance {
                class_id: 0,
                bbox: Box3::from_voxel_bounds([gi * 12, 0, 0], [gi * 12 + 4, 4, 4]),
                mask: cube_mask([gi * 12, 0, 0], 4),
            });
        }
        let mut predictions = Vec::new();
        for (score, iou) in pairs {
            // Match against gt index by score order later; overlap the first
            // unmatched gt with a box of the right IoU along x.
            let gi = predictions.len().min(n_gt.saturating_sub(1));
            let lo = gi * 12;
            if iou > 0.0 {
                // Box [lo+s, lo+4+s) x [0,4) x [0,4): IoU = (4-s)/(4+s).
                let s = ((4.0 * (1.0 - iou)) / (1.0 + iou)).round() as usize;
                predictions.push(Prediction {
                    class_id: 0,
                    score,
                    bbox: Box3::from_voxel_bounds([lo + s, 0, 0], [lo + 4 + s, 4, 4]),
                    mask: cube_mask([lo + s, 0, 0], 4),
                });
            } else {
                predictions.push(Prediction {
                    class_id: 0,
                    score,
                    bbox: Box3::from_voxel_bounds([40, 8, 40], [44, 12, 44]),
                    mask: cube_mask([40, 8, 40], 4),
                });
            }
        }
        vec![EvalRecord {
            scene_id: "s0".into(),
            extents,
            predictions,
            gt,
            surface: vec![false; extents[0] * extents[1] * extents[2]],
        }]
    }

    #[test]
    fn single_prediction_ap_fixtures() {
        let names = ["box"];
        // IoU 0.6 -> AP 1.
        let r = one_class_record(vec![(0.9, 0.6)], 1);
        let m = average_precision(&r, Task::Detection, 0.5, &names);
        assert_eq!(m.map, 1.0);
        // IoU 0.4 -> AP 0.
        let r = one_class_record(vec![(0.9, 0.4)], 1);
        let m = average_precision(&r, Task::Detection, 0.5, &names);
        assert_eq!(m.map, 0.0);
    }

    #[test]
    fn ap_hand_computed_pr_integration() {
        // 2 gt; predictions scores .9 (TP), .8 (FP), .7 (TP):
        // AP = 1*(0.5-0) + (2/3)*(1.0-0.5) = 0.8333...
        let matches = vec![(0.9, true), (0.8, false), (0.7, true)];
        let ap = ap_from_matches(&matches, 2);
        assert!((ap - (0.5 + 2.0 / 3.0 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn zero_score_fp_never_increases_ap() {
        let base = vec![(0.9, true), (0.7, true)];
        let ap0 = ap_from_matches(&base, 2);
        let mut with_fp = base.clone();
        with_fp.push((0.0, false));
        let ap1 = ap_from_matches(&with_fp, 2);
        assert!(ap1 <= ap0 + 1e-15);
    }

    #[test]
    fn greedy_matching_consumes_each_gt_once() {
        let names = ["box"];
        // Two identical predictions on one gt: second must be FP.
        let r = one_class_record(vec![(0.9, 1.0), (0.8, 1.0)], 1);
        let m = average_precision(&r, Task::Detection, 0.5, &names);
        // AP stays 1.0 (TP found first), but a duplicate at lower score
        // cannot raise it above 1.
        assert!(m.map <= 1.0);
        let r2 = one_class_record(vec![(0.9, 1.0)], 1);
        let m2 = average_precision(&r2, Task::Detection, 0.5, &names);
        assert!(m.map <= m2.map + 1e-15);
    }

    #[test]
    fn segmentation_is_voxelwise_and() {
        let extents = [8, 8, 8];
        let mut surface = vec![false; 512];
        for z in 0..8 {
            surface[(2 * 8 + 2) * 8 + z] = true; // column at x=2, y=2
        }
        let m = cube_mask([2, 2, 0], 2);
        let seg = segmentation_from_completion(&m, &surface, extents);
        assert_eq!(seg.count(), 2); // z = 0, 1 of the column fall in the cube
        // Disjoint mask gives empty segmentation.
        let far = cube_mask([5, 5, 5], 2);
        assert_eq!(segmentation_from_completion(&far, &surface, extents).count(), 0);
    }

    #[test]
    fn bin_partition_covers_each_instance_once() {
        let bins = [(0.0, 0.5), (0.5, 0.8), (0.8, 1.0)];
        check_bin_partition(&bins).unwrap();
        for &c in &[0.0, 0.25, 0.5, 0.65, 0.8, 0.99, 1.0] {
            let hits: Vec<usize> = (0..bins.len())
                .filter(|&i| {
                    let (lo, hi) = bins[i];
                    c >= lo && (c < hi || (i == bins.len() - 1 && c <= hi))
                })
                .collect();
            assert_eq!(hits.len(), 1, "completeness {c} lands in {hits:?}");
            assert_eq!(hits[0], bin_of(&bins, c));
        }
        assert!(check_bin_partition(&[(0.1, 1.0)]).is_err());
    }

    #[test]
    fn fully_observed_instances_land_in_top_bin() {
        let extents = [16, 16, 16];
        let gt = GtInstance {
            class_id: 0,
            bbox: Box3::from_voxel_bounds([4, 4, 4], [8, 8, 8]),
            mask: cube_mask([4, 4, 4], 4),
        };
        // Observed surface exactly at the mask boundary shell.
        let mut surface = vec![false; 16 * 16 * 16];
        for v in gt.mask.occupied_voxels() {
            surface[(v[0] * 16 + v[1]) * 16 + v[2]] = true;
        }
        let c = instance_completeness(&gt, &surface, extents);
        assert_eq!(c, 1.0);
        let none = vec![false; 16 * 16 * 16];
        assert_eq!(instance_completeness(&gt, &none, extents), 0.0);
    }
}
