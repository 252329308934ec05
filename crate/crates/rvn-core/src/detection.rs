//! Anchor generation, RPN target assignment, box encode/decode, NMS and the
//! detection losses.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Box3;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Anchors straddling this physical size (any axis) count as "big".
pub const ANCHOR_SPLIT_METERS: f64 = 1.125;

/// IoU thresholds for RPN anchor labels.
pub const POSITIVE_IOU: f64 = 0.35;
pub const NEGATIVE_IOU: f64 = 0.15;

/// Anchor sizes in voxel units, split into the small set (placed on the
/// first detection feature map) and the big set (second map).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AnchorSet {
    pub small: Vec<[f64; 3]>,
    pub big: Vec<[f64; 3]>,
    /// Physical split threshold in meters.
    pub split_threshold_m: f64,
    /// Voxel edge length in meters the sizes are expressed against.
    pub voxel_size: f64,
}

impl AnchorSet {
    pub fn n_small(&self) -> usize {
        self.small.len()
    }

    pub fn n_big(&self) -> usize {
        self.big.len()
    }

    pub fn sizes(&self, scale: usize) -> &[[f64; 3]] {
        if scale == 0 {
            &self.small
        } else {
            &self.big
        }
    }

    /// Every anchor must land in exactly one of the two sets under the
    /// physical split rule.
    pub fn check_partition(&self) -> Result<()> {
        let thr = self.split_threshold_m / self.voxel_size;
        for a in &self.small {
            if a.iter().any(|&v| v > thr) {
                return Err(Error::Invalid(format!("small anchor {a:?} exceeds split {thr}")));
            }
        }
        for a in &self.big {
            if !a.iter().any(|&v| v > thr) {
                return Err(Error::Invalid(format!("big anchor {a:?} below split {thr}")));
            }
        }
        Ok(())
    }

    /// Anchor preset matching the published real-scan benchmark model.
    pub fn scannet_preset() -> Self {
        Self {
            small: vec![
                [9.0, 10.0, 9.0],
                [17.0, 21.0, 17.0],
                [12.0, 19.0, 13.0],
                [16.0, 12.0, 15.0],
            ],
            big: vec![
                [47.0, 20.0, 23.0],
                [23.0, 20.0, 47.0],
                [16.0, 18.0, 30.0],
                [17.0, 38.0, 17.0],
                [30.0, 18.0, 16.0],
            ],
            split_threshold_m: ANCHOR_SPLIT_METERS,
            voxel_size: 0.0469,
        }
    }
}

/// k-means over ground-truth box sizes (Euclidean, k-means++ seeding,
/// at most 100 Lloyd iterations or center movement below 1e-6), then split
/// by the physical threshold.
pub fn cluster_anchors(
    gt_sizes: &[[f64; 3]],
    k: usize,
    seed: u64,
    voxel_size: f64,
) -> Result<AnchorSet> {
    if gt_sizes.len() < k {
        return Err(Error::Invalid(format!(
            "k-means needs at least {k} boxes, got {}",
            gt_sizes.len()
        )));
    }
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);

    let d2 = |a: &[f64; 3], b: &[f64; 3]| -> f64 {
        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
    };

    // k-means++ seeding.
    let mut centers: Vec<[f64; 3]> = Vec::with_capacity(k);
    centers.push(gt_sizes[rng.gen_range(0..gt_sizes.len())]);
    while centers.len() < k {
        let dists: Vec<f64> = gt_sizes
            .iter()
            .map(|p| centers.iter().map(|c| d2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = dists.iter().sum();
        let next = if total <= 0.0 {
            // All points already covered; take the first unused point.
            gt_sizes
                .iter()
                .position(|p| centers.iter().all(|c| d2(p, c) > 0.0))
                .unwrap_or(0)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = gt_sizes.len() - 1;
            for (i, &d) in dists.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        };
        centers.push(gt_sizes[next]);
    }

    let mut assign = vec![0usize; gt_sizes.len()];
    for _ in 0..100 {
        // Assign to the nearest center, ties to the lower index.
        for (i, p) in gt_sizes.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = d2(p, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assign[i] = best;
        }
        // Recompute centers; an empty cluster re-seeds to the farthest point.
        let mut moved = 0.0f64;
        for c in 0..k {
            let members: Vec<&[f64; 3]> =
                gt_sizes.iter().zip(assign.iter()).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            let new_center = if members.is_empty() {
                let far = gt_sizes
                    .iter()
                    .enumerate()
                    .max_by(|(_, a), (_, b)| {
                        let da = centers.iter().map(|cc| d2(a, cc)).fold(f64::INFINITY, f64::min);
                        let db = centers.iter().map(|cc| d2(b, cc)).fold(f64::INFINITY, f64::min);
                        da.partial_cmp(&db).unwrap()
                    })
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                gt_sizes[far]
            } else {
                let n = members.len() as f64;
                let mut m = [0.0; 3];
                for p in &members {
                    for (mi, pi) in m.iter_mut().zip(p.iter()) {
                        *mi += pi;
                    }
                }
                [m[0] / n, m[1] / n, m[2] / n]
            };
            moved += d2(&centers[c], &new_center).sqrt();
            centers[c] = new_center;
        }
        if moved < 1e-6 {
            break;
        }
    }

    let thr = ANCHOR_SPLIT_METERS / voxel_size;
    let mut small = Vec::new();
    let mut big = Vec::new();
    for c in centers {
        if c.iter().any(|&v| v > thr) {
            big.push(c);
        } else {
            small.push(c);
        }
    }
    let key = |a: &[f64; 3]| (a[0] * a[1] * a[2], a[0], a[1], a[2]);
    small.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap());
    big.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap());
    Ok(AnchorSet { small, big, split_threshold_m: ANCHOR_SPLIT_METERS, voxel_size })
}

/// Anchor-relative box offsets: center offsets normalized by anchor size and
/// log size ratios.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxDelta(pub [f64; 6]);

pub fn encode_box(b: &Box3<f64>, anchor: &Box3<f64>) -> Result<BoxDelta> {
    b.check()?;
    anchor.check()?;
    let mut d = [0.0; 6];
    for i in 0..3 {
        d[i] = (b.center[i] - anchor.center[i]) / anchor.size[i];
        d[3 + i] = (b.size[i] / anchor.size[i]).ln();
    }
    Ok(BoxDelta(d))
}

pub fn decode_box(delta: &BoxDelta, anchor: &Box3<f64>) -> Result<Box3<f64>> {
    anchor.check()?;
    let mut center = [0.0; 3];
    let mut size = [0.0; 3];
    for i in 0..3 {
        center[i] = delta.0[i] * anchor.size[i] + anchor.center[i];
        size[i] = anchor.size[i] * delta.0[3 + i].exp();
    }
    Ok(Box3 { center, size })
}

/// Greedy non-maximum suppression; kept indices in descending score order,
/// ties broken by the lower index.
pub fn nms(boxes: &[Box3<f64>], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms wants equal-length inputs");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&j| boxes[i].iou(&boxes[j]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Anchor label used for RPN training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// Targets for one detection scale: flattened `[anchor, D, H, W]` layout.
pub struct ScaleTargets {
    pub labels: Vec<AnchorLabel>,
    /// Matched gt index for positives, usize::MAX elsewhere.
    pub matched_gt: Vec<usize>,
    pub deltas: Vec<BoxDelta>,
    pub dims: [usize; 3],
    pub n_anchors: usize,
}

/// One sampled anchor for the objectness loss.
#[derive(Clone, Copy, Debug)]
pub struct SampledAnchor {
    pub scale: usize,
    pub flat: usize,
    pub positive: bool,
}

pub struct AnchorTargets {
    pub scales: Vec<ScaleTargets>,
    pub sampled: Vec<SampledAnchor>,
}

/// Voxel-space box of anchor `a` placed at feature cell (d, h, w).
pub fn placed_anchor(size: [f64; 3], cell: [usize; 3], stride: usize) -> Box3<f64> {
    let s = stride as f64;
    Box3 {
        center: [
            (cell[0] as f64 + 0.5) * s,
            (cell[1] as f64 + 0.5) * s,
            (cell[2] as f64 + 0.5) * s,
        ],
        size,
    }
}

/// Assign labels and regression targets to every placed anchor.
///
/// Positive: IoU >= 0.35 with some gt, or argmax anchor of a gt (IoU > 0).
/// Negative: max IoU < 0.15. Everything else is ignored. At most
/// `sample_size` anchors are drawn for the objectness loss, targeting 1:1
/// positive:negative and filling with negatives when positives are scarce.
pub fn assign_anchor_targets(
    anchors: &AnchorSet,
    feat_dims: [usize; 3],
    stride: usize,
    gt_boxes: &[Box3<f64>],
    rng: &mut impl Rng,
    sample_size: usize,
) -> AnchorTargets {
    let vol = feat_dims[0] * feat_dims[1] * feat_dims[2];
    let mut scales = Vec::with_capacity(2);
    // Track the best anchor per gt across both scales for the argmax rule.
    let mut best_per_gt: Vec<(f64, usize, usize)> =
        vec![(0.0, usize::MAX, usize::MAX); gt_boxes.len()];

    for (scale, sizes) in [&anchors.small, &anchors.big].into_iter().enumerate() {
        let n = sizes.len() * vol;
        let mut labels = vec![AnchorLabel::Ignore; n];
        let mut matched = vec![usize::MAX; n];
        let mut deltas = vec![BoxDelta([0.0; 6]); n];
        for (ai, &size) in sizes.iter().enumerate() {
            for d in 0..feat_dims[0] {
                for h in 0..feat_dims[1] {
                    for w in 0..feat_dims[2] {
                        let flat = ((ai * feat_dims[0] + d) * feat_dims[1] + h) * feat_dims[2] + w;
                        let abox = placed_anchor(size, [d, h, w], stride);
                        let mut best_iou = 0.0f64;
                        let mut best_gt = usize::MAX;
                        for (gi, gt) in gt_boxes.iter().enumerate() {
                            let iou = abox.iou(gt);
                            if iou > best_iou {
                                best_iou = iou;
                                best_gt = gi;
                            }
                            if iou > best_per_gt[gi].0 {
                                best_per_gt[gi] = (iou, scale, flat);
                            }
                        }
                        if best_iou >= POSITIVE_IOU {
                            labels[flat] = AnchorLabel::Positive;
                            matched[flat] = best_gt;
                            deltas[flat] =
                                encode_box(&gt_boxes[best_gt], &abox).expect("positive anchor");
                        } else if best_iou < NEGATIVE_IOU {
                            labels[flat] = AnchorLabel::Negative;
                        }
                    }
                }
            }
        }
        scales.push(ScaleTargets {
            labels,
            matched_gt: matched,
            deltas,
            dims: feat_dims,
            n_anchors: sizes.len(),
        });
    }

    // Argmax guarantee: every gt owns its best-overlapping anchor.
    for (gi, &(iou, scale, flat)) in best_per_gt.iter().enumerate() {
        if iou > 0.0 && scale != usize::MAX {
            let sizes = anchors.sizes(scale);
            let st = &mut scales[scale];
            if st.labels[flat] != AnchorLabel::Positive {
                st.labels[flat] = AnchorLabel::Positive;
                st.matched_gt[flat] = gi;
                let (ai, rest) = (flat / vol, flat % vol);
                let d = rest / (feat_dims[1] * feat_dims[2]);
                let h = (rest / feat_dims[2]) % feat_dims[1];
                let w = rest % feat_dims[2];
                let abox = placed_anchor(sizes[ai], [d, h, w], stride);
                st.deltas[flat] = encode_box(&gt_boxes[gi], &abox).expect("argmax anchor");
            }
        }
    }

    // Sample the objectness subset.
    let mut positives: Vec<SampledAnchor> = Vec::new();
    let mut negatives: Vec<SampledAnchor> = Vec::new();
    for (scale, st) in scales.iter().enumerate() {
        for (flat, &l) in st.labels.iter().enumerate() {
            match l {
                AnchorLabel::Positive => {
                    positives.push(SampledAnchor { scale, flat, positive: true })
                }
                AnchorLabel::Negative => {
                    negatives.push(SampledAnchor { scale, flat, positive: false })
                }
                AnchorLabel::Ignore => {}
            }
        }
    }
    positives.shuffle(rng);
    negatives.shuffle(rng);
    let n_pos = positives.len().min(sample_size / 2);
    let n_neg = negatives.len().min(sample_size - n_pos);
    let mut sampled: Vec<SampledAnchor> = Vec::with_capacity(n_pos + n_neg);
    sampled.extend_from_slice(&positives[..n_pos]);
    sampled.extend_from_slice(&negatives[..n_neg]);

    AnchorTargets { scales, sampled }
}

/// RPN output maps for one scale, as produced by the network heads.
pub struct RpnScaleOut {
    /// Objectness logits, `[2*A, D, H, W]`: channels (2a, 2a+1) hold the
    /// (negative, positive) pair of anchor a.
    pub cls: Var,
    /// Box deltas, `[6*A, D, H, W]`: anchor a uses channels 6a..6a+6 in the
    /// order (center x,y,z then log-size x,y,z).
    pub bbox: Var,
    pub dims: [usize; 3],
    pub n_anchors: usize,
}

pub struct DetectionLosses {
    pub objectness: Var,
    pub bbox: Var,
    pub class: Var,
    pub n_positive: usize,
}

/// Assemble the three detection losses on the tape.
///
/// `roi_class`: per sampled RoI, (class logits var, target class).
/// `roi_refine`: per matched RoI, (6-vector delta var, target delta).
/// Second-stage refinement shares the box loss: the reported bbox loss is
/// the mean of the RPN term and the refinement term when both exist.
pub fn detection_losses(
    tape: &mut Tape<f64>,
    rpn: &[RpnScaleOut],
    targets: &AnchorTargets,
    roi_class: &[(Var, usize)],
    roi_refine: &[(Var, BoxDelta)],
) -> Result<DetectionLosses> {
    // Objectness: BCE on (pos - neg) logits over the sampled subset.
    let mut pos_idx: Vec<Vec<usize>> = vec![Vec::new(); rpn.len()];
    let mut neg_idx: Vec<Vec<usize>> = vec![Vec::new(); rpn.len()];
    let mut obj_targets: Vec<Vec<f64>> = vec![Vec::new(); rpn.len()];
    for s in &targets.sampled {
        let st = &targets.scales[s.scale];
        let vol = st.dims[0] * st.dims[1] * st.dims[2];
        let (anchor, cell) = (s.flat / vol, s.flat % vol);
        // Channel-major flat index into the [2A, D, H, W] map.
        neg_idx[s.scale].push((2 * anchor) * vol + cell);
        pos_idx[s.scale].push((2 * anchor + 1) * vol + cell);
        obj_targets[s.scale].push(if s.positive { 1.0 } else { 0.0 });
    }
    let mut obj_terms: Vec<Var> = Vec::new();
    for (scale, out) in rpn.iter().enumerate() {
        if pos_idx[scale].is_empty() {
            continue;
        }
        let p = tape.gather(out.cls, pos_idx[scale].clone())?;
        let n = tape.gather(out.cls, neg_idx[scale].clone())?;
        let logit = tape.sub(p, n)?;
        let t = Tensor::new(&[obj_targets[scale].len()], obj_targets[scale].clone())?;
        obj_terms.push(tape.bce_with_logits(logit, t)?);
    }
    let objectness = mean_of_scalars(tape, &obj_terms);

    // Box loss over positive anchors (possibly empty -> defined as 0).
    let mut n_positive = 0usize;
    let mut box_terms: Vec<Var> = Vec::new();
    for (scale, out) in rpn.iter().enumerate() {
        let st = &targets.scales[scale];
        let vol = st.dims[0] * st.dims[1] * st.dims[2];
        let mut idx = Vec::new();
        let mut tgt = Vec::new();
        for (flat, &l) in st.labels.iter().enumerate() {
            if l != AnchorLabel::Positive {
                continue;
            }
            n_positive += 1;
            let (anchor, cell) = (flat / vol, flat % vol);
            for j in 0..6 {
                idx.push((6 * anchor + j) * vol + cell);
                tgt.push(st.deltas[flat].0[j]);
            }
        }
        if idx.is_empty() {
            continue;
        }
        let pred = tape.gather(out.bbox, idx)?;
        let t = Tensor::new(&[tgt.len()], tgt)?;
        box_terms.push(tape.huber(pred, t, 2.0)?);
    }
    let rpn_box = mean_of_scalars(tape, &box_terms);
    let bbox = if roi_refine.is_empty() {
        rpn_box
    } else {
        let mut refine_terms = Vec::with_capacity(roi_refine.len());
        for (v, delta) in roi_refine {
            let t = Tensor::new(&[6], delta.0.to_vec())?;
            refine_terms.push(tape.huber(*v, t, 2.0)?);
        }
        let refine = mean_of_scalars(tape, &refine_terms);
        let s = tape.add(rpn_box, refine)?;
        tape.scale(s, 0.5)
    };

    // Classification over sampled RoIs.
    let mut cls_terms = Vec::with_capacity(roi_class.len());
    for &(logits, label) in roi_class {
        cls_terms.push(tape.cross_entropy(logits, label)?);
    }
    let class = mean_of_scalars(tape, &cls_terms);

    Ok(DetectionLosses { objectness, bbox, class, n_positive })
}

/// Mean of scalar vars; an empty list yields the constant 0.
pub fn mean_of_scalars(tape: &mut Tape<f64>, terms: &[Var]) -> Var {
    match terms.len() {
        0 => tape.constant(Tensor::scalar(0.0)),
        1 => terms[0],
        n => {
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = tape.add(acc, t).expect("scalar add");
            }
            tape.scale(acc, 1.0 / n as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn encode_zero_for_matching_box() {
        let a = Box3::new([10.0, 10.0, 10.0], [4.0, 4.0, 4.0]);
        let d = encode_box(&a, &a).unwrap();
        assert_eq!(d.0, [0.0; 6]);
    }

    #[test]
    fn encode_known_values() {
        let anchor = Box3::new([10.0, 0.0, 0.0], [4.0, 1.0, 1.0]);
        let b = Box3::new([12.0, 0.0, 0.0], [8.0, 1.0, 1.0]);
        let d = encode_box(&b, &anchor).unwrap();
        assert!((d.0[0] - 0.5).abs() < 1e-12);
        assert!((d.0[3] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let anchor = Box3::new(
                [rng.gen_range(1.0..50.0), rng.gen_range(1.0..50.0), rng.gen_range(1.0..50.0)],
                [rng.gen_range(0.5..20.0), rng.gen_range(0.5..20.0), rng.gen_range(0.5..20.0)],
            );
            let b = Box3::new(
                [rng.gen_range(1.0..50.0), rng.gen_range(1.0..50.0), rng.gen_range(1.0..50.0)],
                [rng.gen_range(0.5..20.0), rng.gen_range(0.5..20.0), rng.gen_range(0.5..20.0)],
            );
            let back = decode_box(&encode_box(&b, &anchor).unwrap(), &anchor).unwrap();
            for i in 0..3 {
                assert!((back.center[i] - b.center[i]).abs() < 1e-9);
                assert!((back.size[i] - b.size[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn delta_scale_invariance() {
        // Scaling box and anchor together leaves the delta unchanged.
        let anchor = Box3::new([10.0, 12.0, 8.0], [4.0, 6.0, 3.0]);
        let b = Box3::new([11.0, 10.0, 9.0], [5.0, 4.0, 6.0]);
        let d1 = encode_box(&b, &anchor).unwrap();
        let s = 3.7;
        let scale_box = |x: &Box3<f64>| {
            Box3::new(
                [x.center[0] * s, x.center[1] * s, x.center[2] * s],
                [x.size[0] * s, x.size[1] * s, x.size[2] * s],
            )
        };
        let d2 = encode_box(&scale_box(&b), &scale_box(&anchor)).unwrap();
        for i in 0..6 {
            assert!((d1.0[i] - d2.0[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn nonpositive_size_rejected() {
        let anchor = Box3::new([0.0; 3], [1.0, 1.0, 0.0]);
        let b = Box3::new([0.0; 3], [1.0; 3]);
        assert!(encode_box(&b, &anchor).is_err());
    }

    #[test]
    fn nms_basics() {
        let b = Box3::new([5.0, 5.0, 5.0], [2.0, 2.0, 2.0]);
        assert_eq!(nms(&[b], &[0.7], 0.5), vec![0]);
        assert_eq!(nms(&[b, b], &[0.9, 0.8], 0.5), vec![0]);
    }

    #[test]
    fn kmeans_singletons_recover_sizes() {
        let sizes: Vec<[f64; 3]> =
            (0..9).map(|i| [4.0 + i as f64, 5.0 + i as f64, 6.0 + i as f64]).collect();
        let set = cluster_anchors(&sizes, 9, 3, 0.0469).unwrap();
        let mut all: Vec<[f64; 3]> = set.small.iter().chain(set.big.iter()).copied().collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want = sizes.clone();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (a, w) in all.iter().zip(want.iter()) {
            for i in 0..3 {
                assert!((a[i] - w[i]).abs() < 1e-9);
            }
        }
        set.check_partition().unwrap();
    }

    #[test]
    fn kmeans_degenerate_all_equal() {
        // 0.5 m cubes at 4.69 cm voxels are ~10.66 voxels, all small anchors.
        let sizes = vec![[0.5 / 0.0469; 3]; 20];
        let set = cluster_anchors(&sizes, 9, 5, 0.0469).unwrap();
        assert_eq!(set.n_small(), 9);
        assert_eq!(set.n_big(), 0);
        for a in &set.small {
            for v in a {
                assert!((v - 10.66).abs() < 0.01);
            }
        }
    }

    #[test]
    fn scannet_preset_partition() {
        let set = AnchorSet::scannet_preset();
        assert_eq!(set.n_small() + set.n_big(), 9);
        set.check_partition().unwrap();
    }

    #[test]
    fn anchor_targets_exact_match_is_positive_with_zero_delta() {
        let anchors = AnchorSet {
            small: vec![[4.0, 4.0, 4.0]],
            big: vec![[26.0, 4.0, 4.0]],
            split_threshold_m: ANCHOR_SPLIT_METERS,
            voxel_size: 0.0469,
        };
        // gt exactly equals the small anchor placed at cell (1,1,1), stride 4.
        let gt = vec![Box3::new([6.0, 6.0, 6.0], [4.0, 4.0, 4.0])];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let t = assign_anchor_targets(&anchors, [4, 4, 4], 4, &gt, &mut rng, 64);
        let flat = ((4usize) + 1) * 4 + 1; // anchor 0, cell (1,1,1)
        assert_eq!(t.scales[0].labels[flat], AnchorLabel::Positive);
        assert_eq!(t.scales[0].matched_gt[flat], 0);
        assert_eq!(t.scales[0].deltas[flat].0, [0.0; 6]);
    }

    #[test]
    fn anchor_targets_empty_gt_all_negative() {
        let anchors = AnchorSet {
            small: vec![[4.0, 4.0, 4.0]],
            big: vec![[26.0, 4.0, 4.0]],
            split_threshold_m: ANCHOR_SPLIT_METERS,
            voxel_size: 0.0469,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let t = assign_anchor_targets(&anchors, [3, 3, 3], 4, &[], &mut rng, 64);
        for st in &t.scales {
            assert!(st.labels.iter().all(|&l| l == AnchorLabel::Negative));
        }
        assert!(t.sampled.iter().all(|s| !s.positive));
        assert!(t.sampled.len() <= 64);
    }
}
