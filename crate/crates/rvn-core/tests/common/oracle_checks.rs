//! Shared oracle-check implementations used by both the oracle test
//! target and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rvn_core::completion::{completion_target, match_predictions};
use rvn_core::detection::{
    assign_anchor_targets, decode_box, encode_box, nms, placed_anchor, AnchorLabel, AnchorSet,
    NEGATIVE_IOU, POSITIVE_IOU,
};
use rvn_core::eval::VoxelMask;
use rvn_core::geom::Box3;
use rvn_core::gradcheck::random_tensor;
use rvn_core::scene::InstanceGT;
use rvn_core::tensor::tape::Tape;
use rvn_core::Tensor;

fn rand_box(rng: &mut ChaCha8Rng, span: f64) -> Box3<f64> {
    Box3::new(
        [
            rng.gen_range(2.0..span - 2.0),
            rng.gen_range(2.0..span - 2.0),
            rng.gen_range(2.0..span - 2.0),
        ],
        [rng.gen_range(1.0..8.0), rng.gen_range(1.0..8.0), rng.gen_range(1.0..8.0)],
    )
}

/// Reference O(n^2) NMS, written independently of the production greedy loop.
fn nms_quadratic(boxes: &[Box3<f64>], scores: &[f64], thr: f64) -> Vec<usize> {
    let n = boxes.len();
    let mut suppressed = vec![false; n];
    let mut kept = Vec::new();
    loop {
        // Highest unsuppressed, unkept score; ties to lower index.
        let mut best: Option<usize> = None;
        for i in 0..n {
            if suppressed[i] || kept.contains(&i) {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) if scores[i] > scores[b] => Some(i),
                other => other,
            };
        }
        let Some(b) = best else { break };
        kept.push(b);
        for i in 0..n {
            if !suppressed[i] && i != b && boxes[b].iou(&boxes[i]) > thr {
                suppressed[i] = true;
            }
        }
    }
    kept
}

pub fn nms_matches_quadratic_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..1000 {
        let n = rng.gen_range(1..=12);
        let boxes: Vec<Box3<f64>> = (0..n).map(|_| rand_box(&mut rng, 24.0)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let got = nms(&boxes, &scores, 0.5);
        let want = nms_quadratic(&boxes, &scores, 0.5);
        assert_eq!(got, want, "case {case}");
    }
    // Once more with heavy score ties.
    for case in 0..200 {
        let n = rng.gen_range(2..=10);
        let boxes: Vec<Box3<f64>> = (0..n).map(|_| rand_box(&mut rng, 16.0)).collect();
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..3) as f64) / 2.0).collect();
        assert_eq!(nms(&boxes, &scores, 0.5), nms_quadratic(&boxes, &scores, 0.5), "tie case {case}");
    }
}

pub fn nms_is_input_order_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = rng.gen_range(2..=10);
        let boxes: Vec<Box3<f64>> = (0..n).map(|_| rand_box(&mut rng, 20.0)).collect();
        // Distinct scores so the kept set is unambiguous.
        let scores: Vec<f64> = (0..n).map(|i| 1.0 - i as f64 * 0.07).collect();
        let kept: Vec<Box3<f64>> = nms(&boxes, &scores, 0.5).iter().map(|&i| boxes[i]).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        let boxes2: Vec<Box3<f64>> = perm.iter().map(|&i| boxes[i]).collect();
        let scores2: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let kept2: Vec<Box3<f64>> = nms(&boxes2, &scores2, 0.5).iter().map(|&i| boxes2[i]).collect();
        assert_eq!(kept.len(), kept2.len());
        for (a, b) in kept.iter().zip(kept2.iter()) {
            assert_eq!(a, b);
        }
    }
}

/// Brute-force box IoU by counting fine lattice cells.
fn box_iou_counting(a: &Box3<f64>, b: &Box3<f64>) -> f64 {
    // Integer-aligned test boxes: count unit voxels.
    let (alo, ahi) = (a.min_corner(), a.max_corner());
    let (blo, bhi) = (b.min_corner(), b.max_corner());
    let lo = [alo[0].min(blo[0]) as i64, alo[1].min(blo[1]) as i64, alo[2].min(blo[2]) as i64];
    let hi = [ahi[0].max(bhi[0]).ceil() as i64, ahi[1].max(bhi[1]).ceil() as i64, ahi[2].max(bhi[2]).ceil() as i64];
    let inside = |p: [f64; 3], lo: [f64; 3], hi: [f64; 3]| {
        (0..3).all(|i| p[i] >= lo[i] && p[i] < hi[i])
    };
    let (mut na, mut nb, mut ni) = (0u64, 0u64, 0u64);
    for x in lo[0]..hi[0] {
        for y in lo[1]..hi[1] {
            for z in lo[2]..hi[2] {
                let c = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                let ia = inside(c, alo, ahi);
                let ib = inside(c, blo, bhi);
                na += ia as u64;
                nb += ib as u64;
                ni += (ia && ib) as u64;
            }
        }
    }
    let union = na + nb - ni;
    if union == 0 {
        0.0
    } else {
        ni as f64 / union as f64
    }
}

pub fn box_iou_matches_volume_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..300 {
        // Integer-aligned boxes so unit-cell counting is exact.
        let mk = |rng: &mut ChaCha8Rng| {
            let lo = [rng.gen_range(0..20), rng.gen_range(0..20), rng.gen_range(0..20)];
            let d = [rng.gen_range(1..8), rng.gen_range(1..8), rng.gen_range(1..8)];
            Box3::from_voxel_bounds(lo, [lo[0] + d[0], lo[1] + d[1], lo[2] + d[2]])
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let got = a.iou(&b);
        let want = box_iou_counting(&a, &b);
        assert!((got - want).abs() < 1e-12, "{a:?} vs {b:?}: {got} vs {want}");
    }
}

pub fn mask_iou_matches_voxel_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..200 {
        let mk = |rng: &mut ChaCha8Rng| {
            let lo = [rng.gen_range(0..10), rng.gen_range(0..10), rng.gen_range(0..10)];
            let dims = [rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6)];
            let bits: Vec<bool> =
                (0..dims[0] * dims[1] * dims[2]).map(|_| rng.gen_bool(0.6)).collect();
            VoxelMask { lo, dims, bits }
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        // Brute force over a dense grid.
        use std::collections::HashSet;
        let sa: HashSet<[usize; 3]> = a.occupied_voxels().collect();
        let sb: HashSet<[usize; 3]> = b.occupied_voxels().collect();
        let inter = sa.intersection(&sb).count();
        let union = sa.union(&sb).count();
        let want = if sa.is_empty() || sb.is_empty() { 0.0 } else { inter as f64 / union as f64 };
        assert!((a.iou(&b) - want).abs() < 1e-15);
    }
}

pub fn roi_pool_matches_brute_force_binning() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..100 {
        let dims = [rng.gen_range(4..10usize), rng.gen_range(4..10), rng.gen_range(4..10)];
        let x = random_tensor(rng.gen(), &[3, dims[0], dims[1], dims[2]]);
        let lo = [
            rng.gen_range(0..dims[0] - 1),
            rng.gen_range(0..dims[1] - 1),
            rng.gen_range(0..dims[2] - 1),
        ];
        let hi = [
            rng.gen_range(lo[0] + 1..=dims[0]),
            rng.gen_range(lo[1] + 1..=dims[1]),
            rng.gen_range(lo[2] + 1..=dims[2]),
        ];
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let pooled = tape.roi_max_pool(xv, lo, hi, [4, 4, 4]).unwrap();
        let got = tape.value(pooled).data().to_vec();

        // Brute force: same bin rule, independently restated.
        let bin = |t: usize, n: usize, l: usize| -> (usize, usize) {
            let a = t * l / n;
            let b = ((t + 1) * l / n).max(a + 1).min(l.max(a + 1));
            (a, b.min(l).max(a + 1))
        };
        for c in 0..3 {
            for bd in 0..4 {
                for bh in 0..4 {
                    for bw in 0..4 {
                        let (d0, d1) = bin(bd, 4, hi[0] - lo[0]);
                        let (h0, h1) = bin(bh, 4, hi[1] - lo[1]);
                        let (w0, w1) = bin(bw, 4, hi[2] - lo[2]);
                        let mut best = f64::NEG_INFINITY;
                        for d in d0..d1 {
                            for h in h0..h1 {
                                for w in w0..w1 {
                                    let idx = ((c * dims[0] + lo[0] + d) * dims[1] + lo[1] + h)
                                        * dims[2]
                                        + lo[2]
                                        + w;
                                    best = best.max(x.data()[idx]);
                                }
                            }
                        }
                        let o = ((c * 4 + bd) * 4 + bh) * 4 + bw;
                        assert_eq!(got[o], best);
                    }
                }
            }
        }
    }
}

pub fn encode_decode_round_trip_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for _ in 0..1000 {
        let anchor = rand_box(&mut rng, 48.0);
        let b = rand_box(&mut rng, 48.0);
        let d = encode_box(&b, &anchor).unwrap();
        let back = decode_box(&d, &anchor).unwrap();
        for i in 0..3 {
            assert!((back.center[i] - b.center[i]).abs() < 1e-9);
            assert!((back.size[i] - b.size[i]).abs() < 1e-9);
        }
        // decode then encode on a finite delta is also the identity.
        let d2 = encode_box(&back, &anchor).unwrap();
        for i in 0..6 {
            assert!((d.0[i] - d2.0[i]).abs() < 1e-9);
        }
    }
}

pub fn completion_target_matches_per_voxel_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let extents = [24usize, 24, 24];
    let mut checked = 0usize;
    for _ in 0..300 {
        let lo = [rng.gen_range(2..12), rng.gen_range(2..12), rng.gen_range(2..12)];
        let dims = [rng.gen_range(2..8), rng.gen_range(2..8), rng.gen_range(2..8)];
        let bits: Vec<bool> =
            (0..dims[0] * dims[1] * dims[2]).map(|_| rng.gen_bool(0.7)).collect();
        if !bits.iter().any(|&b| b) {
            continue;
        }
        let gt = InstanceGT { class_id: 0, lo, dims, mask: bits };
        // Jitter the predicted box around the gt box.
        let jitter = |rng: &mut ChaCha8Rng, v: f64| v + rng.gen_range(-1.2..1.2);
        let gb = gt.bbox();
        let pred = Box3::new(
            [
                jitter(&mut rng, gb.center[0]),
                jitter(&mut rng, gb.center[1]),
                jitter(&mut rng, gb.center[2]),
            ],
            [
                (gb.size[0] + rng.gen_range(-1.0..1.5)).max(1.0),
                (gb.size[1] + rng.gen_range(-1.0..1.5)).max(1.0),
                (gb.size[2] + rng.gen_range(-1.0..1.5)).max(1.0),
            ],
        );
        if pred.iou(&gb) < 0.5 {
            continue;
        }
        let t = completion_target(&gt, &pred, extents).unwrap();
        // Brute force m'(v): gt mask inside the gt region, zero otherwise.
        let (plo, phi) = pred.voxel_footprint(extents).unwrap();
        assert_eq!(t.lo, plo);
        for x in 0..t.dims[0] {
            for y in 0..t.dims[1] {
                for z in 0..t.dims[2] {
                    let g = [plo[0] + x, plo[1] + y, plo[2] + z];
                    let want = (0..3).all(|i| g[i] >= lo[i] && g[i] < lo[i] + dims[i])
                        && gt.mask_at([g[0] - lo[0], g[1] - lo[1], g[2] - lo[2]]);
                    assert_eq!(t.bits[(x * t.dims[1] + y) * t.dims[2] + z], want);
                }
            }
        }
        let _ = phi;
        checked += 1;
    }
    assert!(checked > 50, "too few matched cases ({checked})");
}

pub fn anchor_labels_match_exhaustive_iou_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let anchors = AnchorSet {
        small: vec![[4.0, 4.0, 4.0], [6.0, 3.0, 5.0]],
        big: vec![[26.0, 6.0, 8.0]],
        split_threshold_m: rvn_core::detection::ANCHOR_SPLIT_METERS,
        voxel_size: 0.0469,
    };
    for _ in 0..20 {
        let n_gt = rng.gen_range(0..4);
        let gt: Vec<Box3<f64>> = (0..n_gt).map(|_| rand_box(&mut rng, 28.0)).collect();
        let feat = [4usize, 3, 4];
        let t = assign_anchor_targets(&anchors, feat, 4, &gt, &mut rng.clone(), 64);

        // Exhaustive recomputation, independently looping anchors and gts.
        let vol = feat[0] * feat[1] * feat[2];
        for (scale, sizes) in
            [anchors.small.clone(), anchors.big.clone()].into_iter().enumerate()
        {
            for (ai, size) in sizes.iter().enumerate() {
                for d in 0..feat[0] {
                    for h in 0..feat[1] {
                        for w in 0..feat[2] {
                            let abox = placed_anchor(*size, [d, h, w], 4);
                            let best =
                                gt.iter().map(|g| abox.iou(g)).fold(0.0f64, f64::max);
                            let flat = ((ai * feat[0] + d) * feat[1] + h) * feat[2] + w;
                            let label = t.scales[scale].labels[flat];
                            if best >= POSITIVE_IOU {
                                assert_eq!(label, AnchorLabel::Positive);
                            } else if best < NEGATIVE_IOU {
                                // May be promoted by the argmax rule.
                                assert!(
                                    label == AnchorLabel::Negative
                                        || label == AnchorLabel::Positive
                                );
                                if label == AnchorLabel::Positive {
                                    // Then it must be the global argmax of its gt.
                                    let gi = t.scales[scale].matched_gt[flat];
                                    let iou = abox.iou(&gt[gi]);
                                    assert!(iou > 0.0);
                                }
                            } else {
                                assert!(
                                    label == AnchorLabel::Ignore
                                        || label == AnchorLabel::Positive
                                );
                            }
                        }
                    }
                }
            }
        }
        // Every gt with positive overlap owns at least one positive anchor.
        for (gi, g) in gt.iter().enumerate() {
            let mut any_overlap = false;
            let mut owned = false;
            for (scale, sizes) in
                [anchors.small.clone(), anchors.big.clone()].into_iter().enumerate()
            {
                for (ai, size) in sizes.iter().enumerate() {
                    for d in 0..feat[0] {
                        for h in 0..feat[1] {
                            for w in 0..feat[2] {
                                let abox = placed_anchor(*size, [d, h, w], 4);
                                if abox.iou(g) > 0.0 {
                                    any_overlap = true;
                                }
                                let flat =
                                    ((ai * feat[0] + d) * feat[1] + h) * feat[2] + w;
                                if t.scales[scale].labels[flat] == AnchorLabel::Positive
                                    && t.scales[scale].matched_gt[flat] == gi
                                {
                                    owned = true;
                                }
                            }
                        }
                    }
                }
            }
            if any_overlap {
                assert!(owned, "gt {gi} owns no positive anchor");
            }
        }
        let _ = vol;
    }
}

pub fn omega_matching_against_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    for _ in 0..300 {
        let preds: Vec<Box3<f64>> = (0..rng.gen_range(0..5)).map(|_| rand_box(&mut rng, 20.0)).collect();
        let gts: Vec<Box3<f64>> = (0..rng.gen_range(0..4)).map(|_| rand_box(&mut rng, 20.0)).collect();
        let got = match_predictions(&preds, &gts);
        for (pi, p) in preds.iter().enumerate() {
            let mut best = (0.0f64, usize::MAX);
            for (gi, g) in gts.iter().enumerate() {
                let iou = p.iou(g);
                if iou > best.0 {
                    best = (iou, gi);
                }
            }
            let found = got.iter().find(|m| m.pred == pi);
            if best.0 >= 0.5 {
                assert_eq!(found.map(|m| m.gt), Some(best.1));
            } else {
                assert!(found.is_none());
            }
        }
        // Predictions appear at most once.
        let mut seen = std::collections::HashSet::new();
        for m in &got {
            assert!(seen.insert(m.pred));
        }
    }
}

pub fn huber_tape_matches_branch_formulas() {
    // Direct evaluation of both branch formulas as the oracle.
    let mut rng = ChaCha8Rng::seed_from_u64(38);
    for _ in 0..200 {
        let n = rng.gen_range(1..9);
        let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let tgt: Vec<f64> = (0..n).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let want: f64 = pred
            .iter()
            .zip(tgt.iter())
            .map(|(&p, &t)| {
                let d: f64 = p - t;
                if d.abs() <= 2.0 {
                    0.5 * d * d
                } else {
                    d.abs()
                }
            })
            .sum::<f64>()
            / n as f64;
        let mut tape = Tape::new();
        let pv = tape.leaf(Tensor::new(&[n], pred).unwrap(), false);
        let l = tape.huber(pv, Tensor::new(&[n], tgt).unwrap(), 2.0).unwrap();
        assert!((tape.value(l).item() - want).abs() < 1e-14);
    }
}
