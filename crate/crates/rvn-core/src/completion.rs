//! Per-instance completion targets and losses: the matched pair set, the
//! cropped-and-masked occupancy target m', and the scene-level proxy loss.

use crate::error::{Error, Result};
use crate::geom::Box3;
use crate::scene::InstanceGT;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Minimum box IoU for a prediction to join the training pair set.
pub const MATCH_IOU: f64 = 0.5;

/// Prediction index paired with its matched ground-truth index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchedPair {
    pub pred: usize,
    pub gt: usize,
}

/// Pair each prediction with its highest-IoU ground truth when that IoU is
/// at least 0.5 (ties to the lower gt index). Multiple predictions may match
/// the same gt; unmatched predictions are dropped. An empty result is valid.
pub fn match_predictions(pred_boxes: &[Box3<f64>], gt_boxes: &[Box3<f64>]) -> Vec<MatchedPair> {
    let mut out = Vec::new();
    for (pi, pb) in pred_boxes.iter().enumerate() {
        let mut best = 0.0f64;
        let mut best_gt = usize::MAX;
        for (gi, gb) in gt_boxes.iter().enumerate() {
            let iou = pb.iou(gb);
            if iou > best {
                best = iou;
                best_gt = gi;
            }
        }
        if best >= MATCH_IOU && best_gt != usize::MAX {
            out.push(MatchedPair { pred: pi, gt: best_gt });
        }
    }
    out
}

/// Completion target over a predicted box footprint: gt occupancy inside the
/// intersection with the gt box, zero everywhere else.
#[derive(Clone, Debug, PartialEq)]
pub struct CompletionTarget {
    pub lo: [usize; 3],
    pub dims: [usize; 3],
    pub bits: Vec<bool>,
}

impl CompletionTarget {
    pub fn to_tensor(&self, shape: &[usize]) -> Result<Tensor<f64>> {
        let data: Vec<f64> = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::new(shape, data)
    }
}

/// Build m' for a gt instance (in grid coordinates) against a predicted box.
/// Both live on the same voxel lattice, so this is a crop: the predicted
/// footprint is scanned and each voxel takes the gt mask value when it lies
/// in the gt region, 0 otherwise.
pub fn completion_target(
    gt: &InstanceGT,
    pred_box: &Box3<f64>,
    grid_extents: [usize; 3],
) -> Result<CompletionTarget> {
    if pred_box.iou(&gt.bbox()) < MATCH_IOU {
        return Err(Error::Invalid(format!(
            "completion target wants IoU >= {MATCH_IOU}; got {}",
            pred_box.iou(&gt.bbox())
        )));
    }
    let (lo, hi) = pred_box
        .voxel_footprint(grid_extents)
        .ok_or_else(|| Error::Invalid("predicted box has no voxel footprint".into()))?;
    let dims = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let mut bits = vec![false; dims[0] * dims[1] * dims[2]];
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let g = [lo[0] + x, lo[1] + y, lo[2] + z];
                let inside_gt = (0..3).all(|i| g[i] >= gt.lo[i] && g[i] < gt.lo[i] + gt.dims[i]);
                if inside_gt {
                    let local = [g[0] - gt.lo[0], g[1] - gt.lo[1], g[2] - gt.lo[2]];
                    bits[(x * dims[1] + y) * dims[2] + z] = gt.mask_at(local);
                }
            }
        }
    }
    Ok(CompletionTarget { lo, dims, bits })
}

/// Mean over pairs of the per-pair mean BCE-with-logits between predicted
/// mask logits and their m' targets. Empty pair set yields the constant 0.
pub fn completion_loss(tape: &mut Tape<f64>, pairs: &[(Var, CompletionTarget)]) -> Result<Var> {
    let mut terms = Vec::with_capacity(pairs.len());
    for (logits, target) in pairs {
        let shape = tape.value(*logits).shape().to_vec();
        let t = target.to_tensor(&shape)?;
        terms.push(tape.bce_with_logits(*logits, t)?);
    }
    Ok(crate::detection::mean_of_scalars(tape, &terms))
}

/// Voxelwise union of all gt complete masks over the chunk grid, as 0/1.
pub fn proxy_target(gt: &[InstanceGT], extents: [usize; 3]) -> Tensor<f64> {
    let n = extents[0] * extents[1] * extents[2];
    let mut data = vec![0.0f64; n];
    for inst in gt {
        for v in inst.occupied_voxels() {
            if v.iter().zip(extents.iter()).all(|(a, b)| a < b) {
                data[(v[0] * extents[1] + v[1]) * extents[2] + v[2]] = 1.0;
            }
        }
    }
    Tensor::new(&[1, extents[0], extents[1], extents[2]], data).expect("proxy target shape")
}

/// BCE-with-logits of the full-resolution proxy logits against the union of
/// complete instance masks.
pub fn proxy_loss(tape: &mut Tape<f64>, proxy_logits: Var, target: Tensor<f64>) -> Result<Var> {
    tape.bce_with_logits(proxy_logits, target)
}
