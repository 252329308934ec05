//! Differentiable back-projection of per-view 2D feature maps into the
//! voxel grid with element-wise view pooling.

use crate::error::{Error, Result};
use crate::scene::CameraView;
use crate::tensor::tape::{CustomOp, Tape, Var};
use crate::tensor::Tensor;

use super::project_voxel;

/// Element-wise pooling across views.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewPooling {
    /// Per-channel maximum; gradient routes to the argmax source only.
    Max,
    /// Per-channel mean over contributing views.
    Mean,
}

/// Back-projected feature grid on the tape, plus per-voxel view counts.
pub struct FeatureVolume {
    pub var: Var,
    pub channels: usize,
    pub extents: [usize; 3],
    pub view_count: Vec<u32>,
}

#[derive(Debug)]
struct ViewPoolBackward {
    mode: ViewPooling,
    feat_numel: usize,
    feat_spatial: usize,
    n_views: usize,
    channels: usize,
    n_vox: usize,
    /// Max pooling: winner view per (channel, voxel), u32::MAX = none.
    winner_view: Vec<u32>,
    /// Max pooling: winner pixel offset into the view's feature plane.
    winner_pix: Vec<u32>,
    /// Mean pooling: contribution list per voxel.
    offsets: Vec<u32>,
    entries: Vec<(u32, u32)>,
}

impl CustomOp<f64> for ViewPoolBackward {
    fn backward(&self, out_grad: &[f64]) -> Vec<Vec<f64>> {
        let mut grads: Vec<Vec<f64>> = (0..self.n_views).map(|_| vec![0.0; self.feat_numel]).collect();
        match self.mode {
            ViewPooling::Max => {
                for c in 0..self.channels {
                    for vox in 0..self.n_vox {
                        let i = c * self.n_vox + vox;
                        let view = self.winner_view[i];
                        if view == u32::MAX {
                            continue;
                        }
                        let pix = self.winner_pix[i] as usize;
                        grads[view as usize][c * self.feat_spatial + pix] += out_grad[i];
                    }
                }
            }
            ViewPooling::Mean => {
                for vox in 0..self.n_vox {
                    let span = self.offsets[vox] as usize..self.offsets[vox + 1] as usize;
                    let n = span.len();
                    if n == 0 {
                        continue;
                    }
                    let inv = 1.0 / n as f64;
                    for &(view, pix) in &self.entries[span] {
                        for c in 0..self.channels {
                            grads[view as usize][c * self.feat_spatial + pix as usize] +=
                                out_grad[c * self.n_vox + vox] * inv;
                        }
                    }
                }
            }
        }
        grads
    }
}

/// Pool per-view 2D feature maps into a `[C, nx, ny, nz]` volume.
///
/// Every feature map must share the shape `[C, H/stride, W/stride]` and be
/// aligned to its view's image by `stride`. A voxel samples the feature at
/// its projected pixel (nearest neighbor at feature resolution) from every
/// view that observes it; views are pooled element-wise. Unobserved voxels
/// hold exactly zeros.
pub fn backproject_features(
    tape: &mut Tape<f64>,
    features: &[Var],
    views: &[CameraView],
    stride: usize,
    origin: [usize; 3],
    extents: [usize; 3],
    voxel_size: f64,
    mode: ViewPooling,
) -> Result<FeatureVolume> {
    if features.len() != views.len() {
        return Err(Error::Invalid(format!(
            "{} feature maps for {} views",
            features.len(),
            views.len()
        )));
    }
    if views.is_empty() {
        return Err(Error::Invalid("back-projection needs at least one view".into()));
    }
    let fshape = tape.value(features[0]).shape().to_vec();
    if fshape.len() != 3 {
        return Err(Error::Shape(format!("feature maps must be [C,H,W]; got {fshape:?}")));
    }
    let channels = fshape[0];
    let (fh, fw) = (fshape[1], fshape[2]);
    for (f, view) in features.iter().zip(views.iter()) {
        if tape.value(*f).shape() != fshape.as_slice() {
            return Err(Error::Shape("feature maps differ in shape across views".into()));
        }
        if view.width % stride != 0 || view.height % stride != 0 {
            return Err(Error::Invalid(format!(
                "feature stride {stride} does not divide image {}x{}",
                view.width, view.height
            )));
        }
        if view.width / stride != fw || view.height / stride != fh {
            return Err(Error::Shape(format!(
                "feature map {}x{} does not match image {}x{} at stride {stride}",
                fh, fw, view.height, view.width
            )));
        }
    }

    let n_vox = extents[0] * extents[1] * extents[2];
    let feat_spatial = fh * fw;
    let mut out = vec![0.0f64; channels * n_vox];
    let mut view_count = vec![0u32; n_vox];
    let mut winner_view = vec![u32::MAX; channels * n_vox];
    let mut winner_pix = vec![0u32; channels * n_vox];
    let mut offsets = vec![0u32; n_vox + 1];
    let mut entries: Vec<(u32, u32)> = Vec::new();

    let feat_values: Vec<&Tensor<f64>> = features.iter().map(|&f| tape.value(f)).collect();
    let feat_data: Vec<&[f64]> = feat_values.iter().map(|t| t.data()).collect();

    let mut vox = 0usize;
    for x in 0..extents[0] {
        for y in 0..extents[1] {
            for z in 0..extents[2] {
                for (vi, view) in views.iter().enumerate() {
                    let pr = project_voxel(
                        [origin[0] + x, origin[1] + y, origin[2] + z],
                        view,
                        voxel_size,
                    );
                    if !pr.observed {
                        continue;
                    }
                    let pixel = pr.pixel.unwrap();
                    let (fx, fy) = ((pixel[0] / stride).min(fw - 1), (pixel[1] / stride).min(fh - 1));
                    let pix = (fy * fw + fx) as u32;
                    let n_seen = view_count[vox];
                    view_count[vox] = n_seen + 1;
                    entries.push((vi as u32, pix));
                    match mode {
                        ViewPooling::Max => {
                            for c in 0..channels {
                                let fval = feat_data[vi][c * feat_spatial + pix as usize];
                                let o = c * n_vox + vox;
                                if n_seen == 0 || fval > out[o] {
                                    out[o] = fval;
                                    winner_view[o] = vi as u32;
                                    winner_pix[o] = pix;
                                }
                            }
                        }
                        ViewPooling::Mean => {
                            for c in 0..channels {
                                let fval = feat_data[vi][c * feat_spatial + pix as usize];
                                out[c * n_vox + vox] += fval;
                            }
                        }
                    }
                }
                offsets[vox + 1] = entries.len() as u32;
                if mode == ViewPooling::Mean && view_count[vox] > 1 {
                    let inv = 1.0 / view_count[vox] as f64;
                    for c in 0..channels {
                        out[c * n_vox + vox] *= inv;
                    }
                }
                vox += 1;
            }
        }
    }

    let value = Tensor::new(&[channels, extents[0], extents[1], extents[2]], out)?;
    let op = ViewPoolBackward {
        mode,
        feat_numel: channels * feat_spatial,
        feat_spatial,
        n_views: views.len(),
        channels,
        n_vox,
        winner_view,
        winner_pix,
        offsets,
        entries,
    };
    let var = tape.push_custom(features.to_vec(), value, Box::new(op));
    Ok(FeatureVolume { var, channels, extents, view_count })
}
