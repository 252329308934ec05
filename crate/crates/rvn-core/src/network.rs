//! The detection + completion network: a 2D color CNN, a two-stream volume
//! entry, an encoder-decoder backbone of bottleneck residual blocks, RPN
//! heads at two anchor scales, an RoI classification head and a per-class
//! mask completion head.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ViewPooling;
use crate::geom::Box3;
use crate::tensor::optim::{Bindings, ParamId, ParamSet};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Network hyperparameters; the full preset mirrors the published layer
/// tables, the tiny preset shrinks every channel width by 4x for fast tests.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub n_classes: usize,
    /// Channel width of the two entry streams (full: 32, tiny: 8).
    pub base_width: usize,
    pub chunk_extents: [usize; 3],
    pub n_small_anchors: usize,
    pub n_big_anchors: usize,
    /// Total downsampling of the 2D color CNN.
    pub feature_stride_2d: usize,
    /// Weights of (objectness, box, class, completion, proxy) losses.
    pub loss_weights: [f64; 5],
    /// Feed zeros instead of back-projected color features (ablation).
    pub use_color: bool,
    /// Train the scene-level proxy loss (ablation).
    pub use_proxy: bool,
    /// Train and run the per-instance completion head (ablation).
    pub use_completion: bool,
    /// Apply the second-stage per-class box refinement at inference.
    pub apply_refinement: bool,
    pub view_pooling: PoolingMode,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    Max,
    Mean,
}

impl From<PoolingMode> for ViewPooling {
    fn from(m: PoolingMode) -> Self {
        match m {
            PoolingMode::Max => ViewPooling::Max,
            PoolingMode::Mean => ViewPooling::Mean,
        }
    }
}

impl ModelConfig {
    pub fn full(n_classes: usize, n_small: usize, n_big: usize) -> Self {
        Self {
            n_classes,
            base_width: 32,
            chunk_extents: [96, 48, 96],
            n_small_anchors: n_small,
            n_big_anchors: n_big,
            feature_stride_2d: 8,
            loss_weights: [1.0; 5],
            use_color: true,
            use_proxy: true,
            use_completion: true,
            apply_refinement: true,
            view_pooling: PoolingMode::Max,
        }
    }

    pub fn tiny(n_classes: usize, n_small: usize, n_big: usize) -> Self {
        Self {
            base_width: 8,
            chunk_extents: [32, 16, 32],
            ..Self::full(n_classes, n_small, n_big)
        }
    }

    /// Color-volume channel count fed into the second entry stream.
    pub fn color_channels(&self) -> usize {
        4 * self.base_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width < 2 || self.base_width % 2 != 0 {
            return Err(Error::Config("base_width must be an even number >= 2".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be at least 2".into()));
        }
        if self.n_small_anchors == 0 || self.n_big_anchors == 0 {
            return Err(Error::Config(
                "both anchor scales need at least one anchor (clustering produced an empty set)"
                    .into(),
            ));
        }
        if self.chunk_extents.iter().any(|&e| e % 4 != 0 || e == 0) {
            return Err(Error::Config("chunk extents must be positive multiples of 4".into()));
        }
        if self.feature_stride_2d == 0 || !self.feature_stride_2d.is_power_of_two() {
            return Err(Error::Config("feature_stride_2d must be a power of two".into()));
        }
        Ok(())
    }
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Feature maps produced by one backbone forward pass.
pub struct FeaturePyramid {
    /// Quarter-resolution features after the combine stage (small anchors).
    pub f2: Var,
    /// Quarter-resolution features after the encoder stage (big anchors).
    pub f3: Var,
    /// Full-resolution decoder output feeding completion.
    pub f5: Var,
    /// Full-resolution 1-channel proxy occupancy logits.
    pub proxy: Var,
    /// Half-resolution two-stream concat, kept for the decoder skip.
    pub skip_half: Var,
}

/// Parameter registry plus wiring for the whole network.
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet<f64>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn weight(&mut self, params: &mut ParamSet<f64>, name: &str, shape: &[usize], fan_in: usize) {
        // Kaiming-uniform fan-in.
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        params.register(&format!("{name}.weight"), Tensor::new(shape, data).unwrap()).unwrap();
    }

    /// Conv/linear weight `[out, in, k...]` plus zero bias.
    fn conv(&mut self, params: &mut ParamSet<f64>, name: &str, shape: &[usize], fan_in: usize) {
        self.weight(params, name, shape, fan_in);
        params.register(&format!("{name}.bias"), Tensor::zeros(&[shape[0]])).unwrap();
    }

    /// Transposed-conv weight `[in, out, k, k, k]` plus zero bias.
    fn convt(&mut self, params: &mut ParamSet<f64>, name: &str, shape: &[usize], fan_in: usize) {
        self.weight(params, name, shape, fan_in);
        params.register(&format!("{name}.bias"), Tensor::zeros(&[shape[1]])).unwrap();
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let w = config.base_width;
        let k = config.n_classes;
        let (ns, nb) = (config.n_small_anchors, config.n_big_anchors);
        let mut params = ParamSet::new();
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };

        // 2D color CNN: three stride-2 stages ending at 4w channels.
        init.conv(&mut params, "color_cnn.conv0", &[w, 3, 3, 3], 3 * 9);
        init.conv(&mut params, "color_cnn.conv1", &[2 * w, w, 3, 3], w * 9);
        init.conv(&mut params, "color_cnn.conv2", &[4 * w, 2 * w, 3, 3], 2 * w * 9);

        // Entry streams.
        init.conv(&mut params, "geometry0", &[w, 2, 2, 2, 2], 2 * 8);
        Self::res_block(&mut init, &mut params, "block0", w);
        init.conv(&mut params, "color1", &[w, 4 * w, 2, 2, 2], 4 * w * 8);
        Self::res_block(&mut init, &mut params, "block1", w);

        // Encoder.
        init.conv(&mut params, "combine2", &[4 * w, 2 * w, 2, 2, 2], 2 * w * 8);
        Self::res_block(&mut init, &mut params, "block2", 4 * w);
        init.conv(&mut params, "encoder3", &[4 * w, 4 * w, 3, 3, 3], 4 * w * 27);
        Self::res_block(&mut init, &mut params, "block3", 4 * w);

        // Decoder (transposed convs store weights as [in, out, k, k, k]).
        init.convt(&mut params, "skip4", &[4 * w, 2 * w, 2, 2, 2], 4 * w * 8);
        Self::res_block(&mut init, &mut params, "block4", 2 * w);
        init.convt(&mut params, "decoder5", &[4 * w, w, 2, 2, 2], 4 * w * 8);
        Self::res_block(&mut init, &mut params, "block5", w);
        init.conv(&mut params, "proxy5", &[1, w, 1, 1, 1], w);

        // RPN heads.
        init.conv(&mut params, "rpn6", &[8 * w, 4 * w, 3, 3, 3], 4 * w * 27);
        init.conv(&mut params, "rpncls7a", &[2 * ns, 8 * w, 1, 1, 1], 8 * w);
        init.conv(&mut params, "rpnbbox7b", &[6 * ns, 8 * w, 1, 1, 1], 8 * w);
        init.conv(&mut params, "rpn8", &[8 * w, 4 * w, 3, 3, 3], 4 * w * 27);
        init.conv(&mut params, "rpncls9a", &[2 * nb, 8 * w, 1, 1, 1], 8 * w);
        init.conv(&mut params, "rpnbbox9b", &[6 * nb, 8 * w, 1, 1, 1], 8 * w);

        // Classification head: channel reduction, RoI pooling to 4^3, MLP.
        init.conv(&mut params, "reduce10", &[2 * w, 4 * w, 1, 1, 1], 4 * w);
        let flat = 2 * w * 64;
        init.conv(&mut params, "cls10a", &[8 * w, flat], flat);
        init.conv(&mut params, "cls10b", &[4 * w, 8 * w], 8 * w);
        init.conv(&mut params, "cls10c", &[4 * w, 4 * w], 4 * w);
        init.conv(&mut params, "clscls10", &[k, 4 * w], 4 * w);
        init.conv(&mut params, "clsbbox10", &[6 * k, 4 * w], 4 * w);

        // Mask completion head: same-resolution convs, kernels 9/7/5/3/1.
        init.conv(&mut params, "mask11", &[w, w, 9, 9, 9], w * 729);
        init.conv(&mut params, "mask12", &[w, w, 7, 7, 7], w * 343);
        init.conv(&mut params, "mask13", &[w, w, 5, 5, 5], w * 125);
        init.conv(&mut params, "mask14", &[w, w, 3, 3, 3], w * 27);
        init.conv(&mut params, "mask15", &[k, w, 1, 1, 1], w);

        Ok(Model { config, params })
    }

    fn res_block(init: &mut Init, params: &mut ParamSet<f64>, name: &str, n: usize) {
        let h = n / 2;
        init.conv(params, &format!("{name}.conv0"), &[h, n, 1, 1, 1], n);
        init.conv(params, &format!("{name}.conv1"), &[h, h, 3, 3, 3], h * 27);
        init.conv(params, &format!("{name}.conv2"), &[n, h, 1, 1, 1], h);
    }

    pub fn p(&self, name: &str) -> ParamId {
        self.params.id(name).unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Anchor-scale routing for a box without a proposal origin: big when any
    /// axis exceeds the physical split threshold.
    pub fn route_scale(&self, bbox: &Box3<f64>, voxel_size: f64) -> usize {
        let thr = crate::detection::ANCHOR_SPLIT_METERS / voxel_size;
        if bbox.size.iter().any(|&s| s > thr) {
            1
        } else {
            0
        }
    }
}

/// One forward pass worth of parameter bindings on a tape.
pub struct ForwardPass {
    vars: Vec<Var>,
    bindings: Bindings,
}

impl ForwardPass {
    pub fn new(tape: &mut Tape<f64>, model: &Model, trainable: bool) -> Self {
        let mut bindings = Bindings::new();
        let ids: Vec<ParamId> = model.params.iter().map(|(id, _, _)| id).collect();
        let vars =
            ids.iter().map(|&id| bindings.bind(tape, &model.params, id, trainable)).collect();
        Self { vars, bindings }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Copy tape gradients back into the model (additive).
    pub fn harvest(&self, tape: &Tape<f64>, model: &mut Model) -> Result<()> {
        self.bindings.harvest(tape, &mut model.params)
    }
}

fn conv_in_relu(
    tape: &mut Tape<f64>,
    model: &Model,
    fp: &ForwardPass,
    name: &str,
    x: Var,
    stride: [usize; 3],
    pad: [usize; 3],
    transposed: bool,
) -> Result<Var> {
    let w = fp.var(model.p(&format!("{name}.weight")));
    let b = fp.var(model.p(&format!("{name}.bias")));
    let y = if transposed {
        tape.conv_transpose3d(x, w, b, stride, pad)?
    } else {
        tape.conv3d(x, w, b, stride, pad)?
    };
    let n = tape.instance_norm(y, INSTANCE_NORM_EPS)?;
    Ok(tape.relu(n))
}

/// Bottleneck residual block: 1-3-1 convs with instance norm and relu, a
/// skip-add of the input before the final relu.
fn res_block_forward(
    tape: &mut Tape<f64>,
    model: &Model,
    fp: &ForwardPass,
    name: &str,
    x: Var,
) -> Result<Var> {
    let c0 = conv_in_relu(tape, model, fp, &format!("{name}.conv0"), x, [1; 3], [0; 3], false)?;
    let c1 = conv_in_relu(tape, model, fp, &format!("{name}.conv1"), c0, [1; 3], [1; 3], false)?;
    let w2 = fp.var(model.p(&format!("{name}.conv2.weight")));
    let b2 = fp.var(model.p(&format!("{name}.conv2.bias")));
    let c2 = tape.conv3d(c1, w2, b2, [1; 3], [0; 3])?;
    let n2 = tape.instance_norm(c2, INSTANCE_NORM_EPS)?;
    let s = tape.add(n2, x)?;
    Ok(tape.relu(s))
}

/// 2D color CNN: three stride-2 conv/norm/relu stages, 3 -> 4w channels,
/// total feature stride 8.
pub fn color_cnn_forward(
    tape: &mut Tape<f64>,
    model: &Model,
    fp: &ForwardPass,
    image: Var,
) -> Result<Var> {
    let mut x = image;
    for i in 0..3 {
        let w = fp.var(model.p(&format!("color_cnn.conv{i}.weight")));
        let b = fp.var(model.p(&format!("color_cnn.conv{i}.bias")));
        let y = tape.conv2d(x, w, b, [2, 2], [1, 1])?;
        let n = tape.instance_norm(y, INSTANCE_NORM_EPS)?;
        x = tape.relu(n);
    }
    Ok(x)
}

/// Run the two-stream entry and encoder-decoder backbone.
///
/// `tsdf_input` is the 2-channel (value, observed flag) grid; `color_volume`
/// is the back-projected feature grid or `None` for the no-color ablation
/// (zeros are substituted, architecture unchanged).
pub fn forward_backbone(
    tape: &mut Tape<f64>,
    model: &Model,
    fp: &ForwardPass,
    tsdf_input: Var,
    color_volume: Option<Var>,
) -> Result<FeaturePyramid> {
    let shape = tape.value(tsdf_input).shape().to_vec();
    if shape.len() != 4 || shape[0] != 2 {
        return Err(Error::Shape(format!("backbone wants [2,D,H,W] TSDF input; got {shape:?}")));
    }
    let dims = [shape[1], shape[2], shape[3]];
    if dims.iter().any(|&d| d % 4 != 0) {
        return Err(Error::Shape(format!("input extents {dims:?} must be divisible by 4")));
    }
    let color = match color_volume {
        Some(c) => {
            let cs = tape.value(c).shape().to_vec();
            if cs != [model.config.color_channels(), dims[0], dims[1], dims[2]] {
                return Err(Error::Shape(format!(
                    "color volume shape {cs:?} does not match [{}, {}, {}, {}]",
                    model.config.color_channels(),
                    dims[0],
                    dims[1],
                    dims[2]
                )));
            }
            c
        }
        None => tape.constant(Tensor::zeros(&[
            model.config.color_channels(),
            dims[0],
            dims[1],
            dims[2],
        ])),
    };

    let g = conv_in_relu(tape, model, fp, "geometry0", tsdf_input, [2; 3], [0; 3], false)?;
    let g = res_block_forward(tape, model, fp, "block0", g)?;
    let c = conv_in_relu(tape, model, fp, "color1", color, [2; 3], [0; 3], false)?;
    let c = res_block_forward(tape, model, fp, "block1", c)?;
    let skip_half = tape.concat_channels(g, c)?;

    let x = conv_in_relu(tape, model, fp, "combine2", skip_half, [2; 3], [0; 3], false)?;
    let f2 = res_block_forward(tape, model, fp, "block2", x)?;
    let e = conv_in_relu(tape, model, fp, "encoder3", f2, [1; 3], [1; 3], false)?;
    let f3 = res_block_forward(tape, model, fp, "block3", e)?;

    let up = conv_in_relu(tape, model, fp, "skip4", f3, [2; 3], [0; 3], true)?;
    let up = res_block_forward(tape, model, fp, "block4", up)?;
    let cat5 = tape.concat_channels(skip_half, up)?;
    let d = conv_in_relu(tape, model, fp, "decoder5", cat5, [2; 3], [0; 3], true)?;
    let f5 = res_block_forward(tape, model, fp, "block5", d)?;

    let pw = fp.var(model.p("proxy5.weight"));
    let pb = fp.var(model.p("proxy5.bias"));
    let proxy = tape.conv3d(f5, pw, pb, [1; 3], [0; 3])?;

    Ok(FeaturePyramid { f2, f3, f5, proxy, skip_half })
}

/// RPN heads over both scales: 3x3x3 conv to 8w channels, then 1x1x1 heads
/// for the (negative, positive) objectness pairs and 6-vector deltas.
pub fn rpn_forward(
    tape: &mut Tape<f64>,
    model: &Model,
    fp: &ForwardPass,
    f2: Var,
    f3: Var,
) -> Result<Vec<crate::detection::RpnScaleOut>> {
    let mut out = Vec::with_capacity(2);
    for (scale, (feat, trunk, cls, bbox)) in [
        (f2, "rpn6", "rpncls7a", "rpnbbox7b"),
        (f3, "rpn8", "rpncls9a", "rpnbbox9b"),
    ]
    .into_iter()
    .enumerate()
    {
        let t = conv_in_relu(tape, model, fp, trunk, feat, [1; 3], [1; 3], false)?;
        let cw = fp.var(model.p(&format!("{cls}.weight")));
        let cb = fp.var(model.p(&format!("{cls}.bias")));
        let cls_map = tape.conv3d(t, cw, cb, [1; 3], [0; 3])?;
        let bw = fp.var(model.p(&format!("{bbox}.weight")));
        let bb = fp.var(model.p(&format!("{bbox}.bias")));
        let bbox_map = tape.conv3d(t, bw, bb, [1; 3], [0; 3])?;
        let s = tape.value(cls_map).shape().to_vec();
        out.push(crate::detection::RpnScaleOut {
            cls: cls_map,
            bbox: bbox_map,
            dims: [s[1], s[2], s[3]],
            n_anchors: if scale == 0 {
                model.config.n_small_anchors
            } else {
                model.config.n_big_anchors
            },
        });
    }
    Ok(out)
}

/// An RoI to classify: its box in voxel coordinates and the anchor scale
/// that proposed it (0 = small / F2, 1 = big / F3).
#[derive(Clone, Copy, Debug)]
pub struct RoiSpec {
    pub bbox: Box3<f64>,
    pub scale: usize,
}

pub struct RoiOut {
    /// Class logits, `[n_classes]`.
    pub class_logits: Var,
    /// Per-class box refinements, `[6 * n_classes]`.
    pub refine: Var,
}

/// Classify RoIs: reduce F2/F3 to 2w channels with a shared 1x1x1 conv,
/// max-pool each box footprint (at stride 4) to 4x4x4, then run the MLP.
/// Degenerate boxes (any extent below one voxel) are rejected.
pub fn classify_rois(
    tape: &mut Tape<f64>,
    model: &Model,
    fp: &ForwardPass,
    f2: Var,
    f3: Var,
    rois: &[RoiSpec],
) -> Result<Vec<RoiOut>> {
    let rw = fp.var(model.p("reduce10.weight"));
    let rb = fp.var(model.p("reduce10.bias"));
    let red = [
        tape.conv3d(f2, rw, rb, [1; 3], [0; 3])?,
        tape.conv3d(f3, rw, rb, [1; 3], [0; 3])?,
    ];
    let feat_shape = tape.value(red[0]).shape().to_vec();
    let feat_dims = [feat_shape[1], feat_shape[2], feat_shape[3]];
    let flat_len = 2 * model.config.base_width * 64;

    let mut out = Vec::with_capacity(rois.len());
    for roi in rois {
        if roi.bbox.size.iter().any(|&s| s < 1.0) {
            return Err(Error::Invalid(format!("degenerate RoI box {:?}", roi.bbox)));
        }
        let (lo, hi) = roi
            .bbox
            .voxel_footprint_at_stride(feat_dims, 4)
            .ok_or_else(|| Error::Invalid(format!("RoI {:?} outside the volume", roi.bbox)))?;
        let pooled = tape.roi_max_pool(red[roi.scale.min(1)], lo, hi, [4, 4, 4])?;
        let flat = tape.reshape(pooled, &[flat_len])?;
        let mut x = flat;
        for name in ["cls10a", "cls10b", "cls10c"] {
            let w = fp.var(model.p(&format!("{name}.weight")));
            let b = fp.var(model.p(&format!("{name}.bias")));
            let y = tape.linear(x, w, b)?;
            x = tape.relu(y);
        }
        let cw = fp.var(model.p("clscls10.weight"));
        let cb = fp.var(model.p("clscls10.bias"));
        let class_logits = tape.linear(x, cw, cb)?;
        let bw = fp.var(model.p("clsbbox10.weight"));
        let bb = fp.var(model.p("clsbbox10.bias"));
        let refine = tape.linear(x, bw, bb)?;
        out.push(RoiOut { class_logits, refine });
    }
    Ok(out)
}

/// Per-box completion: crop F5 at the box footprint, run the five
/// same-resolution convs (kernels 9/7/5/3/1, same-padded) and return the
/// selected class channel's occupancy logits plus the footprint bounds.
pub fn complete_instances(
    tape: &mut Tape<f64>,
    model: &Model,
    fp: &ForwardPass,
    f5: Var,
    boxes: &[(Box3<f64>, usize)],
) -> Result<Vec<(Var, ([usize; 3], [usize; 3]))>> {
    let fshape = tape.value(f5).shape().to_vec();
    let dims = [fshape[1], fshape[2], fshape[3]];
    let mut out = Vec::with_capacity(boxes.len());
    for &(bbox, class_id) in boxes {
        if bbox.size.iter().any(|&s| s < 1.0) {
            return Err(Error::Invalid(format!("degenerate completion box {bbox:?}")));
        }
        if class_id >= model.config.n_classes {
            return Err(Error::Invalid(format!("class id {class_id} out of range")));
        }
        let (lo, hi) = bbox
            .voxel_footprint(dims)
            .ok_or_else(|| Error::Invalid(format!("box {bbox:?} outside the volume")))?;
        let mut x = tape.crop3d(f5, lo, hi)?;
        for (name, pad) in
            [("mask11", 4usize), ("mask12", 3), ("mask13", 2), ("mask14", 1)]
        {
            x = conv_in_relu(tape, model, fp, name, x, [1; 3], [pad; 3], false)?;
        }
        let w = fp.var(model.p("mask15.weight"));
        let b = fp.var(model.p("mask15.bias"));
        let logits_all = tape.conv3d(x, w, b, [1; 3], [0; 3])?;
        let picked = tape.slice_channels(logits_all, class_id, 1)?;
        let d = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        let logits = tape.reshape(picked, &[d[0], d[1], d[2]])?;
        out.push((logits, (lo, hi)));
    }
    Ok(out)
}

/// Declarative layer shapes for a given input size (channel counts read off
/// the registered weights, spatial extents from the stride algebra).
pub struct LayerSpec {
    pub name: &'static str,
    pub out_channels: usize,
    pub out_extents: [usize; 3],
}

impl Model {
    pub fn layer_specs(&self, input: [usize; 3]) -> Vec<LayerSpec> {
        let half = input.map(|d| d / 2);
        let quarter = input.map(|d| d / 4);
        let w = |name: &str| self.params.value(self.p(&format!("{name}.weight"))).dim(0);
        let wt = |name: &str| self.params.value(self.p(&format!("{name}.weight"))).dim(1);
        vec![
            LayerSpec { name: "geometry0", out_channels: w("geometry0"), out_extents: half },
            LayerSpec { name: "block0", out_channels: w("block0.conv2"), out_extents: half },
            LayerSpec { name: "color1", out_channels: w("color1"), out_extents: half },
            LayerSpec { name: "block1", out_channels: w("block1.conv2"), out_extents: half },
            LayerSpec {
                name: "concat2",
                out_channels: w("block0.conv2") + w("block1.conv2"),
                out_extents: half,
            },
            LayerSpec { name: "combine2", out_channels: w("combine2"), out_extents: quarter },
            LayerSpec { name: "block2", out_channels: w("block2.conv2"), out_extents: quarter },
            LayerSpec { name: "encoder3", out_channels: w("encoder3"), out_extents: quarter },
            LayerSpec { name: "block3", out_channels: w("block3.conv2"), out_extents: quarter },
            LayerSpec { name: "skip4", out_channels: wt("skip4"), out_extents: half },
            LayerSpec { name: "block4", out_channels: w("block4.conv2"), out_extents: half },
            LayerSpec {
                name: "concat5",
                out_channels: w("block0.conv2") + w("block1.conv2") + w("block4.conv2"),
                out_extents: half,
            },
            LayerSpec { name: "decoder5", out_channels: wt("decoder5"), out_extents: input },
            LayerSpec { name: "block5", out_channels: w("block5.conv2"), out_extents: input },
            LayerSpec { name: "proxy5", out_channels: w("proxy5"), out_extents: input },
            LayerSpec { name: "rpn6", out_channels: w("rpn6"), out_extents: quarter },
            LayerSpec { name: "rpncls7a", out_channels: w("rpncls7a"), out_extents: quarter },
            LayerSpec { name: "rpnbbox7b", out_channels: w("rpnbbox7b"), out_extents: quarter },
            LayerSpec { name: "rpn8", out_channels: w("rpn8"), out_extents: quarter },
            LayerSpec { name: "rpncls9a", out_channels: w("rpncls9a"), out_extents: quarter },
            LayerSpec { name: "rpnbbox9b", out_channels: w("rpnbbox9b"), out_extents: quarter },
            LayerSpec { name: "roipool10", out_channels: w("reduce10"), out_extents: [4, 4, 4] },
            LayerSpec { name: "flat10", out_channels: w("reduce10") * 64, out_extents: [1, 1, 1] },
            LayerSpec { name: "cls10a", out_channels: w("cls10a"), out_extents: [1, 1, 1] },
            LayerSpec { name: "cls10b", out_channels: w("cls10b"), out_extents: [1, 1, 1] },
            LayerSpec { name: "cls10c", out_channels: w("cls10c"), out_extents: [1, 1, 1] },
            LayerSpec { name: "clscls10", out_channels: w("clscls10"), out_extents: [1, 1, 1] },
            LayerSpec { name: "clsbbox10", out_channels: w("clsbbox10"), out_extents: [1, 1, 1] },
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;

    fn tiny_model() -> Model {
        Model::new(ModelConfig::tiny(4, 2, 1), 42).unwrap()
    }

    #[test]
    fn tiny_forward_shapes() {
        let model = tiny_model();
        let mut tape = Tape::new();
        let fp = ForwardPass::new(&mut tape, &model, false);
        let tsdf = tape.constant(Tensor::zeros(&[2, 32, 16, 32]));
        let pyr = forward_backbone(&mut tape, &model, &fp, tsdf, None).unwrap();
        assert_eq!(tape.value(pyr.f2).shape(), &[32, 8, 4, 8]);
        assert_eq!(tape.value(pyr.f3).shape(), &[32, 8, 4, 8]);
        assert_eq!(tape.value(pyr.f5).shape(), &[8, 32, 16, 32]);
        assert_eq!(tape.value(pyr.proxy).shape(), &[1, 32, 16, 32]);
        // All-zero input stays finite through the instance norms.
        assert!(tape.value(pyr.f5).is_finite());
        assert!(tape.value(pyr.proxy).is_finite());
    }

    #[test]
    fn fully_convolutional_resize() {
        // Same parameters run at doubled extents without a rebuild.
        let model = tiny_model();
        let mut tape = Tape::new();
        let fp = ForwardPass::new(&mut tape, &model, false);
        let tsdf = tape.constant(Tensor::zeros(&[2, 64, 32, 64]));
        let pyr = forward_backbone(&mut tape, &model, &fp, tsdf, None).unwrap();
        assert_eq!(tape.value(pyr.f5).shape(), &[8, 64, 32, 64]);
        assert_eq!(tape.value(pyr.f2).shape(), &[32, 16, 8, 16]);
    }

    #[test]
    fn rpn_channel_counts() {
        let model = tiny_model();
        let mut tape = Tape::new();
        let fp = ForwardPass::new(&mut tape, &model, false);
        let tsdf = tape.constant(Tensor::zeros(&[2, 32, 16, 32]));
        let pyr = forward_backbone(&mut tape, &model, &fp, tsdf, None).unwrap();
        let rpn = rpn_forward(&mut tape, &model, &fp, pyr.f2, pyr.f3).unwrap();
        assert_eq!(tape.value(rpn[0].cls).shape(), &[4, 8, 4, 8]); // 2*Ns
        assert_eq!(tape.value(rpn[0].bbox).shape(), &[12, 8, 4, 8]); // 6*Ns
        assert_eq!(tape.value(rpn[1].cls).shape(), &[2, 8, 4, 8]); // 2*Nb
        assert_eq!(tape.value(rpn[1].bbox).shape(), &[6, 8, 4, 8]); // 6*Nb
    }

    #[test]
    fn resblock_zero_weights_is_identity_on_nonnegative_input() {
        let mut model = tiny_model();
        // Zero out block0's convolutions.
        for c in ["conv0", "conv1", "conv2"] {
            let id = model.p(&format!("block0.{c}.weight"));
            let shape = model.params.value(id).shape().to_vec();
            model.params.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut tape = Tape::new();
        let fp = ForwardPass::new(&mut tape, &model, false);
        let x = tape.constant(random_tensor(5, &[8, 4, 4, 4]).map(|v| v.abs()));
        let y = res_block_forward(&mut tape, &model, &fp, "block0", x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn roi_heads_shapes() {
        let model = tiny_model();
        let mut tape = Tape::new();
        let fp = ForwardPass::new(&mut tape, &model, false);
        let tsdf = tape.constant(Tensor::zeros(&[2, 32, 16, 32]));
        let pyr = forward_backbone(&mut tape, &model, &fp, tsdf, None).unwrap();
        let rois = vec![
            RoiSpec { bbox: Box3::from_voxel_bounds([4, 4, 4], [12, 10, 12]), scale: 0 },
            RoiSpec { bbox: Box3::from_voxel_bounds([0, 0, 0], [30, 12, 12]), scale: 1 },
        ];
        let outs = classify_rois(&mut tape, &model, &fp, pyr.f2, pyr.f3, &rois).unwrap();
        assert_eq!(outs.len(), 2);
        for o in &outs {
            assert_eq!(tape.value(o.class_logits).shape(), &[4]);
            assert_eq!(tape.value(o.refine).shape(), &[24]);
        }
        // Degenerate box rejected.
        let bad = vec![RoiSpec { bbox: Box3::new([5.0, 5.0, 5.0], [0.5, 3.0, 3.0]), scale: 0 }];
        assert!(classify_rois(&mut tape, &model, &fp, pyr.f2, pyr.f3, &bad).is_err());
    }

    #[test]
    fn completion_head_keeps_box_extents() {
        let model = tiny_model();
        let mut tape = Tape::new();
        let fp = ForwardPass::new(&mut tape, &model, false);
        let tsdf = tape.constant(random_tensor(3, &[2, 32, 16, 32]));
        let pyr = forward_backbone(&mut tape, &model, &fp, tsdf, None).unwrap();
        for bounds in [([2, 3, 4], [9, 8, 11]), ([0, 0, 0], [5, 5, 5]), ([10, 2, 10], [28, 14, 20])]
        {
            let bbox = Box3::from_voxel_bounds(bounds.0, bounds.1);
            let outs =
                complete_instances(&mut tape, &model, &fp, pyr.f5, &[(bbox, 2)]).unwrap();
            let want =
                [bounds.1[0] - bounds.0[0], bounds.1[1] - bounds.0[1], bounds.1[2] - bounds.0[2]];
            assert_eq!(tape.value(outs[0].0).shape(), &want);
        }
    }

    #[test]
    fn completion_gradient_reaches_entry_weights() {
        let model = tiny_model();
        let mut tape = Tape::new();
        let fp = ForwardPass::new(&mut tape, &model, true);
        let tsdf = tape.constant(random_tensor(11, &[2, 16, 8, 16]));
        let pyr = forward_backbone(&mut tape, &model, &fp, tsdf, None).unwrap();
        let bbox = Box3::from_voxel_bounds([2, 2, 2], [8, 6, 8]);
        let outs = complete_instances(&mut tape, &model, &fp, pyr.f5, &[(bbox, 1)]).unwrap();
        let loss = tape.mean_all(outs[0].0);
        tape.backward(loss).unwrap();
        let gw = fp.var(model.p("geometry0.weight"));
        let g = tape.grad(gw).expect("entry weights must receive gradient");
        let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 0.0, "gradient norm through completion head is zero");
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(Model::new(ModelConfig { base_width: 3, ..ModelConfig::tiny(4, 2, 1) }, 0).is_err());
        assert!(Model::new(ModelConfig::tiny(4, 0, 1), 0).is_err());
        let mut c = ModelConfig::tiny(4, 2, 1);
        c.chunk_extents = [30, 16, 32];
        assert!(Model::new(c, 0).is_err());
    }

    #[test]
    fn full_preset_parameter_count_matches_closed_form() {
        // Independent counting oracle: explicit (out, in, kernel volume)
        // triples summed as out*in*kv + out, resblocks as their three convs.
        let model = Model::new(ModelConfig::full(8, 4, 5), 0).unwrap();
        let conv = |o: usize, i: usize, kv: usize| o * i * kv + o;
        let res = |n: usize| conv(n / 2, n, 1) + conv(n / 2, n / 2, 27) + conv(n, n / 2, 1);
        let expected = conv(32, 3, 9) + conv(64, 32, 9) + conv(128, 64, 9) // 2D CNN
            + conv(32, 2, 8) + res(32)        // geometry0 + block0
            + conv(32, 128, 8) + res(32)      // color1 + block1
            + conv(128, 64, 8) + res(128)     // combine2 + block2
            + conv(128, 128, 27) + res(128)   // encoder3 + block3
            + conv(64, 128, 8) + res(64)      // skip4 + block4
            + conv(32, 128, 8) + res(32)      // decoder5 + block5
            + conv(1, 32, 1)                  // proxy5
            + conv(256, 128, 27) + conv(8, 256, 1) + conv(24, 256, 1)   // rpn scale 1
            + conv(256, 128, 27) + conv(10, 256, 1) + conv(30, 256, 1)  // rpn scale 2
            + conv(64, 128, 1)                // reduce10
            + conv(256, 4096, 1) + conv(128, 256, 1) + conv(128, 128, 1)
            + conv(8, 128, 1) + conv(48, 128, 1)
            + conv(32, 32, 729) + conv(32, 32, 343) + conv(32, 32, 125)
            + conv(32, 32, 27) + conv(8, 32, 1);
        assert_eq!(model.num_params(), expected);
    }
}
