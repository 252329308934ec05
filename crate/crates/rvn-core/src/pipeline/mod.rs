//! Training loop, whole-scene inference and evaluation orchestration.

pub mod config;

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::completion::{completion_loss, completion_target, match_predictions, proxy_loss, proxy_target};
use crate::detection::{
    assign_anchor_targets, cluster_anchors, decode_box, detection_losses, encode_box, nms,
    placed_anchor, AnchorSet, BoxDelta, RpnScaleOut, POSITIVE_IOU,
};
use crate::error::{Error, Result};
use crate::eval::{
    average_precision, completeness_histogram, CompletenessBin, EvalRecord, GtInstance,
    Prediction, Task, TaskMetrics, VoxelMask,
};
use crate::fusion::{backproject_features, fuse_tsdf, save_tsdf, TsdfVolume};
use crate::geom::Box3;
use crate::network::{
    classify_rois, color_cnn_forward, complete_instances, forward_backbone, rpn_forward,
    ForwardPass, Model, RoiSpec,
};
use crate::scene::archive::{load_scene, save_scene};
use crate::scene::chunk::{crop_chunk, TrainingChunk};
use crate::scene::render::render_views;
use crate::scene::{generate_scene, CameraView, InstanceGT, Scene, SceneConfig, CLASS_NAMES};
use crate::tensor::checkpoint;
use crate::tensor::tape::{stable_sigmoid, Tape, Var};
use crate::tensor::Tensor;

pub use config::{load_config, EvalConfig, InferConfig, ModelPreset, PipelineConfig, TrainConfig};

/// Detection feature stride of the backbone (two stride-2 reductions).
pub const FEATURE_STRIDE: usize = 4;

/// One scene with its rendered views and a lazily fused whole-scene TSDF.
pub struct PoolEntry {
    pub id: String,
    pub scene: Scene,
    pub views: Vec<CameraView>,
    tsdf: OnceLock<TsdfVolume>,
}

impl PoolEntry {
    pub fn new(id: String, scene: Scene, views: Vec<CameraView>) -> Self {
        Self { id, scene, views, tsdf: OnceLock::new() }
    }

    /// Whole-scene TSDF fused from all views, computed once.
    pub fn tsdf(&self) -> &TsdfVolume {
        self.tsdf.get_or_init(|| {
            fuse_tsdf(&self.views, self.scene.extents, self.scene.voxel_size)
                .expect("scene has views")
        })
    }
}

pub struct ScenePool {
    pub entries: Vec<PoolEntry>,
}

impl ScenePool {
    /// Generate `n` scenes with seeds `seed_base..seed_base+n`.
    pub fn generate(cfg: &SceneConfig, n: usize, seed_base: u64) -> Result<Self> {
        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let seed = seed_base + i as u64;
            let scfg = SceneConfig { seed, ..cfg.clone() };
            let scene = generate_scene(&scfg)?;
            let views = render_views(&scene, &scfg, scfg.n_views, seed);
            entries.push(PoolEntry::new(format!("scene_{seed:06}"), scene, views));
        }
        Ok(Self { entries })
    }

    /// Load every `.rvns` archive in a directory, sorted by file name.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map_or(false, |e| e == "rvns"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Invalid(format!("no .rvns scenes in {}", dir.display())));
        }
        let mut entries = Vec::with_capacity(paths.len());
        for p in paths {
            let (scene, views) = load_scene(&p)?;
            let id = p.file_stem().unwrap().to_string_lossy().into_owned();
            entries.push(PoolEntry::new(id, scene, views));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Write every scene as an archive into a directory.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for e in &self.entries {
            save_scene(&dir.join(format!("{}.rvns", e.id)), &e.scene, &e.views)?;
        }
        Ok(())
    }
}

/// Cluster anchors from every gt box size in the pool.
pub fn cluster_pool_anchors(pool: &ScenePool, k: usize, seed: u64, voxel_size: f64) -> Result<AnchorSet> {
    let sizes: Vec<[f64; 3]> = pool
        .entries
        .iter()
        .flat_map(|e| e.scene.gt.iter().map(|g| [g.dims[0] as f64, g.dims[1] as f64, g.dims[2] as f64]))
        .collect();
    cluster_anchors(&sizes, k, seed, voxel_size)
}

/// Per-step training record, one JSON line each in the train log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub objectness: f64,
    pub bbox: f64,
    pub class: f64,
    pub completion: f64,
    pub proxy: f64,
    pub total: f64,
}

/// A decoded, clipped RPN proposal.
#[derive(Clone, Copy, Debug)]
pub struct Proposal {
    pub bbox: Box3<f64>,
    pub score: f64,
    pub scale: usize,
}

/// Decode objectness scores and box deltas from the RPN maps, clip to the
/// volume, and run NMS. `cap` bounds the surviving proposals.
pub fn decode_proposals(
    tape: &Tape<f64>,
    rpn: &[RpnScaleOut],
    anchors: &AnchorSet,
    grid_extents: [usize; 3],
    icfg: &InferConfig,
    cap: usize,
) -> Vec<Proposal> {
    let mut cands: Vec<Proposal> = Vec::new();
    for (scale, out) in rpn.iter().enumerate() {
        let cls = tape.value(out.cls).data();
        let bbox = tape.value(out.bbox).data();
        let dims = out.dims;
        let vol = dims[0] * dims[1] * dims[2];
        let sizes = anchors.sizes(scale);
        for (ai, &size) in sizes.iter().enumerate() {
            for d in 0..dims[0] {
                for h in 0..dims[1] {
                    for w in 0..dims[2] {
                        let cell = (d * dims[1] + h) * dims[2] + w;
                        let neg = cls[(2 * ai) * vol + cell];
                        let pos = cls[(2 * ai + 1) * vol + cell];
                        let score = stable_sigmoid(pos - neg);
                        if score < icfg.min_score {
                            continue;
                        }
                        let mut delta = [0.0; 6];
                        for (j, dv) in delta.iter_mut().enumerate() {
                            *dv = bbox[(6 * ai + j) * vol + cell];
                        }
                        let anchor = placed_anchor(size, [d, h, w], FEATURE_STRIDE);
                        let Ok(decoded) = decode_box(&BoxDelta(delta), &anchor) else { continue };
                        let Some(clipped) = decoded.clipped_to(grid_extents) else { continue };
                        if clipped.size.iter().any(|&s| s < 1.0) {
                            continue;
                        }
                        cands.push(Proposal { bbox: clipped, score, scale });
                    }
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| {
        cands[b]
            .score
            .partial_cmp(&cands[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(icfg.pre_nms_top_k);
    let boxes: Vec<Box3<f64>> = order.iter().map(|&i| cands[i].bbox).collect();
    let scores: Vec<f64> = order.iter().map(|&i| cands[i].score).collect();
    let kept = nms(&boxes, &scores, icfg.nms_iou);
    kept.into_iter().take(cap).map(|i| cands[order[i]]).collect()
}

/// The five training losses of one step, as tape vars.
struct StepLosses {
    objectness: Var,
    bbox: Var,
    class: Var,
    completion: Var,
    proxy: Var,
    total: Var,
}

/// Build the full training graph for one chunk.
#[allow(clippy::too_many_arguments)]
fn build_step(
    tape: &mut Tape<f64>,
    model: &Model,
    anchors: &AnchorSet,
    entry: &PoolEntry,
    chunk: &TrainingChunk,
    tcfg: &TrainConfig,
    icfg: &InferConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ForwardPass, StepLosses)> {
    let vs = entry.scene.voxel_size;
    let fp = ForwardPass::new(tape, model, true);

    // 2-channel TSDF input: normalized value and observed flag.
    let vol = entry.tsdf().crop(chunk.origin, chunk.extents);
    let tsdf_input = tsdf_input_tensor(&vol);
    let tsdf_var = tape.constant(tsdf_input);

    // Color stream: 2D CNN per selected view, then view-pooled back-projection.
    let color_volume = if model.config.use_color && !chunk.view_indices.is_empty() {
        let selected: Vec<CameraView> =
            chunk.view_indices.iter().map(|&i| entry.views[i].clone()).collect();
        let mut feats = Vec::with_capacity(selected.len());
        for view in &selected {
            let img = image_tensor(view);
            let img_var = tape.constant(img);
            feats.push(color_cnn_forward(tape, model, &fp, img_var)?);
        }
        let fv = backproject_features(
            tape,
            &feats,
            &selected,
            model.config.feature_stride_2d,
            chunk.origin,
            chunk.extents,
            vs,
            model.config.view_pooling.into(),
        )?;
        Some(fv.var)
    } else {
        None
    };

    let pyr = forward_backbone(tape, model, &fp, tsdf_var, color_volume)?;
    let rpn = rpn_forward(tape, model, &fp, pyr.f2, pyr.f3)?;

    let gt_boxes: Vec<Box3<f64>> = chunk.gt.iter().map(|g| g.bbox()).collect();
    let targets = assign_anchor_targets(
        anchors,
        rpn[0].dims,
        FEATURE_STRIDE,
        &gt_boxes,
        rng,
        tcfg.proposal_sample,
    );

    // Proposals for the second stage.
    let proposals =
        decode_proposals(tape, &rpn, anchors, chunk.extents, icfg, icfg.max_proposals_train);

    // RoI candidates: proposals overlapping gt, plus gt boxes themselves.
    struct Cand {
        spec: RoiSpec,
        label: usize,
        refine_target: BoxDelta,
    }
    let mut cands: Vec<Cand> = Vec::new();
    for p in &proposals {
        let mut best = (0.0f64, usize::MAX);
        for (gi, g) in gt_boxes.iter().enumerate() {
            let iou = p.bbox.iou(g);
            if iou > best.0 {
                best = (iou, gi);
            }
        }
        if best.0 >= POSITIVE_IOU && best.1 != usize::MAX {
            cands.push(Cand {
                spec: RoiSpec { bbox: p.bbox, scale: p.scale },
                label: chunk.gt[best.1].class_id,
                refine_target: encode_box(&gt_boxes[best.1], &p.bbox)?,
            });
        }
    }
    if tcfg.gt_augment {
        for (gi, g) in chunk.gt.iter().enumerate() {
            let bbox = gt_boxes[gi];
            cands.push(Cand {
                spec: RoiSpec { bbox, scale: model.route_scale(&bbox, vs) },
                label: g.class_id,
                refine_target: BoxDelta([0.0; 6]),
            });
        }
    }
    cands.shuffle(rng);
    cands.truncate(tcfg.classification_sample);

    let specs: Vec<RoiSpec> = cands.iter().map(|c| c.spec).collect();
    let roi_outs = classify_rois(tape, model, &fp, pyr.f2, pyr.f3, &specs)?;
    let mut roi_class = Vec::with_capacity(cands.len());
    let mut roi_refine = Vec::with_capacity(cands.len());
    for (c, out) in cands.iter().zip(roi_outs.iter()) {
        roi_class.push((out.class_logits, c.label));
        let slice = tape.slice_channels(out.refine, 6 * c.label, 6)?;
        roi_refine.push((slice, c.refine_target));
    }

    let det = detection_losses(tape, &rpn, &targets, &roi_class, &roi_refine)?;

    // Completion pairs: gt boxes (augmentation) first, then matched proposals.
    let completion = if model.config.use_completion && !chunk.gt.is_empty() {
        let mut boxes: Vec<(Box3<f64>, usize, usize)> = Vec::new(); // (box, class, gt idx)
        if tcfg.gt_augment {
            for (gi, g) in chunk.gt.iter().enumerate() {
                boxes.push((gt_boxes[gi], g.class_id, gi));
            }
        }
        let pred_boxes: Vec<Box3<f64>> = proposals.iter().map(|p| p.bbox).collect();
        for m in match_predictions(&pred_boxes, &gt_boxes) {
            boxes.push((pred_boxes[m.pred], chunk.gt[m.gt].class_id, m.gt));
        }
        boxes.truncate(tcfg.max_completion_boxes);
        let head_in: Vec<(Box3<f64>, usize)> = boxes.iter().map(|&(b, c, _)| (b, c)).collect();
        let outs = complete_instances(tape, model, &fp, pyr.f5, &head_in)?;
        let mut pairs = Vec::with_capacity(outs.len());
        for ((logits, _), &(bbox, _, gi)) in outs.iter().zip(boxes.iter()) {
            let target = completion_target(&chunk.gt[gi], &bbox, chunk.extents)?;
            pairs.push((*logits, target));
        }
        completion_loss(tape, &pairs)?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };

    let proxy = if model.config.use_proxy {
        let target = proxy_target(&chunk.gt, chunk.extents);
        proxy_loss(tape, pyr.proxy, target)?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };

    // Weighted total.
    let w = model.config.loss_weights;
    let mut total = tape.scale(det.objectness, w[0]);
    let t1 = tape.scale(det.bbox, w[1]);
    total = tape.add(total, t1)?;
    let t2 = tape.scale(det.class, w[2]);
    total = tape.add(total, t2)?;
    let t3 = tape.scale(completion, w[3]);
    total = tape.add(total, t3)?;
    let t4 = tape.scale(proxy, w[4]);
    total = tape.add(total, t4)?;

    Ok((
        fp,
        StepLosses {
            objectness: det.objectness,
            bbox: det.bbox,
            class: det.class,
            completion,
            proxy,
            total,
        },
    ))
}

/// 2-channel network input from a TSDF crop: normalized values and a
/// weight>0 observed flag.
pub fn tsdf_input_tensor(vol: &TsdfVolume) -> Tensor<f64> {
    let n = vol.values.len();
    let mut data = Vec::with_capacity(2 * n);
    data.extend_from_slice(&vol.values);
    data.extend(vol.weights.iter().map(|&w| if w > 0.0 { 1.0 } else { 0.0 }));
    Tensor::new(&[2, vol.extents[0], vol.extents[1], vol.extents[2]], data).expect("tsdf shape")
}

/// `[3, H, W]` f64 image tensor from a view's color buffer.
pub fn image_tensor(view: &CameraView) -> Tensor<f64> {
    let data: Vec<f64> = view.color.iter().map(|&c| c as f64).collect();
    Tensor::new(&[3, view.height, view.width], data).expect("image shape")
}

/// A trained model with its anchors and per-step log.
pub struct Trained {
    pub model: Model,
    pub anchors: AnchorSet,
    pub log: Vec<StepLog>,
}

/// Run the training loop. When `out_dir` is given, checkpoints and the
/// JSON-lines train log land there. `progress` sees every step record.
pub fn train(
    cfg: &PipelineConfig,
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(&StepLog),
) -> Result<Trained> {
    cfg.train.validate()?;
    cfg.scene.validate()?;
    let pool = match &cfg.train.scenes_dir {
        Some(dir) => ScenePool::load_dir(Path::new(dir))?,
        None => ScenePool::generate(&cfg.scene, cfg.train.n_scenes, cfg.scene.seed)?,
    };
    let anchors =
        cluster_pool_anchors(&pool, cfg.train.anchor_k, cfg.train.seed, cfg.scene.voxel_size)?;
    let model_cfg = cfg.model.resolve(anchors.n_small(), anchors.n_big())?;
    let model = Model::new(model_cfg, cfg.model.seed)?;
    train_with(cfg, &pool, anchors, model, out_dir, progress)
}

/// Training loop over an existing pool and model (shared by tests).
pub fn train_with(
    cfg: &PipelineConfig,
    pool: &ScenePool,
    anchors: AnchorSet,
    mut model: Model,
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(&StepLog),
) -> Result<Trained> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut log = Vec::with_capacity(cfg.train.total_steps);
    let mut log_file = match out_dir {
        Some(dir) => Some(std::io::BufWriter::new(std::fs::File::create(
            dir.join("train_log.jsonl"),
        )?)),
        None => None,
    };

    for step in 0..cfg.train.total_steps {
        let scene_idx = rng.gen_range(0..pool.len());
        let entry = &pool.entries[scene_idx];
        let chunk = crop_chunk(
            &entry.scene,
            &entry.views,
            model.config.chunk_extents,
            &mut rng,
            5,
        )?;

        let mut tape = Tape::new();
        let (fp, losses) = build_step(
            &mut tape,
            &model,
            &anchors,
            entry,
            &chunk,
            &cfg.train,
            &cfg.infer,
            &mut rng,
        )?;
        let rec = StepLog {
            step,
            lr: cfg.train.lr_at(step),
            objectness: tape.value(losses.objectness).item(),
            bbox: tape.value(losses.bbox).item(),
            class: tape.value(losses.class).item(),
            completion: tape.value(losses.completion).item(),
            proxy: tape.value(losses.proxy).item(),
            total: tape.value(losses.total).item(),
        };
        if !rec.total.is_finite() {
            let dump = dump_diagnostics(out_dir, step, entry, &chunk);
            return Err(Error::NonFinite(format!(
                "loss at step {step} is {}; diagnostics: {dump}",
                rec.total
            )));
        }
        tape.backward(losses.total)?;
        fp.harvest(&tape, &mut model)?;
        if !model.params.grads_are_finite() {
            let dump = dump_diagnostics(out_dir, step, entry, &chunk);
            return Err(Error::NonFinite(format!(
                "non-finite gradient at step {step}; diagnostics: {dump}"
            )));
        }
        // Heads untouched this step (no proposals, empty pair set) take a
        // zero update.
        model.params.fill_missing_grads();
        model.params.sgd_step(rec.lr)?;

        if let Some(f) = log_file.as_mut() {
            use std::io::Write;
            serde_json::to_writer(&mut *f, &rec)
                .map_err(|e| Error::Format(format!("log write: {e}")))?;
            f.write_all(b"\n")?;
        }
        progress(&rec);
        log.push(rec);

        if let Some(dir) = out_dir {
            let every = cfg.train.checkpoint_every;
            if every > 0 && (step + 1) % every == 0 {
                save_checkpoint(&dir.join(format!("step_{:06}.rvnt", step + 1)), &model, &anchors)?;
            }
        }
    }
    if let Some(f) = log_file.as_mut() {
        use std::io::Write;
        f.flush()?;
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("model.rvnt"), &model, &anchors)?;
    }
    Ok(Trained { model, anchors, log })
}

fn dump_diagnostics(
    out_dir: Option<&Path>,
    step: usize,
    entry: &PoolEntry,
    chunk: &TrainingChunk,
) -> String {
    let Some(dir) = out_dir else { return "disabled (no output directory)".into() };
    let path = dir.join(format!("diagnostic_step{step}.rvnv"));
    let vol = entry.tsdf().crop(chunk.origin, chunk.extents);
    match save_tsdf(&path, &vol) {
        Ok(()) => format!("chunk TSDF written to {}", path.display()),
        Err(e) => format!("dump failed: {e}"),
    }
}

/// Checkpoint metadata carried in the header JSON.
#[derive(Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: crate::network::ModelConfig,
    pub anchors: AnchorSet,
}

pub fn save_checkpoint(path: &Path, model: &Model, anchors: &AnchorSet) -> Result<()> {
    let meta = CheckpointMeta { model: model.config.clone(), anchors: anchors.clone() };
    let meta_json = serde_json::to_string(&meta)
        .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    checkpoint::save(path, &meta_json, &model.params)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, AnchorSet)> {
    let ck = checkpoint::load(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&ck.meta_json)
        .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    let mut model = Model::new(meta.model, 0)?;
    checkpoint::restore(&ck, &mut model.params)?;
    Ok((model, meta.anchors))
}

/// One final scene-level prediction.
#[derive(Clone, Debug)]
pub struct ScenePrediction {
    pub class_id: usize,
    pub score: f64,
    pub bbox: Box3<f64>,
    pub mask: VoxelMask,
}

/// Whole-scene inference: fuse, back-project, one forward pass, decode +
/// NMS, classify, refine and complete. Scene extents that are not multiples
/// of 4 are padded with unobserved space and the results cropped back.
pub fn infer_scene(
    model: &Model,
    anchors: &AnchorSet,
    views: &[CameraView],
    tsdf: &TsdfVolume,
    icfg: &InferConfig,
) -> Result<Vec<ScenePrediction>> {
    let orig = tsdf.extents;
    let padded = orig.map(|e| e.div_ceil(4) * 4);
    let vol_padded;
    let vol = if padded != orig {
        let mut v = TsdfVolume::empty(padded, tsdf.voxel_size);
        v.truncation_voxels = tsdf.truncation_voxels;
        for x in 0..orig[0] {
            for y in 0..orig[1] {
                for z in 0..orig[2] {
                    let src = tsdf.index([x, y, z]);
                    let dst = v.index([x, y, z]);
                    v.values[dst] = tsdf.values[src];
                    v.weights[dst] = tsdf.weights[src];
                }
            }
        }
        vol_padded = v;
        &vol_padded
    } else {
        tsdf
    };

    let mut tape = Tape::new();
    let fp = ForwardPass::new(&mut tape, model, false);
    let tsdf_var = tape.constant(tsdf_input_tensor(vol));

    let color_volume = if model.config.use_color && !views.is_empty() {
        // Evenly strided subset when over the view cap.
        let selected: Vec<CameraView> = if views.len() > icfg.max_views {
            (0..icfg.max_views)
                .map(|i| views[i * views.len() / icfg.max_views].clone())
                .collect()
        } else {
            views.to_vec()
        };
        let mut feats = Vec::with_capacity(selected.len());
        for view in &selected {
            let img = image_tensor(view);
            let img_var = tape.constant(img);
            feats.push(color_cnn_forward(&mut tape, model, &fp, img_var)?);
        }
        let fv = backproject_features(
            &mut tape,
            &feats,
            &selected,
            model.config.feature_stride_2d,
            [0, 0, 0],
            padded,
            vol.voxel_size,
            model.config.view_pooling.into(),
        )?;
        Some(fv.var)
    } else {
        None
    };

    let pyr = forward_backbone(&mut tape, model, &fp, tsdf_var, color_volume)?;
    let rpn = rpn_forward(&mut tape, model, &fp, pyr.f2, pyr.f3)?;
    let proposals = decode_proposals(&tape, &rpn, anchors, padded, icfg, icfg.max_proposals);
    if proposals.is_empty() {
        return Ok(Vec::new());
    }

    let specs: Vec<RoiSpec> =
        proposals.iter().map(|p| RoiSpec { bbox: p.bbox, scale: p.scale }).collect();
    let roi_outs = classify_rois(&mut tape, model, &fp, pyr.f2, pyr.f3, &specs)?;

    let surface = vol.surface_occupancy();
    let mut preds: Vec<ScenePrediction> = Vec::with_capacity(proposals.len());
    for (p, out) in proposals.iter().zip(roi_outs.iter()) {
        let logits = tape.value(out.class_logits).data().to_vec();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let (class_id, _) = exps
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .unwrap();
        let p_class = exps[class_id] / denom;
        let score = p.score * p_class;

        let mut bbox = p.bbox;
        if model.config.apply_refinement {
            let refine = tape.value(out.refine).data();
            let mut delta = [0.0; 6];
            delta.copy_from_slice(&refine[6 * class_id..6 * class_id + 6]);
            if let Ok(refined) = decode_box(&BoxDelta(delta), &p.bbox) {
                if let Some(clipped) = refined.clipped_to(padded) {
                    if clipped.size.iter().all(|&s| s >= 1.0) {
                        bbox = clipped;
                    }
                }
            }
        }

        let mask = if model.config.use_completion {
            let outs = complete_instances(&mut tape, model, &fp, pyr.f5, &[(bbox, class_id)])?;
            let (logits_var, (lo, hi)) = &outs[0];
            let data = tape.value(*logits_var).data();
            let dims = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
            let bits: Vec<bool> =
                data.iter().map(|&v| stable_sigmoid(v) > icfg.mask_threshold).collect();
            crop_mask_to(VoxelMask { lo: *lo, dims, bits }, orig)
        } else {
            // Without the completion head, fall back to the observed surface
            // inside the box.
            match bbox.voxel_footprint(padded) {
                Some((lo, hi)) => {
                    let dims = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
                    let mut bits = vec![false; dims[0] * dims[1] * dims[2]];
                    for (i, b) in bits.iter_mut().enumerate() {
                        let x = lo[0] + i / (dims[1] * dims[2]);
                        let y = lo[1] + (i / dims[2]) % dims[1];
                        let z = lo[2] + i % dims[2];
                        *b = surface[(x * padded[1] + y) * padded[2] + z];
                    }
                    crop_mask_to(VoxelMask { lo, dims, bits }, orig)
                }
                None => VoxelMask::empty(),
            }
        };

        let bbox = match bbox.clipped_to(orig) {
            Some(b) => b,
            None => continue,
        };
        preds.push(ScenePrediction { class_id, score, bbox, mask });
    }
    preds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    Ok(preds)
}

/// Drop mask voxels outside the original (unpadded) extents.
fn crop_mask_to(mask: VoxelMask, extents: [usize; 3]) -> VoxelMask {
    let mut out = mask.clone();
    for (i, b) in out.bits.iter_mut().enumerate() {
        if !*b {
            continue;
        }
        let x = mask.lo[0] + i / (mask.dims[1] * mask.dims[2]);
        let y = mask.lo[1] + (i / mask.dims[2]) % mask.dims[1];
        let z = mask.lo[2] + i % mask.dims[2];
        if x >= extents[0] || y >= extents[1] || z >= extents[2] {
            *b = false;
        }
    }
    out
}

/// How predicted masks are produced when building eval records.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// The model's completion output.
    Predicted,
    /// Copy-partial baseline: the observed surface inside the predicted box.
    CopyPartial,
}

/// Run inference over a pool and assemble eval records.
pub fn build_eval_records(
    model: &Model,
    anchors: &AnchorSet,
    pool: &ScenePool,
    icfg: &InferConfig,
) -> Result<Vec<EvalRecord>> {
    let mut records = Vec::with_capacity(pool.len());
    for entry in &pool.entries {
        let tsdf = entry.tsdf();
        let preds = infer_scene(model, anchors, &entry.views, tsdf, icfg)?;
        let surface = tsdf.surface_occupancy();
        let predictions: Vec<Prediction> = preds
            .into_iter()
            .map(|p| Prediction { class_id: p.class_id, score: p.score, bbox: p.bbox, mask: p.mask })
            .collect();
        let gt: Vec<GtInstance> = entry
            .scene
            .gt
            .iter()
            .map(|g| GtInstance { class_id: g.class_id, bbox: g.bbox(), mask: instance_mask(g) })
            .collect();
        records.push(EvalRecord {
            scene_id: entry.id.clone(),
            extents: entry.scene.extents,
            predictions,
            gt,
            surface,
        });
    }
    Ok(records)
}

pub fn instance_mask(g: &InstanceGT) -> VoxelMask {
    VoxelMask { lo: g.lo, dims: g.dims, bits: g.mask.clone() }
}

/// Swap every predicted mask for the copy-partial baseline mask.
pub fn with_copy_partial_masks(records: &[EvalRecord]) -> Vec<EvalRecord> {
    records
        .iter()
        .map(|r| {
            let mut r2 = r.clone();
            for p in &mut r2.predictions {
                if let Some((lo, hi)) = p.bbox.voxel_footprint(r.extents) {
                    let dims = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
                    let mut bits = vec![false; dims[0] * dims[1] * dims[2]];
                    for (i, b) in bits.iter_mut().enumerate() {
                        let x = lo[0] + i / (dims[1] * dims[2]);
                        let y = lo[1] + (i / dims[2]) % dims[1];
                        let z = lo[2] + i % dims[2];
                        *b = r.surface[(x * r.extents[1] + y) * r.extents[2] + z];
                    }
                    p.mask = VoxelMask { lo, dims, bits };
                } else {
                    p.mask = VoxelMask::empty();
                }
            }
            r2
        })
        .collect()
}

/// The metrics report consumed by the CLI table printer.
#[derive(Serialize, Deserialize)]
pub struct MetricsReport {
    pub completion: TaskMetrics,
    pub segmentation: TaskMetrics,
    pub detection: TaskMetrics,
    pub completeness_bins: Vec<CompletenessBin>,
    pub n_scenes: usize,
}

pub fn class_names(n: usize) -> Vec<&'static str> {
    CLASS_NAMES[..n.min(CLASS_NAMES.len())].to_vec()
}

/// Score the three tasks plus the completeness histogram from eval records.
pub fn metrics_from_records(
    records: &[EvalRecord],
    n_classes: usize,
    bins: &[(f64, f64)],
) -> Result<MetricsReport> {
    let names = class_names(n_classes);
    Ok(MetricsReport {
        completion: average_precision(records, Task::Completion, 0.5, &names),
        segmentation: average_precision(records, Task::Segmentation, 0.5, &names),
        detection: average_precision(records, Task::Detection, 0.5, &names),
        completeness_bins: completeness_histogram(records, Task::Completion, 0.5, &names, bins)?,
        n_scenes: records.len(),
    })
}

/// Full evaluation: inference over every scene, all three tasks and the
/// completeness histogram.
pub fn evaluate(
    model: &Model,
    anchors: &AnchorSet,
    pool: &ScenePool,
    icfg: &InferConfig,
    bins: &[(f64, f64)],
) -> Result<MetricsReport> {
    let records = build_eval_records(model, anchors, pool, icfg)?;
    metrics_from_records(&records, model.config.n_classes, bins)
}

/// Serializable prediction record: one JSON line per detected object with
/// its complete mask as a base64 run-length-encoded bitmap.
#[derive(Serialize, Deserialize)]
pub struct PredictionRecord {
    pub class: usize,
    pub class_name: String,
    pub score: f64,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub mask_lo: [usize; 3],
    pub mask_dims: [usize; 3],
    /// Base64 of little-endian u32 RLE runs (free/occupied alternating,
    /// starting with free).
    pub mask_rle_b64: String,
}

impl PredictionRecord {
    pub fn from_prediction(p: &ScenePrediction, n_classes: usize) -> Self {
        use base64::Engine;
        let runs = crate::scene::archive::rle_encode(&p.mask.bits);
        let mut bytes = Vec::with_capacity(runs.len() * 4);
        for r in &runs {
            bytes.extend_from_slice(&r.to_le_bytes());
        }
        let name = class_names(n_classes)
            .get(p.class_id)
            .copied()
            .unwrap_or("unknown")
            .to_string();
        Self {
            class: p.class_id,
            class_name: name,
            score: p.score,
            center: p.bbox.center,
            size: p.bbox.size,
            mask_lo: p.mask.lo,
            mask_dims: p.mask.dims,
            mask_rle_b64: base64::engine::general_purpose::STANDARD.encode(bytes),
        }
    }

    pub fn to_prediction(&self) -> Result<ScenePrediction> {
        use base64::Engine;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.mask_rle_b64)
            .map_err(|e| Error::Format(format!("mask base64: {e}")))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Format("mask RLE payload not u32-aligned".into()));
        }
        let runs: Vec<u32> = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let n = self.mask_dims[0] * self.mask_dims[1] * self.mask_dims[2];
        let bits = crate::scene::archive::rle_decode(&runs, n)?;
        Ok(ScenePrediction {
            class_id: self.class,
            score: self.score,
            bbox: Box3 { center: self.center, size: self.size },
            mask: VoxelMask { lo: self.mask_lo, dims: self.mask_dims, bits },
        })
    }
}

/// Write predictions as JSON lines.
pub fn write_predictions_jsonl(
    path: &Path,
    preds: &[ScenePrediction],
    n_classes: usize,
) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in preds {
        let rec = PredictionRecord::from_prediction(p, n_classes);
        serde_json::to_writer(&mut f, &rec)
            .map_err(|e| Error::Format(format!("prediction write: {e}")))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_predictions_jsonl(path: &Path) -> Result<Vec<ScenePrediction>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("prediction line: {e}")))?;
        out.push(rec.to_prediction()?);
    }
    Ok(out)
}

/// Grayscale axial (y) slices of a TSDF volume for quick inspection.
pub fn tsdf_slice_images(vol: &TsdfVolume) -> Vec<(String, usize, usize, Vec<u8>)> {
    let [nx, ny, nz] = vol.extents;
    (0..ny)
        .map(|y| {
            let mut img = vec![0u8; nx * nz];
            for x in 0..nx {
                for z in 0..nz {
                    let v = vol.values[vol.index([x, y, z])];
                    img[z * nx + x] = (((v + 1.0) / 2.0) * 255.0).round().clamp(0.0, 255.0) as u8;
                }
            }
            (format!("slice_y{y:03}"), nx, nz, img)
        })
        .collect()
}
