//! TOML pipeline configuration: nested key/value sections with full
//! defaults, every field overridable.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::scene::SceneConfig;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplicative decay applied every `decay_interval` steps.
    pub lr_decay: f64,
    pub decay_interval: usize,
    pub total_steps: usize,
    /// Anchors sampled per chunk for the objectness loss.
    pub proposal_sample: usize,
    /// RoIs sampled per chunk for the classification loss.
    pub classification_sample: usize,
    pub seed: u64,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Scenes generated for training when no directory is given.
    pub n_scenes: usize,
    /// Optional directory of scene archives to train from instead.
    pub scenes_dir: Option<String>,
    /// Also train completion and classification on ground-truth boxes.
    pub gt_augment: bool,
    /// Cap on completion-head boxes per step.
    pub max_completion_boxes: usize,
    /// Number of anchor clusters.
    pub anchor_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            lr_decay: 0.1,
            decay_interval: 2_000,
            total_steps: 5_000,
            proposal_sample: 64,
            classification_sample: 16,
            seed: 0,
            checkpoint_every: 0,
            n_scenes: 8,
            scenes_dir: None,
            gt_augment: true,
            max_completion_boxes: 8,
            anchor_k: 9,
        }
    }
}

impl TrainConfig {
    /// Paper-scale schedule (kept for reference runs at the full preset).
    pub fn full() -> Self {
        Self { decay_interval: 100_000, total_steps: 200_000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.decay_interval == 0 || self.total_steps == 0 {
            return Err(Error::Config("step intervals must be positive".into()));
        }
        if self.anchor_k == 0 {
            return Err(Error::Config("anchor_k must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate at a given step under the decay schedule.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * self.lr_decay.powi((step / self.decay_interval) as i32)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct InferConfig {
    /// Proposals kept before NMS, per scale.
    pub pre_nms_top_k: usize,
    pub nms_iou: f64,
    /// Proposal cap after NMS at training time.
    pub max_proposals_train: usize,
    /// Proposal cap after NMS at whole-scene inference.
    pub max_proposals: usize,
    /// Proposals below this objectness score are dropped at inference.
    pub min_score: f64,
    /// Cap on color views back-projected at whole-scene inference.
    pub max_views: usize,
    /// Occupancy threshold on sigmoid mask probabilities.
    pub mask_threshold: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            pre_nms_top_k: 512,
            nms_iou: 0.5,
            max_proposals_train: 64,
            max_proposals: 256,
            min_score: 0.05,
            max_views: 24,
            mask_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvalConfig {
    /// Held-out scenes generated when evaluating without a directory.
    pub n_scenes: usize,
    /// Seed offset separating held-out scenes from training scenes.
    pub seed_offset: u64,
    /// Completeness histogram bin edges over [0, 1].
    pub completeness_bins: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_scenes: 32, seed_offset: 1_000_000, completeness_bins: vec![0.0, 0.5, 0.8, 1.0] }
    }
}

impl EvalConfig {
    pub fn bins(&self) -> Vec<(f64, f64)> {
        self.completeness_bins.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Root configuration with `[scene]`, `[model]`, `[train]`, `[infer]` and
/// `[eval]` sections.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub scene: SceneConfig,
    pub model: ModelPreset,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}

/// Model section: a preset name plus overrides.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelPreset {
    /// "tiny" or "full".
    pub preset: String,
    pub n_classes: usize,
    pub base_width: Option<usize>,
    pub chunk_extents: Option<[usize; 3]>,
    pub loss_weights: [f64; 5],
    pub use_color: bool,
    pub use_proxy: bool,
    pub use_completion: bool,
    pub apply_refinement: bool,
    pub seed: u64,
}

impl Default for ModelPreset {
    fn default() -> Self {
        Self {
            preset: "tiny".into(),
            n_classes: 4,
            base_width: None,
            chunk_extents: None,
            loss_weights: [1.0; 5],
            use_color: true,
            use_proxy: true,
            use_completion: true,
            apply_refinement: true,
            seed: 7,
        }
    }
}

impl ModelPreset {
    /// Resolve to a `ModelConfig`; anchor counts come from the anchor set.
    pub fn resolve(&self, n_small: usize, n_big: usize) -> Result<ModelConfig> {
        let mut cfg = match self.preset.as_str() {
            "tiny" => ModelConfig::tiny(self.n_classes, n_small, n_big),
            "full" => ModelConfig::full(self.n_classes, n_small, n_big),
            other => {
                return Err(Error::Config(format!("unknown model preset '{other}'")));
            }
        };
        if let Some(w) = self.base_width {
            cfg.base_width = w;
        }
        if let Some(e) = self.chunk_extents {
            cfg.chunk_extents = e;
        }
        cfg.loss_weights = self.loss_weights;
        cfg.use_color = self.use_color;
        cfg.use_proxy = self.use_proxy;
        cfg.use_completion = self.use_completion;
        cfg.apply_refinement = self.apply_refinement;
        Ok(cfg)
    }
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: PipelineConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.scene.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}
