//! Plain-text run configuration: one TOML document covering model, data,
//! training, and evaluation. Every field has a default, unknown keys are
//! rejected, and the effective (fully defaulted) config can be echoed back
//! out, which is what run directories and checkpoints store.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::loss::{LossConfig, LossWeights};
use crate::model::ModelConfig;
use crate::reid::{ReidConfig, ReidSource, ReidVariant};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for training (model init, banks, batch order).
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_points: usize,
    pub n_queries: usize,
    pub n_encoders: usize,
    pub n_decoders: usize,
    pub d_ffn: usize,
    pub strides: (usize, usize, usize),
    pub variant: String,
    pub scales: Vec<usize>,
    pub d_reid: usize,
    pub input_source: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        let det = DetectorConfig::default();
        let reid = ReidConfig::default();
        ModelSection {
            d_model: det.d_model,
            n_heads: det.n_heads,
            n_points: det.n_points,
            n_queries: det.n_queries,
            n_encoders: det.n_encoders,
            n_decoders: det.n_decoders,
            d_ffn: det.d_ffn,
            strides: det.strides,
            variant: reid.variant.name().to_string(),
            scales: reid.scales,
            d_reid: reid.d_reid,
            input_source: reid.input_source.name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Seed for dataset generation, independent of the training seed.
    pub seed: u64,
    pub image_size: usize,
    pub base_glyph: (usize, usize),
    pub scale_range: (f64, f64),
    pub persons_per_scene: (usize, usize),
    pub labeled: usize,
    pub unlabeled: usize,
    pub train_scenes: usize,
    pub gallery_scenes: usize,
    pub cameras: usize,
    pub max_overlap: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DataConfig::default();
        DataSection {
            seed: d.seed,
            image_size: d.image_size,
            base_glyph: d.base_glyph,
            scale_range: d.scale_range,
            persons_per_scene: d.persons_per_scene,
            labeled: d.labeled,
            unlabeled: d.unlabeled,
            train_scenes: d.train_scenes,
            gallery_scenes: d.gallery_scenes,
            cameras: d.cameras,
            max_overlap: d.max_overlap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub lr_milestones: Vec<usize>,
    pub weight_decay: f64,
    pub bank_queue: usize,
    pub bank_tau: f64,
    pub bank_momentum: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub cls_focal_gamma: f64,
    pub cls_focal_alpha: f64,
    pub oim_focal_gamma: f64,
    /// Snapshot cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            beta1: t.beta1,
            lr_milestones: t.lr_milestones,
            weight_decay: t.weight_decay,
            bank_queue: t.bank_queue,
            bank_tau: t.bank_tau,
            bank_momentum: t.bank_momentum,
            lambda1: t.loss.weights.lambda1,
            lambda2: t.loss.weights.lambda2,
            lambda3: t.loss.weights.lambda3,
            lambda4: t.loss.weights.lambda4,
            cls_focal_gamma: t.loss.cls_focal_gamma,
            cls_focal_alpha: t.loss.cls_focal_alpha,
            oim_focal_gamma: t.loss.oim_focal_gamma,
            checkpoint_every: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub score_thresh: f64,
    pub iou_thresh: f64,
    pub gallery_sizes: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        EvalSection {
            score_thresh: e.score_thresh,
            iou_thresh: e.iou_thresh,
            gallery_sizes: vec![10, 25, 50],
        }
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_text(&text)
    }

    /// The effective configuration with every default filled in.
    pub fn to_text(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("unserializable: {e}")))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let cfg = ModelConfig {
            detector: DetectorConfig {
                d_model: m.d_model,
                n_heads: m.n_heads,
                n_points: m.n_points,
                n_queries: m.n_queries,
                n_encoders: m.n_encoders,
                n_decoders: m.n_decoders,
                d_ffn: m.d_ffn,
                strides: m.strides,
            },
            reid: ReidConfig {
                variant: ReidVariant::parse(&m.variant)?,
                scales: m.scales.clone(),
                d_reid: m.d_reid,
                input_source: ReidSource::parse(&m.input_source)?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn data_config(&self) -> Result<DataConfig> {
        let d = &self.data;
        let cfg = DataConfig {
            seed: d.seed,
            image_size: d.image_size,
            base_glyph: d.base_glyph,
            scale_range: d.scale_range,
            persons_per_scene: d.persons_per_scene,
            labeled: d.labeled,
            unlabeled: d.unlabeled,
            train_scenes: d.train_scenes,
            gallery_scenes: d.gallery_scenes,
            cameras: d.cameras,
            max_overlap: d.max_overlap,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            beta1: t.beta1,
            lr_milestones: t.lr_milestones.clone(),
            weight_decay: t.weight_decay,
            bank_queue: t.bank_queue,
            bank_tau: t.bank_tau,
            bank_momentum: t.bank_momentum,
            loss: LossConfig {
                weights: LossWeights {
                    lambda1: t.lambda1,
                    lambda2: t.lambda2,
                    lambda3: t.lambda3,
                    lambda4: t.lambda4,
                },
                cls_focal_gamma: t.cls_focal_gamma,
                cls_focal_alpha: t.cls_focal_alpha,
                oim_focal_gamma: t.oim_focal_gamma,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        if self.eval.gallery_sizes.is_empty() {
            return Err(Error::Config("gallery_sizes must not be empty".into()));
        }
        Ok(EvalConfig { score_thresh: self.eval.score_thresh, iou_thresh: self.eval.iou_thresh })
    }
}
