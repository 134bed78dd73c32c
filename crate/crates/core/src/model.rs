//! The complete person-search model: the detection transformer and the
//! re-id head behind one config, one parameter traversal, and the two
//! entry points training and inference need.

use crate::boxes::BoxCxcywh;
use crate::detector::{Detector, DetectorConfig, DetectorOutput};
use crate::error::Result;
use crate::reid::{ReidConfig, ReidFeatures, ReidHead};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub detector: DetectorConfig,
    pub reid: ReidConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { detector: DetectorConfig::default(), reid: ReidConfig::default() }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.reid.validate(&self.detector)
    }
}

/// One thresholdable output of the set predictor: a person hypothesis with
/// its retrieval feature (unit norm, `scales * d_model` wide).
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub score: f64,
    pub bbox: BoxCxcywh,
    pub feature: Vec<f64>,
}

pub struct SearchModel {
    pub detector: Detector,
    pub reid: ReidHead,
}

impl SearchModel {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<SearchModel> {
        cfg.validate()?;
        let detector = Detector::init(&cfg.detector, &mut rng.fork_named("detector"))?;
        let reid = ReidHead::init(&cfg.reid, &cfg.detector, &mut rng.fork_named("reid"))?;
        Ok(SearchModel { detector, reid })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            detector: self.detector.config().clone(),
            reid: self.reid.config().clone(),
        }
    }

    /// Every trainable parameter, under a stable unique name.
    pub fn visit<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.detector.visit("detector", out);
        self.reid.visit("reid", out);
    }

    pub fn param_count(&mut self) -> usize {
        let mut params = Vec::new();
        self.visit(&mut params);
        params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Training pass: detection levels plus every supervised re-id set.
    pub fn forward_train(&self, image: &Tensor) -> Result<(DetectorOutput, ReidFeatures)> {
        let out = self.detector.forward(image)?;
        let feats = self.reid.forward_train(&out)?;
        Ok((out, feats))
    }

    /// Inference: the last level's N scored boxes, each carrying the
    /// concatenated multi-scale retrieval feature. No duplicate
    /// suppression of any kind.
    pub fn predictions(&self, image: &Tensor) -> Result<Vec<Prediction>> {
        let out = self.detector.forward(image)?;
        let feats = self.reid.forward_infer(&out)?;
        let last = out.last();
        let scores = last.scores();
        let boxes = last.box_structs();
        let vals = feats.values();
        let d = vals.len() / scores.len();
        Ok(scores
            .into_iter()
            .zip(boxes)
            .enumerate()
            .map(|(q, (score, bbox))| Prediction {
                score,
                bbox,
                feature: vals[q * d..(q + 1) * d].to_vec(),
            })
            .collect())
    }
}
