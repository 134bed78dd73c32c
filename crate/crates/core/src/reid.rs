//! Re-identification decoder. Detection decoder features act as re-id
//! queries; each query gathers part features from a backbone scale through
//! the part attention block, guided by its own detected box. Three layouts:
//! a single decoder on the last detection level, one decoder per level
//! (parallel), or one decoder applied to every level (shared, the Siamese
//! design that gives the deeper levels supervision without new parameters).
//! At inference the last level's features from every configured scale are
//! L2-normalized, concatenated, and normalized again.

use crate::attention::{
    AttentionConfig, FeedForward, MhsaParams, PartAttentionBlock, ReferencePoint,
};
use crate::detector::{DetectorConfig, DetectorOutput};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{concat_cols, concat_rows, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReidVariant {
    Single,
    Parallel,
    Shared,
}

impl ReidVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(ReidVariant::Single),
            "parallel" => Ok(ReidVariant::Parallel),
            "shared" => Ok(ReidVariant::Shared),
            other => Err(Error::Config(format!("unknown re-id variant '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ReidVariant::Single => "single",
            ReidVariant::Parallel => "parallel",
            ReidVariant::Shared => "shared",
        }
    }
}

/// Which map feeds the re-id decoder: a backbone scale, or one of the
/// detection encoder's intermediate maps (those exist only at the coarsest
/// scale).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReidSource {
    Backbone,
    Encoder(usize),
}

impl ReidSource {
    /// Accepts "backbone" or "encoderK" with K counted from 1.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "backbone" {
            return Ok(ReidSource::Backbone);
        }
        if let Some(k) = s.strip_prefix("encoder") {
            if let Ok(k) = k.parse::<usize>() {
                return Ok(ReidSource::Encoder(k));
            }
        }
        Err(Error::Config(format!("unknown re-id input source '{s}'")))
    }

    pub fn name(&self) -> String {
        match self {
            ReidSource::Backbone => "backbone".to_string(),
            ReidSource::Encoder(k) => format!("encoder{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReidConfig {
    pub variant: ReidVariant,
    /// Backbone scale indices: 0, 1, 2 for strides s, 2s, 4s.
    pub scales: Vec<usize>,
    pub d_reid: usize,
    pub input_source: ReidSource,
}

impl ReidConfig {
    pub fn validate(&self, det: &DetectorConfig) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("re-id needs at least one scale".into()));
        }
        let mut seen = [false; 3];
        for &s in &self.scales {
            if s > 2 {
                return Err(Error::Config(format!("scale index {s} out of range 0..=2")));
            }
            if seen[s] {
                return Err(Error::Config(format!("scale index {s} listed twice")));
            }
            seen[s] = true;
        }
        if self.d_reid != det.d_model {
            return Err(Error::Config(format!(
                "d_reid {} must equal d_model {}: part attention mixes the two widths",
                self.d_reid, det.d_model
            )));
        }
        if let ReidSource::Encoder(k) = self.input_source {
            if k == 0 || k > det.n_encoders {
                return Err(Error::Config(format!(
                    "encoder source {k} out of range 1..={}",
                    det.n_encoders
                )));
            }
            if self.scales != vec![2] {
                return Err(Error::Config(
                    "encoder-sourced re-id only exists at the coarsest scale".into(),
                ));
            }
        }
        Ok(())
    }
}

impl Default for ReidConfig {
    fn default() -> Self {
        ReidConfig {
            variant: ReidVariant::Shared,
            scales: vec![0, 1, 2],
            d_reid: 32,
            input_source: ReidSource::Backbone,
        }
    }
}

/// One re-id decoder layer: self-attention over the queries, the two-layer
/// part attention block against the scale map, then feed-forward.
pub struct ReidDecoderLayer {
    pub self_attn: MhsaParams,
    pub parts: PartAttentionBlock,
    pub ffn: FeedForward,
}

impl ReidDecoderLayer {
    pub fn init(att: &AttentionConfig, d_ffn: usize, rng: &mut Rng) -> Self {
        ReidDecoderLayer {
            self_attn: MhsaParams::init(att, rng),
            parts: PartAttentionBlock::init(att, rng),
            ffn: FeedForward::init(att.d_model, d_ffn, rng),
        }
    }

    pub fn param_count(d: usize, points: usize, d_ffn: usize) -> usize {
        MhsaParams::param_count(d)
            + 2 * crate::attention::PartAttentionLayer::param_count(d, points)
            + FeedForward::param_count(d, d_ffn)
    }

    pub fn unpack(
        x: &Tensor,
        off: &mut usize,
        d: usize,
        heads: usize,
        points: usize,
        d_ffn: usize,
    ) -> Result<Self> {
        use crate::attention::PartAttentionLayer;
        Ok(ReidDecoderLayer {
            self_attn: MhsaParams::unpack(x, off, d, heads)?,
            parts: PartAttentionBlock {
                layer1: PartAttentionLayer::unpack(x, off, d, heads, points)?,
                layer2: PartAttentionLayer::unpack(x, off, d, heads, points)?,
            },
            ffn: FeedForward::unpack(x, off, d, d_ffn)?,
        })
    }

    pub fn visit<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.self_attn.visit(&format!("{prefix}.self_attn"), out);
        self.parts.visit(&format!("{prefix}.parts"), out);
        self.ffn.visit(&format!("{prefix}.ffn"), out);
    }

    /// Decode one level's queries against one scale map. Boxes are plain
    /// values: re-id gradients shape the decoder, not the detected geometry.
    pub fn forward(&self, queries: &Tensor, boxes: &[f64], map: &Tensor) -> Result<Tensor> {
        let vmap1 = self.parts.layer1.project_map(map)?;
        let vmap2 = self.parts.layer2.project_map(map)?;
        self.forward_projected(queries, boxes, &vmap1, &vmap2)
    }

    /// Same, with both part layers' value-projected maps precomputed so the
    /// shared variant can reuse them across levels.
    pub fn forward_projected(
        &self,
        queries: &Tensor,
        boxes: &[f64],
        vmap1: &Tensor,
        vmap2: &Tensor,
    ) -> Result<Tensor> {
        let (n, d) = queries.rows_cols();
        if boxes.len() != 4 * n {
            return Err(Error::invalid(
                "reid_decode",
                format!("{n} queries need {} box values, got {}", 4 * n, boxes.len()),
            ));
        }
        let x = self.self_attn.forward(queries)?;
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let b = &boxes[4 * i..4 * i + 4];
            let rp = ReferencePoint::with_box(b[0], b[1], b[2], b[3]);
            let q = x.row(i)?;
            let attended = self.parts.forward_projected(&q, &rp, vmap1, vmap2)?;
            rows.push(attended.reshape(&[1, d])?);
        }
        let gathered = concat_rows(&rows)?;
        self.ffn.forward(&gathered)
    }
}

/// F_r(level, scale) feature sets from a training-mode forward.
pub struct ReidFeatures {
    /// (level index 0..3, scale index, [N, d_reid] features).
    pub entries: Vec<(usize, usize, Tensor)>,
}

impl ReidFeatures {
    pub fn get(&self, level: usize, scale: usize) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(l, s, _)| *l == level && *s == scale)
            .map(|(_, _, t)| t)
    }
}

pub struct ReidHead {
    cfg: ReidConfig,
    /// decoders[i] belongs to cfg.scales[i]; one layer for single/shared,
    /// three (one per level) for parallel.
    pub decoders: Vec<Vec<ReidDecoderLayer>>,
}

impl ReidHead {
    pub fn init(cfg: &ReidConfig, det: &DetectorConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate(det)?;
        let att = AttentionConfig::new(det.d_model, det.n_heads, det.n_points)?;
        let per_scale = match cfg.variant {
            ReidVariant::Parallel => det.n_decoders,
            ReidVariant::Single | ReidVariant::Shared => 1,
        };
        let decoders = cfg
            .scales
            .iter()
            .map(|&s| {
                (0..per_scale)
                    .map(|j| {
                        ReidDecoderLayer::init(
                            &att,
                            det.d_ffn,
                            &mut rng.fork_named(&format!("reid-s{s}-l{j}")),
                        )
                    })
                    .collect()
            })
            .collect();
        Ok(ReidHead { cfg: cfg.clone(), decoders })
    }

    pub fn config(&self) -> &ReidConfig {
        &self.cfg
    }

    pub fn visit<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, per_scale) in self.decoders.iter_mut().enumerate() {
            for (j, layer) in per_scale.iter_mut().enumerate() {
                layer.visit(&format!("{prefix}.scale{i}.layer{j}"), out);
            }
        }
    }

    fn scale_map<'a>(&self, out: &'a DetectorOutput, scale: usize) -> &'a Tensor {
        match self.cfg.input_source {
            ReidSource::Backbone => out.features.by_index(scale),
            ReidSource::Encoder(k) => &out.encoder_maps[k - 1],
        }
    }

    fn decoder_for(&self, scale_pos: usize, level: usize) -> &ReidDecoderLayer {
        match self.cfg.variant {
            ReidVariant::Parallel => &self.decoders[scale_pos][level],
            ReidVariant::Single | ReidVariant::Shared => &self.decoders[scale_pos][0],
        }
    }

    /// Decode one detection level against one configured scale.
    pub fn decode(
        &self,
        out: &DetectorOutput,
        level: usize,
        scale: usize,
    ) -> Result<Tensor> {
        let pos = self
            .cfg
            .scales
            .iter()
            .position(|&s| s == scale)
            .ok_or_else(|| Error::Config(format!("scale {scale} not configured for re-id")))?;
        let map = self.scale_map(out, scale);
        let lv = &out.levels[level];
        self.decoder_for(pos, level)
            .forward(&lv.features, lv.boxes.values(), map)
    }

    /// All supervised feature sets: every (level, scale) pair for shared and
    /// parallel, the last level only for single.
    pub fn forward_train(&self, out: &DetectorOutput) -> Result<ReidFeatures> {
        let n_levels = out.levels.len();
        let levels: Vec<usize> = match self.cfg.variant {
            ReidVariant::Single => vec![n_levels - 1],
            _ => (0..n_levels).collect(),
        };
        let mut entries = Vec::new();
        for (pos, &scale) in self.cfg.scales.iter().enumerate() {
            let map = self.scale_map(out, scale);
            match self.cfg.variant {
                // One parameter set per scale: project the map once and run
                // every level through the same weights.
                ReidVariant::Shared | ReidVariant::Single => {
                    let layer = &self.decoders[pos][0];
                    let vmap1 = layer.parts.layer1.project_map(map)?;
                    let vmap2 = layer.parts.layer2.project_map(map)?;
                    for &j in &levels {
                        let lv = &out.levels[j];
                        let f = layer.forward_projected(
                            &lv.features,
                            lv.boxes.values(),
                            &vmap1,
                            &vmap2,
                        )?;
                        entries.push((j, scale, f));
                    }
                }
                ReidVariant::Parallel => {
                    for &j in &levels {
                        let lv = &out.levels[j];
                        let f = self.decoders[pos][j].forward(
                            &lv.features,
                            lv.boxes.values(),
                            map,
                        )?;
                        entries.push((j, scale, f));
                    }
                }
            }
        }
        Ok(ReidFeatures { entries })
    }

    /// Inference feature: last-level re-id features per scale, each
    /// L2-normalized, concatenated per query, normalized again.
    pub fn forward_infer(&self, out: &DetectorOutput) -> Result<Tensor> {
        let last = out.levels.len() - 1;
        let mut per_scale = Vec::with_capacity(self.cfg.scales.len());
        for &scale in &self.cfg.scales {
            let f = self.decode(out, last, scale)?;
            per_scale.push(f.l2_normalize_rows(1e-12)?);
        }
        concat_cols(&per_scale)?.l2_normalize_rows(1e-12)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Detector;
    use crate::tensor::gradcheck::{check_case, REL_TOL};
    use approx::assert_relative_eq;

    fn det_cfg(d: usize, n_queries: usize) -> DetectorConfig {
        DetectorConfig {
            d_model: d,
            n_heads: 2,
            n_points: 2,
            n_queries,
            n_encoders: 3,
            n_decoders: 3,
            d_ffn: 2 * d,
            strides: (4, 8, 16),
        }
    }

    fn reid_cfg(variant: ReidVariant, scales: &[usize], d: usize) -> ReidConfig {
        ReidConfig {
            variant,
            scales: scales.to_vec(),
            d_reid: d,
            input_source: ReidSource::Backbone,
        }
    }

    fn forward_toy(
        det_seed: u64,
        d: usize,
        n: usize,
    ) -> (DetectorConfig, DetectorOutput) {
        let cfg = det_cfg(d, n);
        let mut rng = Rng::new(det_seed).fork_named("reid-detector");
        let det = Detector::init(&cfg, &mut rng).unwrap();
        let img = Tensor::new(
            &[3, 32, 32],
            (0..3 * 32 * 32).map(|_| rng.range(0.0, 1.0)).collect(),
        )
        .unwrap();
        (cfg, det.forward(&img).unwrap())
    }

    #[test]
    fn config_validation_catches_bad_scales_and_sources() {
        let det = det_cfg(8, 4);
        assert!(reid_cfg(ReidVariant::Shared, &[], 8).validate(&det).is_err());
        assert!(reid_cfg(ReidVariant::Shared, &[3], 8).validate(&det).is_err());
        assert!(reid_cfg(ReidVariant::Shared, &[1, 1], 8).validate(&det).is_err());
        assert!(reid_cfg(ReidVariant::Shared, &[0], 16).validate(&det).is_err());
        let mut enc = reid_cfg(ReidVariant::Shared, &[0, 2], 8);
        enc.input_source = ReidSource::Encoder(2);
        assert!(enc.validate(&det).is_err());
        enc.scales = vec![2];
        assert!(enc.validate(&det).is_ok());
        enc.input_source = ReidSource::Encoder(4);
        assert!(enc.validate(&det).is_err());
    }

    #[test]
    fn variant_feature_set_counts() {
        let (dcfg, out) = forward_toy(50, 8, 4);
        let mut rng = Rng::new(51).fork_named("reid-counts");
        for (variant, expect) in [
            (ReidVariant::Shared, 9),
            (ReidVariant::Parallel, 9),
            (ReidVariant::Single, 3),
        ] {
            let cfg = reid_cfg(variant, &[0, 1, 2], 8);
            let head = ReidHead::init(&cfg, &dcfg, &mut rng).unwrap();
            let feats = head.forward_train(&out).unwrap();
            assert_eq!(feats.entries.len(), expect, "{}", variant.name());
            for (_, _, t) in &feats.entries {
                assert_eq!(t.shape(), &[4, 8]);
            }
        }
    }

    #[test]
    fn parallel_has_three_times_shared_parameters() {
        let dcfg = det_cfg(8, 4);
        let mut rng = Rng::new(52).fork_named("reid-params");
        let mut shared =
            ReidHead::init(&reid_cfg(ReidVariant::Shared, &[0, 1, 2], 8), &dcfg, &mut rng)
                .unwrap();
        let mut parallel =
            ReidHead::init(&reid_cfg(ReidVariant::Parallel, &[0, 1, 2], 8), &dcfg, &mut rng)
                .unwrap();
        let count = |h: &mut ReidHead| {
            let mut v = Vec::new();
            h.visit("reid", &mut v);
            v.iter().map(|(_, t)| t.numel()).sum::<usize>()
        };
        assert_eq!(count(&mut parallel), 3 * count(&mut shared));
    }

    #[test]
    fn shared_variant_reuses_one_parameter_set_across_levels() {
        let (dcfg, out) = forward_toy(53, 8, 4);
        let mut rng = Rng::new(54).fork_named("reid-siamese");
        let cfg = reid_cfg(ReidVariant::Shared, &[2], 8);
        let head = ReidHead::init(&cfg, &dcfg, &mut rng).unwrap();
        assert_eq!(head.decoders[0].len(), 1);
        // Levels 1 and 3 run through literally the same tensors.
        let l0 = head.decoder_for(0, 0) as *const ReidDecoderLayer;
        let l2 = head.decoder_for(0, 2) as *const ReidDecoderLayer;
        assert_eq!(l0, l2);
        let _ = out;
    }

    #[test]
    fn identical_queries_and_boxes_get_identical_features() {
        let dcfg = det_cfg(8, 2);
        let mut rng = Rng::new(55).fork_named("reid-sym");
        let cfg = reid_cfg(ReidVariant::Shared, &[0], 8);
        let head = ReidHead::init(&cfg, &dcfg, &mut rng).unwrap();
        let row: Vec<f64> = (0..8).map(|_| rng.range(-1.0, 1.0)).collect();
        let mut q = row.clone();
        q.extend(&row);
        let queries = Tensor::new(&[2, 8], q).unwrap();
        let boxes = vec![0.4, 0.5, 0.3, 0.4, 0.4, 0.5, 0.3, 0.4];
        let map = Tensor::new(
            &[8, 6, 6],
            (0..8 * 36).map(|_| rng.range(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let f = head.decoders[0][0].forward(&queries, &boxes, &map).unwrap();
        assert_eq!(&f.values()[0..8], &f.values()[8..16]);
    }

    #[test]
    fn scale_must_be_configured_to_decode() {
        let (dcfg, out) = forward_toy(56, 8, 3);
        let mut rng = Rng::new(57).fork_named("reid-scale-err");
        let head =
            ReidHead::init(&reid_cfg(ReidVariant::Shared, &[0, 2], 8), &dcfg, &mut rng).unwrap();
        assert!(head.decode(&out, 2, 1).is_err());
        assert!(head.decode(&out, 2, 0).is_ok());
    }

    #[test]
    fn inference_feature_is_unit_norm_concat_of_scales() {
        let (dcfg, out) = forward_toy(58, 8, 3);
        let mut rng = Rng::new(59).fork_named("reid-infer");
        let head =
            ReidHead::init(&reid_cfg(ReidVariant::Shared, &[0, 1, 2], 8), &dcfg, &mut rng)
                .unwrap();
        let f = head.forward_infer(&out).unwrap();
        assert_eq!(f.shape(), &[3, 24]);
        for i in 0..3 {
            let row = &f.values()[i * 24..(i + 1) * 24];
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "row {i} norm {norm}");
        }
    }

    #[test]
    fn single_scale_inference_is_normalized_level3_feature() {
        let (dcfg, out) = forward_toy(60, 8, 3);
        let mut rng = Rng::new(61).fork_named("reid-one-scale");
        let head =
            ReidHead::init(&reid_cfg(ReidVariant::Shared, &[2], 8), &dcfg, &mut rng).unwrap();
        let f = head.forward_infer(&out).unwrap();
        let direct = head
            .decode(&out, 2, 2)
            .unwrap()
            .l2_normalize_rows(1e-12)
            .unwrap()
            .l2_normalize_rows(1e-12)
            .unwrap();
        for (a, b) in f.values().iter().zip(direct.values()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn shared_level3_feature_identical_in_train_and_infer() {
        let (dcfg, out) = forward_toy(62, 8, 3);
        let mut rng = Rng::new(63).fork_named("reid-s3");
        let head =
            ReidHead::init(&reid_cfg(ReidVariant::Shared, &[0, 1, 2], 8), &dcfg, &mut rng)
                .unwrap();
        let train = head.forward_train(&out).unwrap();
        for &scale in &[0usize, 1, 2] {
            let from_train = train.get(2, scale).unwrap();
            let from_infer = head.decode(&out, 2, scale).unwrap();
            assert_eq!(from_train.values(), from_infer.values(), "scale {scale}");
        }
    }

    #[test]
    fn encoder_source_decodes_against_encoder_map() {
        let (dcfg, out) = forward_toy(64, 8, 3);
        let mut rng = Rng::new(65).fork_named("reid-enc-src");
        let mut cfg = reid_cfg(ReidVariant::Shared, &[2], 8);
        cfg.input_source = ReidSource::Encoder(2);
        let head = ReidHead::init(&cfg, &dcfg, &mut rng).unwrap();
        let via_head = head.decode(&out, 2, 2).unwrap();
        let lv = &out.levels[2];
        let direct = head.decoders[0][0]
            .forward(&lv.features, lv.boxes.values(), &out.encoder_maps[1])
            .unwrap();
        assert_eq!(via_head.values(), direct.values());
    }

    #[test]
    fn reid_decode_matches_finite_differences() {
        let mut rng = Rng::new(66).fork_named("gc-reid");
        let (d, heads, k, dff, n) = (4usize, 2usize, 2usize, 8usize, 2usize);
        let pcount = ReidDecoderLayer::param_count(d, k, dff);
        let map_len = d * 16;
        let boxes = vec![0.4, 0.45, 0.35, 0.4, 0.6, 0.55, 0.3, 0.35];
        for _ in 0..3 {
            let total = pcount + n * d + map_len;
            let x0: Vec<f64> = (0..total).map(|_| rng.range(-0.6, 0.6)).collect();
            let boxes = boxes.clone();
            let err = check_case(&x0, &mut rng, move |x| {
                let mut off = 0;
                let layer = ReidDecoderLayer::unpack(x, &mut off, d, heads, k, dff)?;
                let q = x.slice_cols(off, off + n * d)?.reshape(&[n, d])?;
                off += n * d;
                let map = x.slice_cols(off, off + map_len)?.reshape(&[d, 4, 4])?;
                layer.forward(&q, &boxes, &map)
            })
            .unwrap();
            assert!(err <= REL_TOL, "reid decode rel err {err}");
        }
    }
}
