//! Set-based training loss. Each decoder level is matched to the scene's
//! ground-truth persons by minimal-cost bipartite assignment; matched pairs
//! pay focal classification, GIoU, and L1 box losses, and every re-id
//! feature set pays an identity loss against the scale's feature bank.
//! Components are averaged over decoder levels and combined with fixed
//! weights.

use crate::bank::{oim_loss_tensor, IdentityBank};
use crate::boxes::{giou, BoxCxcywh};
use crate::detector::DecoderLevel;
use crate::error::{Error, Result};
use crate::matcher::{hungarian_assign, Assignment};
use crate::reid::ReidFeatures;
use crate::tensor::{concat_cols, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 2.0, lambda2: 5.0, lambda3: 2.0, lambda4: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub cls_focal_gamma: f64,
    pub cls_focal_alpha: f64,
    pub oim_focal_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            cls_focal_gamma: 2.0,
            cls_focal_alpha: 0.25,
            oim_focal_gamma: 2.0,
        }
    }
}

/// Ground truth for one scene: person boxes and their identity, None for
/// visible but unlabeled people.
#[derive(Debug, Clone, Default)]
pub struct SceneTargets {
    pub boxes: Vec<BoxCxcywh>,
    pub ids: Vec<Option<usize>>,
}

impl SceneTargets {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
    pub oim: f64,
    pub total: f64,
}

pub struct LossOutput {
    /// Scalar loss tensor, the root of the training backward pass.
    pub total: Tensor,
    pub breakdown: LossBreakdown,
    /// Per-level matches, in level order; the last one drives bank updates.
    pub assignments: Vec<Assignment>,
}

/// Matching cost built from a prediction's pieces. Shared by the matcher
/// and its hand-arithmetic tests.
pub fn combine_match_cost(score: f64, giou_val: f64, l1: f64, w: &LossWeights) -> f64 {
    w.lambda1 * (-score) + w.lambda2 * (1.0 - giou_val) + w.lambda3 * l1
}

pub fn match_cost(score: f64, pred: &BoxCxcywh, target: &BoxCxcywh, w: &LossWeights) -> f64 {
    combine_match_cost(score, giou(pred, target), pred.l1_distance(target), w)
}

fn scalar_const(v: f64) -> Tensor {
    Tensor::scalar(v)
}

fn cell(v: f64) -> Tensor {
    Tensor::new(&[1, 1], vec![v]).expect("finite cell")
}

/// Differentiable 1 - GIoU for one predicted box row against a constant
/// target. Mirrors the plain-value implementation in `boxes`.
pub fn giou_loss_tensor(pred: &Tensor, target: &BoxCxcywh) -> Result<Tensor> {
    if pred.numel() != 4 {
        return Err(Error::shape("giou_loss", format!("expected 4 box values, got {:?}", pred.shape())));
    }
    let p = pred.reshape(&[1, 4])?;
    let half_w = p.slice_cols(2, 3)?.mul_scalar(0.5)?;
    let half_h = p.slice_cols(3, 4)?.mul_scalar(0.5)?;
    let x1 = p.slice_cols(0, 1)?.sub(&half_w)?;
    let x2 = p.slice_cols(0, 1)?.add(&half_w)?;
    let y1 = p.slice_cols(1, 2)?.sub(&half_h)?;
    let y2 = p.slice_cols(1, 2)?.add(&half_h)?;
    let (tx1, ty1, tx2, ty2) = target.corners();
    let area_p = p.slice_cols(2, 3)?.mul(&p.slice_cols(3, 4)?)?;
    let area_t = target.area();

    let ix1 = x1.maximum(&cell(tx1))?;
    let iy1 = y1.maximum(&cell(ty1))?;
    let ix2 = x2.minimum(&cell(tx2))?;
    let iy2 = y2.minimum(&cell(ty2))?;
    let inter = ix2.sub(&ix1)?.relu()?.mul(&iy2.sub(&iy1)?.relu()?)?;

    let union = area_p.add_scalar(area_t)?.sub(&inter)?;
    let safe_union = union.maximum(&cell(1e-12))?;
    let iou = inter.div(&safe_union)?;

    let hx1 = x1.minimum(&cell(tx1))?;
    let hy1 = y1.minimum(&cell(ty1))?;
    let hx2 = x2.maximum(&cell(tx2))?;
    let hy2 = y2.maximum(&cell(ty2))?;
    let hull = hx2.sub(&hx1)?.relu()?.mul(&hy2.sub(&hy1)?.relu()?)?;
    let safe_hull = hull.maximum(&cell(1e-12))?;

    let excess = hull.sub(&union)?.div(&safe_hull)?;
    let g = iou.sub(&excess)?;
    g.neg()?.add_scalar(1.0)?.sum()
}

/// Focal binary classification over all queries of one level: matched
/// queries are positives, the rest negatives, summed and normalized by the
/// target count.
pub(crate) fn focal_cls_level(
    logits: &Tensor,
    matched: &[bool],
    n_targets: usize,
    cfg: &LossConfig,
) -> Result<Tensor> {
    let (n, _) = logits.rows_cols();
    let mut terms = Vec::with_capacity(n);
    for q in 0..n {
        let z = logits.row(q)?;
        let p = z.sigmoid()?;
        let term = if matched[q] {
            // -alpha (1-p)^g log p, with log p = -softplus(-z).
            p.neg()?
                .add_scalar(1.0)?
                .powf_const(cfg.cls_focal_gamma)?
                .mul(&z.neg()?.softplus()?)?
                .mul_scalar(cfg.cls_focal_alpha)?
        } else {
            // -(1-alpha) p^g log(1-p), with log(1-p) = -softplus(z).
            p.powf_const(cfg.cls_focal_gamma)?
                .mul(&z.softplus()?)?
                .mul_scalar(1.0 - cfg.cls_focal_alpha)?
        };
        terms.push(term);
    }
    concat_cols(&terms)?.sum()?.mul_scalar(1.0 / n_targets.max(1) as f64)
}

/// Full training loss for one scene.
///
/// `scales` names the configured re-id scales in the same order as `banks`;
/// every `reid.entries` scale must appear in it. Banks enter the graph as
/// constants: the tables are updated by `IdentityBank::update` after the
/// backward pass, never by gradients.
pub fn total_loss(
    levels: &[DecoderLevel],
    reid: &ReidFeatures,
    scales: &[usize],
    targets: &SceneTargets,
    banks: &[IdentityBank],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.weights.validate()?;
    if targets.boxes.len() != targets.ids.len() {
        return Err(Error::invalid(
            "total_loss",
            format!("{} boxes but {} identity labels", targets.boxes.len(), targets.ids.len()),
        ));
    }
    if banks.len() != scales.len() {
        return Err(Error::invalid(
            "total_loss",
            format!("{} banks for {} scales", banks.len(), scales.len()),
        ));
    }
    if levels.is_empty() {
        return Err(Error::invalid("total_loss", "no decoder levels"));
    }
    let t_count = targets.len();

    let mut assignments = Vec::with_capacity(levels.len());
    let mut cls_acc = scalar_const(0.0);
    let mut iou_acc = scalar_const(0.0);
    let mut l1_acc = scalar_const(0.0);
    for level in levels {
        let scores = level.scores();
        let pred_boxes = level.box_structs();
        let cost: Vec<Vec<f64>> = targets
            .boxes
            .iter()
            .map(|t| {
                (0..scores.len())
                    .map(|q| match_cost(scores[q], &pred_boxes[q], t, &cfg.weights))
                    .collect()
            })
            .collect();
        let assign = hungarian_assign(&cost)?;

        let mut matched = vec![false; scores.len()];
        for &q in &assign.target_to_query {
            matched[q] = true;
        }
        cls_acc = cls_acc.add(&focal_cls_level(&level.cls_logits, &matched, t_count, cfg)?)?;

        if t_count > 0 {
            let mut iou_terms = Vec::with_capacity(t_count);
            let mut l1_terms = Vec::with_capacity(t_count);
            for (t, &q) in assign.target_to_query.iter().enumerate() {
                let pred = level.boxes.row(q)?;
                let target = &targets.boxes[t];
                iou_terms.push(giou_loss_tensor(&pred, target)?.reshape(&[1])?);
                let tgt =
                    Tensor::new(&[4], vec![target.cx, target.cy, target.w, target.h])?;
                l1_terms.push(pred.sub(&tgt)?.abs()?.sum()?.reshape(&[1])?);
            }
            let inv = 1.0 / t_count as f64;
            iou_acc = iou_acc.add(&concat_cols(&iou_terms)?.sum()?.mul_scalar(inv)?)?;
            l1_acc = l1_acc.add(&concat_cols(&l1_terms)?.sum()?.mul_scalar(inv)?)?;
        }
        assignments.push(assign);
    }
    let inv_levels = 1.0 / levels.len() as f64;
    let cls = cls_acc.mul_scalar(inv_levels)?;
    let iou = iou_acc.mul_scalar(inv_levels)?;
    let l1 = l1_acc.mul_scalar(inv_levels)?;

    // Identity loss: every supervised (level, scale) feature set scores its
    // matched labeled queries against that scale's bank snapshot.
    let mut bank_rows = Vec::with_capacity(banks.len());
    for b in banks {
        bank_rows.push(b.rows_tensor()?);
    }
    let mut set_means = Vec::new();
    for (level, scale, feats) in &reid.entries {
        let si = scales
            .iter()
            .position(|s| s == scale)
            .ok_or_else(|| Error::Config(format!("re-id produced unconfigured scale {scale}")))?;
        let assign = &assignments[*level];
        let mut terms = Vec::new();
        for (t, &q) in assign.target_to_query.iter().enumerate() {
            if let Some(id) = targets.ids[t] {
                let x = feats.row(q)?.l2_normalize_rows(1e-12)?;
                let term = oim_loss_tensor(
                    &x,
                    &bank_rows[si],
                    id,
                    banks[si].labeled(),
                    banks[si].tau,
                    cfg.oim_focal_gamma,
                )?;
                terms.push(term.reshape(&[1])?);
            }
        }
        if !terms.is_empty() {
            let mean = concat_cols(&terms)?.sum()?.mul_scalar(1.0 / terms.len() as f64)?;
            set_means.push(mean.reshape(&[1])?);
        } else {
            set_means.push(scalar_const(0.0).reshape(&[1])?);
        }
    }
    let oim = if set_means.is_empty() {
        scalar_const(0.0)
    } else {
        concat_cols(&set_means)?.sum()?.mul_scalar(1.0 / set_means.len() as f64)?
    };

    let w = &cfg.weights;
    let total = cls
        .mul_scalar(w.lambda1)?
        .add(&iou.mul_scalar(w.lambda2)?)?
        .add(&l1.mul_scalar(w.lambda3)?)?
        .add(&oim.mul_scalar(w.lambda4)?)?;

    let breakdown = LossBreakdown {
        cls: cls.item(),
        iou: iou.item(),
        l1: l1.item(),
        oim: oim.item(),
        total: total.item(),
    };
    Ok(LossOutput { total, breakdown, assignments })
}

/// Features that feed the bank update after a step: the last decoder
/// level's matched re-id features per scale, L2-normalized plain values.
pub fn bank_update_entries(
    reid: &ReidFeatures,
    scales: &[usize],
    last_level: usize,
    assignment: &Assignment,
    targets: &SceneTargets,
) -> Result<Vec<Vec<(Option<usize>, Vec<f64>)>>> {
    let mut per_scale = vec![Vec::new(); scales.len()];
    for (si, &scale) in scales.iter().enumerate() {
        let feats = reid.get(last_level, scale).ok_or_else(|| {
            Error::invalid("bank_update", format!("no re-id features for scale {scale}"))
        })?;
        let (_, d) = feats.rows_cols();
        let vals = feats.values();
        for (t, &q) in assignment.target_to_query.iter().enumerate() {
            let mut x = vals[q * d..(q + 1) * d].to_vec();
            let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in &mut x {
                    *v /= norm;
                }
            }
            per_scale[si].push((targets.ids[t], x));
        }
    }
    Ok(per_scale)
}
