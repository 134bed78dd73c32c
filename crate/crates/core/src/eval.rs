//! Retrieval and detection scoring. Inference produces a fixed set of
//! scored boxes per scene with no duplicate suppression; search ranks
//! thresholded gallery candidates by cosine similarity to the query
//! feature, and both search AP and detection AP come from raw
//! precision-recall points with one-to-one greedy ground-truth claiming.

use crate::boxes::{box_iou, BoxCxcywh};
use crate::data::{Dataset, Query};
use crate::error::{Error, Result};
use crate::model::Prediction;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// Detection score below which predictions never enter a gallery.
    pub score_thresh: f64,
    /// Minimum IoU for a candidate or detection to claim a ground truth.
    pub iou_thresh: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { score_thresh: 0.3, iou_thresh: 0.5 }
    }
}

/// One ranked retrieval hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryCandidate {
    /// Gallery scene the box came from.
    pub scene: usize,
    /// Prediction index within that scene, the final ranking tie-break.
    pub pred_idx: usize,
    pub bbox: BoxCxcywh,
    pub score: f64,
    pub similarity: f64,
    /// Filled in by scoring: claimed a matching ground-truth box.
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub per_query_ap: Vec<f64>,
    pub map: f64,
    pub top1: f64,
    pub gallery_size: usize,
    /// Queries dropped for having no ground-truth match in their gallery.
    pub skipped: usize,
}

/// The feature to search with: the prediction overlapping the query box
/// most, ties broken by detection score. Returns the fallback flag for the
/// degenerate case where nothing overlaps and the highest-scoring
/// prediction is used instead.
pub fn select_query_feature<'a>(
    preds: &'a [Prediction],
    query_box: &BoxCxcywh,
) -> Result<(&'a Prediction, bool)> {
    if preds.is_empty() {
        return Err(Error::invalid("select_query_feature", "no predictions"));
    }
    let best_overlap = preds
        .iter()
        .map(|p| (box_iou(&p.bbox, query_box), p.score))
        .enumerate()
        .max_by(|(_, a), (_, b)| a.partial_cmp(b).expect("finite iou and score"))
        .expect("nonempty");
    if best_overlap.1 .0 > 0.0 {
        return Ok((&preds[best_overlap.0], false));
    }
    let best_score = preds
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.score.partial_cmp(&b.score).expect("finite score"))
        .expect("nonempty");
    Ok((best_score.1, true))
}

/// Thresholds every gallery scene's predictions and ranks them by cosine
/// similarity to the query feature, descending; ties fall back to scene
/// id, then prediction index. Features must be unit norm.
pub fn rank_gallery(
    query_feature: &[f64],
    gallery: &[(usize, &[Prediction])],
    cfg: &EvalConfig,
) -> Vec<GalleryCandidate> {
    let mut out = Vec::new();
    for (scene, preds) in gallery {
        for (pred_idx, p) in preds.iter().enumerate() {
            if p.score < cfg.score_thresh {
                continue;
            }
            let similarity: f64 =
                p.feature.iter().zip(query_feature).map(|(a, b)| a * b).sum();
            out.push(GalleryCandidate {
                scene: *scene,
                pred_idx,
                bbox: p.bbox,
                score: p.score,
                similarity,
                correct: false,
            });
        }
    }
    out.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .expect("finite similarity")
            .then(a.scene.cmp(&b.scene))
            .then(a.pred_idx.cmp(&b.pred_idx))
    });
    out
}

/// Walks one ranked list, claiming each ground truth at most once, and
/// returns (AP, top-1 hit). AP sums precision at every true-positive rank
/// and divides by the ground-truth count; no interpolation.
fn score_ranking(
    candidates: &mut [GalleryCandidate],
    gts: &[(usize, BoxCxcywh)],
    iou_thresh: f64,
) -> (f64, bool) {
    let mut claimed = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (k, cand) in candidates.iter_mut().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, (scene, gbox)) in gts.iter().enumerate() {
            if claimed[gi] || *scene != cand.scene {
                continue;
            }
            let iou = box_iou(&cand.bbox, gbox);
            if iou >= iou_thresh && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            claimed[gi] = true;
            tp += 1;
            cand.correct = true;
            ap += tp as f64 / (k + 1) as f64;
        }
    }
    (ap / gts.len() as f64, candidates.first().is_some_and(|c| c.correct))
}

/// Scores ranked candidate lists against per-query ground truth. Queries
/// with no ground truth in their gallery are skipped, not failed.
pub fn evaluate_search(
    queries: &mut [(Vec<GalleryCandidate>, Vec<(usize, BoxCxcywh)>)],
    iou_thresh: f64,
    gallery_size: usize,
) -> SearchResult {
    let mut per_query_ap = Vec::with_capacity(queries.len());
    let mut top1_hits = 0usize;
    let mut skipped = 0usize;
    for (candidates, gts) in queries.iter_mut() {
        if gts.is_empty() {
            skipped += 1;
            continue;
        }
        let (ap, hit) = score_ranking(candidates, gts, iou_thresh);
        per_query_ap.push(ap);
        if hit {
            top1_hits += 1;
        }
    }
    let n = per_query_ap.len();
    SearchResult {
        map: if n > 0 { per_query_ap.iter().sum::<f64>() / n as f64 } else { 0.0 },
        top1: if n > 0 { top1_hits as f64 / n as f64 } else { 0.0 },
        per_query_ap,
        gallery_size,
        skipped,
    }
}

/// Single-class detection AP at one IoU threshold: predictions pooled
/// over scenes, sorted by score, matched greedily to unclaimed ground
/// truth in their own scene.
pub fn evaluate_detection(
    scenes: &[(Vec<(f64, BoxCxcywh)>, Vec<BoxCxcywh>)],
    iou_thresh: f64,
) -> f64 {
    let mut pool: Vec<(usize, usize, f64, BoxCxcywh)> = Vec::new();
    for (si, (preds, _)) in scenes.iter().enumerate() {
        for (pi, (score, bbox)) in preds.iter().enumerate() {
            pool.push((si, pi, *score, *bbox));
        }
    }
    pool.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .expect("finite score")
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let n_gt: usize = scenes.iter().map(|(_, gts)| gts.len()).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut claimed: Vec<Vec<bool>> =
        scenes.iter().map(|(_, gts)| vec![false; gts.len()]).collect();
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (k, (si, _, _, bbox)) in pool.iter().enumerate() {
        let gts = &scenes[*si].1;
        let mut best: Option<(usize, f64)> = None;
        for (gi, gbox) in gts.iter().enumerate() {
            if claimed[*si][gi] {
                continue;
            }
            let iou = box_iou(bbox, gbox);
            if iou >= iou_thresh && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            claimed[*si][gi] = true;
            tp += 1;
            ap += tp as f64 / (k + 1) as f64;
        }
    }
    ap / n_gt as f64
}

/// The gallery scenes query `q` searches at a given gallery size: its one
/// true-match scene plus the following scenes in ring order, skipping any
/// that contain the queried identity.
pub fn gallery_members(dataset: &Dataset, q: &Query, size: usize) -> Result<Vec<usize>> {
    let total = dataset.gallery.len();
    if size == 0 || size > total {
        return Err(Error::Config(format!(
            "gallery size {size} not achievable with {total} gallery scenes"
        )));
    }
    let mut members = vec![q.true_gallery];
    let mut g = (q.true_gallery + 1) % total;
    while members.len() < size {
        if g == q.true_gallery {
            return Err(Error::Config(format!(
                "gallery size {size} not achievable for query {}: ran out of scenes",
                q.identity
            )));
        }
        let contains_identity = dataset.gallery[g]
            .persons
            .iter()
            .any(|p| p.id == Some(q.identity));
        if !contains_identity {
            members.push(g);
        }
        g = (g + 1) % total;
    }
    Ok(members)
}

/// Full search protocol at one gallery size, given per-scene predictions
/// for the query and gallery splits (aligned by index).
pub fn search_at_size(
    dataset: &Dataset,
    query_preds: &[Vec<Prediction>],
    gallery_preds: &[Vec<Prediction>],
    size: usize,
    cfg: &EvalConfig,
) -> Result<SearchResult> {
    Ok(search_rankings_at_size(dataset, query_preds, gallery_preds, size, cfg)?.0)
}

/// Like [`search_at_size`] but also returns every query's scored ranking,
/// in query order, for report artifacts.
pub fn search_rankings_at_size(
    dataset: &Dataset,
    query_preds: &[Vec<Prediction>],
    gallery_preds: &[Vec<Prediction>],
    size: usize,
    cfg: &EvalConfig,
) -> Result<(SearchResult, Vec<Vec<GalleryCandidate>>)> {
    if query_preds.len() != dataset.query_scenes.len()
        || gallery_preds.len() != dataset.gallery.len()
    {
        return Err(Error::invalid(
            "search_at_size",
            "prediction lists must align with the dataset splits",
        ));
    }
    let mut per_query = Vec::with_capacity(dataset.queries.len());
    for q in &dataset.queries {
        let (chosen, _fallback) = select_query_feature(&query_preds[q.scene], &q.bbox)?;
        let members = gallery_members(dataset, q, size)?;
        let gallery: Vec<(usize, &[Prediction])> = members
            .iter()
            .map(|&g| (g, gallery_preds[g].as_slice()))
            .collect();
        let candidates = rank_gallery(&chosen.feature, &gallery, cfg);
        let gts: Vec<(usize, BoxCxcywh)> = members
            .iter()
            .flat_map(|&g| {
                dataset.gallery[g]
                    .persons
                    .iter()
                    .filter(|p| p.id == Some(q.identity))
                    .map(move |p| (g, p.bbox))
            })
            .collect();
        per_query.push((candidates, gts));
    }
    let result = evaluate_search(&mut per_query, cfg.iou_thresh, size);
    Ok((result, per_query.into_iter().map(|(c, _)| c).collect()))
}

/// The sweep: one result per requested gallery size.
pub fn gallery_size_sweep(
    dataset: &Dataset,
    query_preds: &[Vec<Prediction>],
    gallery_preds: &[Vec<Prediction>],
    sizes: &[usize],
    cfg: &EvalConfig,
) -> Result<Vec<SearchResult>> {
    sizes
        .iter()
        .map(|&s| search_at_size(dataset, query_preds, gallery_preds, s, cfg))
        .collect()
}
