// Trains briefly, then dumps prediction quality: score spread, best-IoU
// per ground-truth box, and duplicate structure on a few held-out scenes.
use person_search::boxes::{box_iou, BoxCxcywh};
use person_search::config::RunConfig;
use person_search::data::generate_dataset;
use person_search::eval::evaluate_detection;
use person_search::train::{run_training, TrainState};

fn main() {
    let steps: usize = std::env::var("DIAG_STEPS").map(|v| v.parse().unwrap()).unwrap_or(600);
    let cfg = RunConfig::default();
    let model_cfg = cfg.model_config().unwrap();
    let mut train_cfg = cfg.train_config().unwrap();
    train_cfg.steps = steps;
    if let Ok(v) = std::env::var("DIAG_MILESTONES") {
        train_cfg.lr_milestones =
            v.split(',').filter(|s| !s.is_empty()).map(|s| s.parse().unwrap()).collect();
    }
    if let Ok(v) = std::env::var("DIAG_LR") {
        train_cfg.lr = v.parse().unwrap();
    }
    let mut data_cfg = cfg.data_config().unwrap();
    data_cfg.seed = 1;
    let dataset = generate_dataset(&data_cfg).unwrap();
    let mut state = TrainState::init(&model_cfg, &train_cfg, data_cfg.labeled, 1).unwrap();
    let mut sink = Vec::new();
    run_training(&mut state, &dataset.train, &train_cfg, &mut sink, 0, |_| Ok(())).unwrap();

    let mut all_scores: Vec<f64> = Vec::new();
    let mut det_cases_all: Vec<(Vec<(f64, BoxCxcywh)>, Vec<BoxCxcywh>)> = Vec::new();
    let mut det_cases_thresh: Vec<(Vec<(f64, BoxCxcywh)>, Vec<BoxCxcywh>)> = Vec::new();
    for scene in &dataset.gallery {
        let preds = state.model.predictions(&scene.image_tensor().unwrap()).unwrap();
        all_scores.extend(preds.iter().map(|p| p.score));
        let gts: Vec<BoxCxcywh> = scene.persons.iter().map(|p| p.bbox).collect();
        det_cases_all.push((preds.iter().map(|p| (p.score, p.bbox)).collect(), gts.clone()));
        det_cases_thresh.push((
            preds.iter().filter(|p| p.score >= 0.3).map(|p| (p.score, p.bbox)).collect(),
            gts,
        ));
    }
    all_scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| all_scores[((all_scores.len() - 1) as f64 * p) as usize];
    println!(
        "scores over {} preds: min {:.4} p25 {:.4} p50 {:.4} p75 {:.4} p95 {:.4} max {:.4}",
        all_scores.len(), q(0.0), q(0.25), q(0.5), q(0.75), q(0.95), q(1.0)
    );
    println!(
        "AP@0.5 no threshold: {:.4}   AP@0.5 at 0.3 threshold: {:.4}",
        evaluate_detection(&det_cases_all, 0.5),
        evaluate_detection(&det_cases_thresh, 0.5)
    );

    for (si, scene) in dataset.gallery.iter().take(3).enumerate() {
        let preds = state.model.predictions(&scene.image_tensor().unwrap()).unwrap();
        let mut ranked: Vec<_> = preds.iter().collect();
        ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        println!("scene {si}: {} persons", scene.persons.len());
        for p in &scene.persons {
            let best = preds.iter().map(|pr| box_iou(&pr.bbox, &p.bbox)).fold(0.0, f64::max);
            println!(
                "  gt ({:.3},{:.3},{:.3},{:.3}) best-iou {:.3}",
                p.bbox.cx, p.bbox.cy, p.bbox.w, p.bbox.h, best
            );
        }
        for pr in ranked.iter().take(5) {
            let best = scene.persons.iter().map(|p| box_iou(&pr.bbox, &p.bbox)).fold(0.0, f64::max);
            println!(
                "  pred score {:.3} ({:.3},{:.3},{:.3},{:.3}) iou {:.3}",
                pr.score, pr.bbox.cx, pr.bbox.cy, pr.bbox.w, pr.bbox.h, best
            );
        }
    }
}
