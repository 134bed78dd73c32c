// Measures the end-to-end toy gate: train with defaults, then report
// held-out detection AP@0.5 and search top-1 at gallery size 25.
use person_search::boxes::BoxCxcywh;
use person_search::config::RunConfig;
use person_search::data::generate_dataset;
use person_search::eval::{evaluate_detection, search_at_size};
use person_search::model::Prediction;
use person_search::train::{run_training, TrainState};
use std::time::Instant;

fn main() {
    let seeds: Vec<u64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("seed"))
        .collect();
    let seeds = if seeds.is_empty() { vec![1, 2, 3] } else { seeds };
    let cfg = RunConfig::default();
    let model_cfg = cfg.model_config().unwrap();
    let mut train_cfg = cfg.train_config().unwrap();
    let eval_cfg = cfg.eval_config().unwrap();
    if let Ok(v) = std::env::var("GATE_STEPS") {
        train_cfg.steps = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("GATE_BETA1") {
        train_cfg.beta1 = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("GATE_LR") {
        train_cfg.lr = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("GATE_MILESTONES") {
        train_cfg.lr_milestones = v.split(',').filter(|s| !s.is_empty()).map(|s| s.parse().unwrap()).collect();
    }
    if let Ok(v) = std::env::var("GATE_BATCH") {
        train_cfg.batch_size = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("GATE_L4") {
        train_cfg.loss.weights.lambda4 = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("GATE_GAMMA") {
        train_cfg.loss.cls_focal_gamma = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("GATE_ALPHA") {
        train_cfg.loss.cls_focal_alpha = v.parse().unwrap();
    }
    eprintln!("steps {} lr {} beta1 {} milestones {:?} batch {}", train_cfg.steps, train_cfg.lr, train_cfg.beta1, train_cfg.lr_milestones, train_cfg.batch_size);

    let (mut sum_ap, mut sum_top1) = (0.0, 0.0);
    for &seed in &seeds {
        let t0 = Instant::now();
        let mut data_cfg = cfg.data_config().unwrap();
        data_cfg.seed = seed;
        let mut dataset = generate_dataset(&data_cfg).unwrap();
        if let Ok(v) = std::env::var("GATE_SUBSET") {
            dataset.train.truncate(v.parse().unwrap());
        }
        let mut state = TrainState::init(&model_cfg, &train_cfg, data_cfg.labeled, seed).unwrap();
        let mut sink = Vec::new();
        let watch_assign = std::env::var("GATE_ASSIGN").is_ok();
        let every = if watch_assign { 25 } else { 0 };
        let probe_scene = dataset.train[0].clone();
        let loss_cfg = train_cfg.loss.clone();
        run_training(&mut state, &dataset.train, &train_cfg, &mut sink, every, |st| {
            if watch_assign {
                let (det, reid) = st.model.forward_train(&probe_scene.image_tensor()?)?;
                let targets = probe_scene.targets();
                let out = person_search::loss::total_loss(
                    &det.levels,
                    &reid,
                    st.model.reid.config().scales.as_slice(),
                    &targets,
                    &st.banks,
                    &loss_cfg,
                )?;
                let maps: Vec<Vec<usize>> =
                    out.assignments.iter().map(|a| a.target_to_query.clone()).collect();
                let scores: Vec<String> = det
                    .levels
                    .last()
                    .unwrap()
                    .scores()
                    .iter()
                    .map(|v| format!("{v:.2}"))
                    .collect();
                eprintln!("assign per level {maps:?} last-level scores {scores:?}");
            }
            Ok(())
        })
        .unwrap();
        if std::env::var("GATE_FEATSPREAD").is_ok() {
            // Row spread of the decoder features at each level: collapsed
            // queries show up as near-zero standard deviation per column.
            let img = dataset.train[0].image_tensor().unwrap();
            let out = state.model.detector.forward(&img).unwrap();
            let spatial_std = |map: &person_search::tensor::Tensor, name: &str| {
                let sh = map.shape();
                let (c, hw) = (sh[0], sh[1] * sh[2]);
                let vals = map.values();
                let mut mean_std = 0.0;
                for ch in 0..c {
                    let col: Vec<f64> = (0..hw).map(|i| vals[ch * hw + i]).collect();
                    let m = col.iter().sum::<f64>() / hw as f64;
                    let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / hw as f64;
                    mean_std += var.sqrt();
                }
                println!("{name}: mean spatial std {:.4}", mean_std / c as f64);
            };
            spatial_std(&out.features.p4, "backbone p4");
            for (ei, m) in out.encoder_maps.iter().enumerate() {
                spatial_std(m, &format!("encoder map {ei}"));
            }
            for (li, level) in out.levels.iter().enumerate() {
                let vals = level.features.values();
                let sh = level.features.shape();
                let (n, d) = (sh[0], sh[1]);
                let mut mean_std = 0.0;
                for c in 0..d {
                    let col: Vec<f64> = (0..n).map(|r| vals[r * d + c]).collect();
                    let m = col.iter().sum::<f64>() / n as f64;
                    let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
                    mean_std += var.sqrt();
                }
                let logits: Vec<String> =
                    level.cls_logits.values().iter().map(|v| format!("{v:.2}")).collect();
                println!(
                    "level {li}: mean column std {:.4}  logits {:?}",
                    mean_std / d as f64,
                    logits
                );
            }
        }
        if std::env::var("GATE_SUBSET").is_ok() {
            // Overfit check: score detection on the very scenes trained on.
            use person_search::boxes::box_iou;
            for (si, scene) in dataset.train.iter().take(4).enumerate() {
                let preds = state.model.predictions(&scene.image_tensor().unwrap()).unwrap();
                let mut ranked: Vec<_> = preds.iter().collect();
                ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
                let gt_hits: Vec<f64> = scene
                    .persons
                    .iter()
                    .map(|p| preds.iter().map(|pr| box_iou(&pr.bbox, &p.bbox)).fold(0.0, f64::max))
                    .collect();
                let top: Vec<String> = ranked
                    .iter()
                    .take(scene.persons.len() + 1)
                    .map(|p| format!("{:.2}", p.score))
                    .collect();
                println!("train scene {si}: best-iou per gt {gt_hits:?} top scores {top:?}");
            }
        }
        let t_train = t0.elapsed();
        if std::env::var("GATE_CURVE").is_ok() {
            let text = String::from_utf8_lossy(&sink);
            let rows: Vec<&str> = text.lines().collect();
            for (i, line) in rows.iter().enumerate() {
                if i == 0 || i % 50 == 0 || i + 3 > rows.len() {
                    eprintln!("{line}");
                }
            }
        }

        let query_preds: Vec<Vec<Prediction>> = dataset
            .query_scenes
            .iter()
            .map(|s| state.model.predictions(&s.image_tensor().unwrap()).unwrap())
            .collect();
        let gallery_preds: Vec<Vec<Prediction>> = dataset
            .gallery
            .iter()
            .map(|s| state.model.predictions(&s.image_tensor().unwrap()).unwrap())
            .collect();

        let det_cases: Vec<(Vec<(f64, BoxCxcywh)>, Vec<BoxCxcywh>)> = dataset
            .gallery
            .iter()
            .zip(&gallery_preds)
            .map(|(scene, preds)| {
                let kept = preds
                    .iter()
                    .filter(|p| p.score >= eval_cfg.score_thresh)
                    .map(|p| (p.score, p.bbox))
                    .collect();
                (kept, scene.persons.iter().map(|p| p.bbox).collect())
            })
            .collect();
        let ap = evaluate_detection(&det_cases, 0.5);
        let det_all: Vec<(Vec<(f64, BoxCxcywh)>, Vec<BoxCxcywh>)> = dataset
            .gallery
            .iter()
            .zip(&gallery_preds)
            .map(|(scene, preds)| {
                (
                    preds.iter().map(|p| (p.score, p.bbox)).collect(),
                    scene.persons.iter().map(|p| p.bbox).collect(),
                )
            })
            .collect();
        let ap_all = evaluate_detection(&det_all, 0.5);
        let search = search_at_size(&dataset, &query_preds, &gallery_preds, 25, &eval_cfg).unwrap();
        println!(
            "seed {seed}: AP@0.5 {:.4} (unfiltered {:.4})  top1@25 {:.4}  mAP@25 {:.4}  (train {:?}, total {:?})",
            ap,
            ap_all,
            search.top1,
            search.map,
            t_train,
            t0.elapsed()
        );
        sum_ap += ap;
        sum_top1 += search.top1;
    }
    println!(
        "mean over {} seeds: AP@0.5 {:.4}  top1@25 {:.4}",
        seeds.len(),
        sum_ap / seeds.len() as f64,
        sum_top1 / seeds.len() as f64
    );
}
