// Profiling harness: time full-scale training steps.
use person_search::config::RunConfig;
use person_search::data::generate_dataset;
use person_search::train::{run_training, TrainState};
use std::time::Instant;

fn main() {
    let cfg = RunConfig::default();
    let model_cfg = cfg.model_config().unwrap();
    let mut train_cfg = cfg.train_config().unwrap();
    train_cfg.steps = 6;
    let mut data_cfg = cfg.data_config().unwrap();
    data_cfg.train_scenes = 12; // enough to draw from
    data_cfg.gallery_scenes = 16;
    let t0 = Instant::now();
    let dataset = generate_dataset(&data_cfg).unwrap();
    eprintln!("gendata: {:?}", t0.elapsed());

    let mut state = TrainState::init(&model_cfg, &train_cfg, data_cfg.labeled, 7).unwrap();
    let mut sink = Vec::new();
    let t1 = Instant::now();
    run_training(&mut state, &dataset.train, &train_cfg, &mut sink, 0, |_| Ok(())).unwrap();
    let dt = t1.elapsed();
    eprintln!("6 steps: {:?}  ({:?}/step)", dt, dt / 6);
    eprintln!("{}", String::from_utf8_lossy(&sink));

    // Also time inference on one scene.
    let t2 = Instant::now();
    let img = dataset.gallery[0].image_tensor().unwrap();
    let preds = state.model.predictions(&img).unwrap();
    eprintln!("inference 1 scene: {:?} ({} preds)", t2.elapsed(), preds.len());
}
