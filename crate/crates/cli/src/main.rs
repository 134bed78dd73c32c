//! Operator surface: dataset generation, training, evaluation, and the
//! gradient-check suite. Every command is deterministic given (config,
//! seed, checkpoint), and every output directory carries the effective
//! config plus a code-version tag.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use person_search::checkpoint::{restore_model, Checkpoint};
use person_search::checks;
use person_search::config::RunConfig;
use person_search::data::{generate_dataset, load_dataset, save_dataset};
use person_search::error::{Error, Result};
use person_search::eval::{evaluate_detection, search_rankings_at_size};
use person_search::model::{Prediction, SearchModel};
use person_search::rng::Rng;
use person_search::train::{run_training, TrainState};

#[derive(Parser)]
#[command(name = "person-search", version, about = "One-step transformer person search")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory.
    Gendata(GendataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint: query-gallery search and detection AP.
    Eval(EvalArgs),
    /// Run the finite-difference gradient-check suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GendataArgs {
    /// TOML run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the [data] seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the top-level training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory from `gendata`.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for metrics and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Re-id decoder structure: single, parallel, or shared.
    #[arg(long)]
    variant: Option<String>,
    /// Re-id scale indices, e.g. "0,1,2".
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<usize>>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory from `gendata`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the CSV reports.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Expected variant; must agree with the checkpoint.
    #[arg(long)]
    variant: Option<String>,
    /// Gallery sizes to sweep, e.g. "10,25,50".
    #[arg(long, value_delimiter = ',')]
    gallery_sizes: Option<Vec<usize>>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Random instances per operation family.
    #[arg(long, default_value_t = 20)]
    cases: usize,
    /// Optional directory for the written report.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = match cli.cmd {
        Cmd::Gendata(a) => cmd_gendata(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    };
    match run {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

/// Every output directory records what produced it.
fn write_provenance(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let text = cfg.to_text()?;
    write_file(&dir.join("config.toml"), &text)?;
    write_file(&dir.join("version.txt"), concat!(env!("CARGO_PKG_VERSION"), "\n"))
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::io(path.display().to_string(), e))
}

fn make_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn cmd_gendata(args: GendataArgs) -> Result<ExitCode> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.data.seed = seed;
    }
    let data_cfg = cfg.data_config()?;
    let dataset = generate_dataset(&data_cfg)?;
    make_dir(&args.out)?;
    save_dataset(&dataset, &args.out)?;
    write_provenance(&args.out, &cfg)?;
    println!(
        "wrote {} train scenes, {} query scenes, {} gallery scenes, {} queries to {}",
        dataset.train.len(),
        dataset.query_scenes.len(),
        dataset.gallery.len(),
        dataset.queries.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Errors when the checkpoint was trained with a different re-id variant
/// than the one now requested.
fn check_variant(ckpt: &Checkpoint, wanted: &str) -> Result<()> {
    let stored = RunConfig::from_text(&ckpt.config_text)
        .map(|c| c.model.variant)
        .map_err(|_| Error::Config("checkpoint carries no readable config".into()))?;
    if stored != wanted {
        return Err(Error::Config(format!(
            "checkpoint was trained with variant '{stored}' but '{wanted}' was requested"
        )));
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(v) = &args.variant {
        cfg.model.variant = v.clone();
    }
    if let Some(s) = &args.scales {
        cfg.model.scales = s.clone();
    }
    let model_cfg = cfg.model_config()?;
    let train_cfg = cfg.train_config()?;
    let dataset = load_dataset(&args.data)?;
    let cfg_text = cfg.to_text()?;

    let mut state = match &args.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            check_variant(&ckpt, &cfg.model.variant)?;
            TrainState::from_checkpoint(&model_cfg, &train_cfg, &ckpt)?
        }
        None => TrainState::init(&model_cfg, &train_cfg, dataset.config.labeled, cfg.seed)?,
    };

    make_dir(&args.out)?;
    write_provenance(&args.out, &cfg)?;
    let metrics_path = args.out.join("metrics.csv");
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;

    let out_dir = args.out.clone();
    let text_for_snapshots = cfg_text.clone();
    let result = run_training(
        &mut state,
        &dataset.train,
        &train_cfg,
        &mut metrics,
        cfg.train.checkpoint_every,
        |s| {
            let step = s.step_count();
            let path = out_dir.join(format!("checkpoint-{step:06}.ckpt"));
            s.snapshot(&text_for_snapshots).save(&path)
        },
    );
    // The final snapshot is written even after an aborted run so the last
    // good parameters stay inspectable; the abort error still propagates.
    let final_path = args.out.join("checkpoint.ckpt");
    state.snapshot(&cfg_text).save(&final_path)?;
    result?;
    println!(
        "trained to step {} ({} scenes), checkpoint at {}",
        state.step_count(),
        dataset.train.len(),
        final_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn predictions_for(model: &SearchModel, scenes: &[person_search::data::Scene]) -> Result<Vec<Vec<Prediction>>> {
    scenes.iter().map(|s| model.predictions(&s.image_tensor()?)).collect()
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let mut cfg = load_config(&args.config)?;
    if let Some(sizes) = &args.gallery_sizes {
        cfg.eval.gallery_sizes = sizes.clone();
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    if let Some(v) = &args.variant {
        check_variant(&ckpt, v)?;
        cfg.model.variant = v.clone();
    } else if let Ok(stored) = RunConfig::from_text(&ckpt.config_text) {
        // No explicit variant: evaluate with the one the checkpoint records.
        cfg.model.variant = stored.model.variant;
        cfg.model.scales = stored.model.scales;
    }
    let model_cfg = cfg.model_config()?;
    let eval_cfg = cfg.eval_config()?;
    let mut model = SearchModel::init(&model_cfg, &mut Rng::new(0))?;
    restore_model(&mut model, &ckpt)?;
    let dataset = load_dataset(&args.data)?;

    let query_preds = predictions_for(&model, &dataset.query_scenes)?;
    let gallery_preds = predictions_for(&model, &dataset.gallery)?;

    make_dir(&args.out)?;
    write_provenance(&args.out, &cfg)?;

    let mut summary = String::from("gallery_size,mAP,top1\n");
    for &size in &cfg.eval.gallery_sizes {
        let (result, rankings) =
            search_rankings_at_size(&dataset, &query_preds, &gallery_preds, size, &eval_cfg)?;
        let mut rows = String::from("query_id,rank,scene,similarity,correct\n");
        for (qi, candidates) in rankings.iter().enumerate() {
            for (rank, c) in candidates.iter().enumerate() {
                rows.push_str(&format!(
                    "{qi},{},{},{},{}\n",
                    rank + 1,
                    c.scene,
                    c.similarity,
                    c.correct
                ));
            }
        }
        write_file(&args.out.join(format!("rankings-g{size}.csv")), &rows)?;
        summary.push_str(&format!("{size},{},{}\n", result.map, result.top1));
        println!(
            "gallery {size}: mAP {:.4} top-1 {:.4} ({} queries, {} skipped)",
            result.map,
            result.top1,
            result.per_query_ap.len(),
            result.skipped
        );
    }
    write_file(&args.out.join("summary.csv"), &summary)?;

    let det_cases: Vec<(Vec<(f64, person_search::boxes::BoxCxcywh)>, Vec<person_search::boxes::BoxCxcywh>)> =
        dataset
            .gallery
            .iter()
            .zip(&gallery_preds)
            .map(|(scene, preds)| {
                let kept = preds
                    .iter()
                    .filter(|p| p.score >= eval_cfg.score_thresh)
                    .map(|p| (p.score, p.bbox))
                    .collect();
                let gts = scene.persons.iter().map(|p| p.bbox).collect();
                (kept, gts)
            })
            .collect();
    let det_ap = evaluate_detection(&det_cases, eval_cfg.iou_thresh);
    write_file(
        &args.out.join("detection.csv"),
        &format!("iou_thresh,ap\n{},{}\n", eval_cfg.iou_thresh, det_ap),
    )?;
    println!("detection AP@{:.2}: {det_ap:.4}", eval_cfg.iou_thresh);
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let outcomes = checks::run_all(args.seed.unwrap_or(0), args.cases)?;
    let report = checks::format_report(&outcomes);
    print!("{report}");
    if let Some(dir) = &args.out {
        make_dir(dir)?;
        write_provenance(dir, &RunConfig::default())?;
        write_file(&dir.join("gradcheck.txt"), &report)?;
    }
    if outcomes.iter().all(|o| o.passed()) {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient checks failed");
        Ok(ExitCode::from(1))
    }
}
