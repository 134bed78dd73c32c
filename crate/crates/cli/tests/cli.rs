//! End-to-end command tests. Each one drives the compiled binary on a
//! miniature dataset so the whole pipeline stays under a few seconds.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_person-search");

fn config_text(steps: usize, train_extra: &str) -> String {
    format!(
        r#"seed = 7

[model]
d_model = 16
n_heads = 2
n_points = 2
n_queries = 5
n_encoders = 1
n_decoders = 2
d_ffn = 32
strides = [4, 8, 16]
variant = "shared"
scales = [2]
d_reid = 16
input_source = "encoder1"

[data]
seed = 41
image_size = 48
base_glyph = [8, 16]
labeled = 3
unlabeled = 2
train_scenes = 8
gallery_scenes = 5

[train]
steps = {steps}
checkpoint_every = 0
{train_extra}

[eval]
gallery_sizes = [3, 5]
"#
    )
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary should launch")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed.\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gendata_into(dir: &Path, config: &Path) -> PathBuf {
    let data = dir.join("data");
    run_ok(&["gendata", "--config", path_str(config), "--out", path_str(&data)]);
    data
}

/// Name-sorted (filename, bytes) listing of a flat directory.
fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    entries
}

#[test]
fn gendata_writes_a_complete_dataset_directory() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), "run.toml", &config_text(2, ""));
    let data = gendata_into(tmp.path(), &config);
    for name in [
        "manifest.txt",
        "train_images.bin",
        "train_annotations.txt",
        "query_images.bin",
        "query_annotations.txt",
        "gallery_images.bin",
        "gallery_annotations.txt",
        "queries.txt",
        "config.toml",
        "version.txt",
    ] {
        assert!(data.join(name).exists(), "missing {name}");
    }
    let version = fs::read_to_string(data.join("version.txt")).unwrap();
    assert!(!version.trim().is_empty());
}

#[test]
fn gendata_is_deterministic_for_a_fixed_seed() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), "run.toml", &config_text(2, ""));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_ok(&["gendata", "--config", path_str(&config), "--out", path_str(&a)]);
    run_ok(&["gendata", "--config", path_str(&config), "--out", path_str(&b)]);
    assert_eq!(dir_contents(&a), dir_contents(&b));
}

#[test]
fn invalid_config_exits_with_code_two() {
    let tmp = TempDir::new().unwrap();
    let bad = config_text(2, "").replace("labeled = 3", "labeled = 0");
    let config = write_config(tmp.path(), "bad.toml", &bad);
    let out = run(&[
        "gendata",
        "--config",
        path_str(&config),
        "--out",
        path_str(&tmp.path().join("data")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error:"), "stderr was: {stderr}");
}

fn train_into(dir: &Path, name: &str, config: &Path, data: &Path) -> PathBuf {
    let out = dir.join(name);
    run_ok(&[
        "train",
        "--config",
        path_str(config),
        "--data",
        path_str(data),
        "--out",
        path_str(&out),
    ]);
    out
}

fn metrics_rows(run_dir: &Path) -> Vec<Vec<f64>> {
    let text = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,L_cls,L_iou,L_l1,L_oim,total"));
    lines
        .map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect())
        .collect()
}

#[test]
fn train_writes_metrics_checkpoints_and_provenance() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(
        tmp.path(),
        "run.toml",
        &config_text(2, "").replace("checkpoint_every = 0", "checkpoint_every = 1"),
    );
    let data = gendata_into(tmp.path(), &config);
    let run_dir = train_into(tmp.path(), "train", &config, &data);

    for name in ["checkpoint.ckpt", "checkpoint-000001.ckpt", "checkpoint-000002.ckpt", "config.toml", "version.txt"] {
        assert!(run_dir.join(name).exists(), "missing {name}");
    }
    let rows = metrics_rows(&run_dir);
    assert_eq!(rows.len(), 2);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0], (i + 1) as f64);
        assert!(row.iter().all(|v| v.is_finite()), "non-finite metrics row {row:?}");
    }
}

#[test]
fn training_twice_with_one_seed_is_identical() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), "run.toml", &config_text(2, ""));
    let data = gendata_into(tmp.path(), &config);
    let a = train_into(tmp.path(), "a", &config, &data);
    let b = train_into(tmp.path(), "b", &config, &data);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(
        fs::read(a.join("checkpoint.ckpt")).unwrap(),
        fs::read(b.join("checkpoint.ckpt")).unwrap()
    );
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let cfg4 = write_config(tmp.path(), "steps4.toml", &config_text(4, ""));
    let cfg2 = write_config(tmp.path(), "steps2.toml", &config_text(2, ""));
    let data = gendata_into(tmp.path(), &cfg4);

    let full = train_into(tmp.path(), "full", &cfg4, &data);
    let split = train_into(tmp.path(), "split", &cfg2, &data);
    run_ok(&[
        "train",
        "--config",
        path_str(&cfg4),
        "--data",
        path_str(&data),
        "--out",
        path_str(&split),
        "--checkpoint",
        path_str(&split.join("checkpoint.ckpt")),
    ]);

    assert_eq!(
        fs::read(full.join("metrics.csv")).unwrap(),
        fs::read(split.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(full.join("checkpoint.ckpt")).unwrap(),
        fs::read(split.join("checkpoint.ckpt")).unwrap()
    );
}

#[test]
fn identity_loss_weight_zero_is_reported_but_not_totaled() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), "run.toml", &config_text(1, "lambda4 = 0.0"));
    let data = gendata_into(tmp.path(), &config);
    let run_dir = train_into(tmp.path(), "train", &config, &data);
    let rows = metrics_rows(&run_dir);
    let row = &rows[0];
    let (cls, iou, l1, oim, total) = (row[1], row[2], row[3], row[4], row[5]);
    assert!(oim > 0.0, "identity term should still be reported, got {oim}");
    let expected = 2.0 * cls + 5.0 * iou + 2.0 * l1;
    assert!(
        (total - expected).abs() <= 1e-9,
        "total {total} should exclude the identity term (expected {expected})"
    );
}

fn eval_into(dir: &Path, name: &str, config: &Path, data: &Path, ckpt: &Path) -> PathBuf {
    let out = dir.join(name);
    run_ok(&[
        "eval",
        "--config",
        path_str(config),
        "--data",
        path_str(data),
        "--out",
        path_str(&out),
        "--checkpoint",
        path_str(ckpt),
    ]);
    out
}

#[test]
fn eval_reports_are_complete_and_deterministic() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), "run.toml", &config_text(2, ""));
    let data = gendata_into(tmp.path(), &config);
    let run_dir = train_into(tmp.path(), "train", &config, &data);
    let ckpt = run_dir.join("checkpoint.ckpt");

    let a = eval_into(tmp.path(), "eval-a", &config, &data, &ckpt);
    let b = eval_into(tmp.path(), "eval-b", &config, &data, &ckpt);
    assert_eq!(dir_contents(&a), dir_contents(&b));

    let summary = fs::read_to_string(a.join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(lines.next(), Some("gallery_size,mAP,top1"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    for (row, size) in rows.iter().zip([3usize, 5]) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[0].parse::<usize>().unwrap(), size);
        for v in &cols[1..] {
            let v: f64 = v.parse().unwrap();
            assert!((0.0..=1.0).contains(&v), "metric out of range: {v}");
        }
        let rankings = fs::read_to_string(a.join(format!("rankings-g{size}.csv"))).unwrap();
        assert!(rankings.starts_with("query_id,rank,scene,similarity,correct\n"));
        assert!(rankings.lines().count() > 1, "rankings for size {size} are empty");
    }

    let detection = fs::read_to_string(a.join("detection.csv")).unwrap();
    assert!(detection.starts_with("iou_thresh,ap\n"));
    assert!(a.join("config.toml").exists() && a.join("version.txt").exists());
}

#[test]
fn eval_variant_mismatch_names_both_variants() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), "run.toml", &config_text(1, ""));
    let data = gendata_into(tmp.path(), &config);
    let run_dir = train_into(tmp.path(), "train", &config, &data);

    let out = run(&[
        "eval",
        "--config",
        path_str(&config),
        "--data",
        path_str(&data),
        "--out",
        path_str(&tmp.path().join("eval")),
        "--checkpoint",
        path_str(&run_dir.join("checkpoint.ckpt")),
        "--variant",
        "parallel",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("shared") && stderr.contains("parallel"),
        "mismatch message should name both variants: {stderr}"
    );
}

#[test]
fn gradient_check_command_prints_a_full_report() {
    let out = run_ok(&["gradcheck", "--cases", "1"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    for family in ["softmax", "deformable_attention", "oim_loss", "total_loss"] {
        assert!(stdout.contains(family), "report missing {family}:\n{stdout}");
    }
    assert!(!stdout.contains("FAIL"), "report shows failures:\n{stdout}");
}
