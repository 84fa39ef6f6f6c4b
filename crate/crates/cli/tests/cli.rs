use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cbam_swin::data::io::save_pixels;
use cbam_swin::data::save_coco;
use cbam_swin::train::{generate_synthetic, SyntheticSpec, Task, TrainConfig};
use tempfile::TempDir;

fn cli(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbam-swin"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn read(path: impl AsRef<Path>) -> String {
    let path = path.as_ref();
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn small_spec() -> SyntheticSpec {
    SyntheticSpec { num_images: 24, ..SyntheticSpec::default() }
}

fn write_config(dir: &Path, task: Task, iterations: usize) -> PathBuf {
    let mut cfg = TrainConfig::nano_synthetic();
    cfg.task = task;
    cfg.iterations = Some(iterations);
    cfg.batch_size = 4;
    cfg.dataset = cbam_swin::train::DatasetSource::Synthetic(small_spec());
    let path = dir.join(format!("{task:?}_{iterations}.json"));
    std::fs::write(&path, cfg.to_json_string()).unwrap();
    path
}

/// Synthetic COCO file plus PGM images in `dir/images`.
fn write_coco(dir: &Path) -> PathBuf {
    let ds = generate_synthetic(&small_spec()).unwrap();
    let ann = dir.join("images").join("annotations.json");
    save_pixels(&ds, dir.join("images")).unwrap();
    save_coco(&ds, &ann).unwrap();
    ann
}

#[test]
fn help_and_usage_errors() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&cli(tmp.path(), &["--help"])), 0);
    assert_eq!(code(&cli(tmp.path(), &["frobnicate"])), 1);
    assert_eq!(code(&cli(tmp.path(), &["train"])), 1);
    assert_eq!(code(&cli(tmp.path(), &["ablate", "--config", "x.json"])), 1);
}

#[test]
fn missing_or_invalid_inputs_are_validation_errors() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    assert_eq!(code(&cli(&out, &["stats", "/definitely/not/here.json"])), 1);
    assert_eq!(code(&cli(&out, &["train", "--config", "/definitely/not/here.json"])), 1);

    let mut cfg = TrainConfig::nano_synthetic();
    cfg.lr = -1.0;
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, cfg.to_json_string()).unwrap();
    assert_eq!(code(&cli(&out, &["train", "--config", bad.to_str().unwrap()])), 1);

    let garbage = tmp.path().join("garbage.json");
    std::fs::write(&garbage, "{ not json").unwrap();
    assert_eq!(code(&cli(&out, &["stats", garbage.to_str().unwrap()])), 1);
}

#[test]
fn stats_and_preprocess() {
    let tmp = TempDir::new().unwrap();
    let ann = write_coco(tmp.path());
    let out = tmp.path().join("out");

    let o = cli(&out, &["stats", ann.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(out.join("stats.csv"));
    assert_eq!(String::from_utf8_lossy(&o.stdout), csv);
    assert!(csv.lines().count() > 1);

    let plan = tmp.path().join("plan.json");
    std::fs::write(&plan, r#"{"train": {"scratch-line": 12, "dark-blob": 12}}"#).unwrap();
    let o = cli(
        &out,
        &["preprocess", ann.to_str().unwrap(), "--enhance", "cet", "--augment-plan", plan.to_str().unwrap(), "--seed", "3"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["train.json", "val.json", "augment_plan.json", "stats.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let plan: serde_json::Value = serde_json::from_str(&read(out.join("augment_plan.json"))).unwrap();
    assert_eq!(plan["seed"], 3);
    for cat in ["scratch-line", "dark-blob"] {
        assert!(plan["planned"][cat].as_u64().unwrap() >= 12, "{cat}");
    }
    let train = cbam_swin::data::load_coco(out.join("train.json")).unwrap();
    for img in &train.images {
        assert!(out.join("images").join(&img.file_name).exists(), "{}", img.file_name);
    }

    let o = cli(&out, &["preprocess", ann.to_str().unwrap(), "--enhance", "nope"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn train_is_deterministic_and_eval_reads_its_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), Task::Localization, 6);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = cli(out, &["train", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let curve = read(a.join("loss_curve.csv"));
    assert_eq!(curve, read(b.join("loss_curve.csv")));
    assert_eq!(curve.lines().count(), 7);
    for f in ["config.json", "timing.csv", "checkpoint.ckpt", "summary.json", "metrics.json", "metrics.csv", "size_ordered.csv"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let summary: serde_json::Value = serde_json::from_str(&read(a.join("summary.json"))).unwrap();
    assert_eq!(summary["iterations"], 6);

    let ckpt = a.join("checkpoint.ckpt");
    let e = tmp.path().join("eval");
    let o = cli(&e, &["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(e.join("metrics.json")), read(a.join("metrics.json")));

    let dets = e.join("detections.json");
    let e2 = tmp.path().join("eval2");
    let o = cli(&e2, &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--dets", dets.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(e2.join("metrics.json")), read(e.join("metrics.json")));
}

#[test]
fn resume_extends_the_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), Task::Classification, 4);
    let a = tmp.path().join("a");
    assert_eq!(code(&cli(&a, &["train", "--config", cfg.to_str().unwrap()])), 0);
    let ckpt = a.join("checkpoint.ckpt");
    let b = tmp.path().join("b");
    let o = cli(&b, &["train", "--resume", ckpt.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(b.join("loss_curve.csv").exists());
    assert_eq!(code(&cli(&b, &["train", "--config", cfg.to_str().unwrap(), "--resume", ckpt.to_str().unwrap()])), 1);
}

#[test]
fn gradcheck_passes_and_reports() {
    let tmp = TempDir::new().unwrap();
    let o = cli(tmp.path(), &["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");
    assert!(stdout.contains("swin_block_pair"));
    let csv = read(tmp.path().join("gradcheck.csv"));
    assert_eq!(csv.lines().count(), stdout.lines().count() + 1);

    assert_eq!(code(&cli(tmp.path(), &["gradcheck", "--eps", "0"])), 1);
    assert_eq!(code(&cli(tmp.path(), &["gradcheck", "--tol", "1e-30"])), 2);
}

#[test]
fn ablate_and_bench() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), Task::Localization, 4);
    let out = tmp.path().join("abl");
    let o = cli(&out, &["ablate", "--config", cfg.to_str().unwrap(), "--seeds", "1,2", "--variants", "none,blocklevel"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(out.join("ablation.csv"));
    assert!(csv.starts_with("variant,map50,map75,mar100,iter_time_mean,iter_time_std"));
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(read(out.join("ablation_runs.csv")).lines().count(), 5);
    assert!(out.join("size_ordered.csv").exists());

    let cfg = write_config(tmp.path(), Task::Classification, 4);
    let out = tmp.path().join("bench");
    let o = cli(&out, &["bench", "--config", cfg.to_str().unwrap(), "--iters", "6", "--placements", "none,blocklevel"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(out.join("bench.csv")).lines().count(), 3);
    assert!(out.join("timing.csv").exists());
    assert_eq!(code(&cli(&out, &["bench", "--config", cfg.to_str().unwrap(), "--iters", "2"])), 1);
}
