use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cbam_swin::data::io::{load_pixels, save_pixels};
use cbam_swin::data::{
    category_stats, enhance, load_coco, plan_and_execute, save_coco, split_train_val, stats::write_stats_csv, CategoryStats, Dataset,
    EnhanceMethod, EnhanceParams, SplitTargets,
};
use cbam_swin::gradsuite::gradient_suite;
use cbam_swin::metrics::{
    detections_to_json, evaluate, ground_truth, load_detections, size_ordered_report, MetricsReport, MAX_DETS,
};
use cbam_swin::swin::Placement;
use cbam_swin::train::{
    prepare_samples, run_ablation, write_loss_csv, write_timing_csv, Checkpoint, Model, Task, TrainConfig, Trainer,
    TIMING_WARMUP,
};
use cbam_swin::{Error, ParamStore};
use serde::Serialize;

use crate::{Cli, Command};

/// Failures of the CLI itself on top of library errors.
#[derive(Debug)]
pub enum CliError {
    Core(Error),
    /// A check ran to completion and did not pass.
    Failed(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => e.fmt(f),
            CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_validation() => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Core(Error::Io { path: path.to_path_buf(), source: e })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    write_text(path, &text)
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> cbam_swin::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush().map_err(io_err(path))
}

fn default_image_dir(annotations: &Path) -> PathBuf {
    annotations.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Input paths named on the command line, checked up front so a typo is a
/// usage error rather than a failure halfway through a run.
fn inputs(command: &Command) -> Vec<&Path> {
    fn opt(p: &Option<PathBuf>) -> Option<&Path> {
        p.as_deref()
    }
    match command {
        Command::Stats { coco } => vec![coco.as_path()],
        Command::Preprocess { coco, images, enhance_params, augment_plan, .. } => {
            [Some(coco.as_path()), opt(images), opt(enhance_params), opt(augment_plan)].into_iter().flatten().collect()
        }
        Command::Train { config, resume } => [opt(config), opt(resume)].into_iter().flatten().collect(),
        Command::Eval { checkpoint, dets, dataset, images } => {
            [Some(checkpoint.as_path()), opt(dets), opt(dataset), opt(images)].into_iter().flatten().collect()
        }
        Command::Gradcheck { .. } => Vec::new(),
        Command::Ablate { config, .. } | Command::Bench { config, .. } => vec![config.as_path()],
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(missing) = inputs(&cli.command).into_iter().find(|p| !p.exists()) {
        return Err(Error::InvalidParam(format!("input not found: {}", missing.display())).into());
    }
    let out = cli.out;
    match cli.command {
        Command::Stats { coco } => stats(&out, &coco),
        Command::Preprocess { coco, images, enhance, enhance_params, augment_plan, seed, val_fraction, augment_val } => {
            preprocess(
                &out,
                &coco,
                images,
                enhance,
                enhance_params.as_deref(),
                augment_plan.as_deref(),
                seed,
                val_fraction,
                augment_val,
            )
        }
        Command::Train { config, resume } => train(&out, config.as_deref(), resume.as_deref()),
        Command::Eval { checkpoint, dets, dataset, images } => {
            eval(&out, &checkpoint, dets.as_deref(), dataset.as_deref(), images)
        }
        Command::Gradcheck { seed, eps, tol } => gradcheck(&out, seed, eps, tol),
        Command::Ablate { config, seeds, variants } => {
            ablate(&out, &config, &seeds, variants.as_deref().unwrap_or(&Placement::ALL))
        }
        Command::Bench { config, iters, placements } => bench(&out, &config, iters, placements),
    }
}

fn stats(out: &Path, coco: &Path) -> Result<()> {
    let ds = load_coco(coco)?;
    let stats = category_stats(&ds);
    write_with(&out.join("stats.csv"), |w| write_stats_csv(&stats, w))?;
    write_stats_csv(&stats, std::io::stdout().lock())?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn preprocess(
    out: &Path,
    coco: &Path,
    images: Option<PathBuf>,
    method: Option<EnhanceMethod>,
    params_path: Option<&Path>,
    plan_path: Option<&Path>,
    seed: u64,
    val_fraction: f64,
    augment_val: bool,
) -> Result<()> {
    let mut ds = load_coco(coco)?;
    let with_pixels = images.is_some() || method.is_some();
    if with_pixels {
        let dir = images.unwrap_or_else(|| default_image_dir(coco));
        load_pixels(&mut ds, &dir)?;
    }
    if let Some(method) = method {
        let params: EnhanceParams = match params_path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(io_err(p))?;
                serde_json::from_str(&text).map_err(|e| Error::Parse(format!("enhancement parameters: {e}")))?
            }
            None => EnhanceParams::default(),
        };
        params.validate()?;
        for img in &mut ds.images {
            if let Some(px) = &img.pixels {
                img.pixels = Some(enhance(px, method, &params)?);
            }
        }
        log::info!("enhanced {} images with {}", ds.images.len(), method.name());
    }
    let write_split = |name: &str, split: &Dataset| -> Result<()> {
        save_coco(split, out.join(format!("{name}.json")))?;
        if with_pixels {
            save_pixels(split, out.join("images"))?;
        }
        Ok(())
    };
    match plan_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            let targets = SplitTargets::from_json_str(&text)?;
            let (train, val) = split_train_val(&ds, 1.0 - val_fraction, seed)?;
            let (plan, train) = plan_and_execute(&train, &targets.train, seed)?;
            log::info!("train split: {} synthesized images", plan.records.len());
            write_json(&out.join("augment_plan.json"), &plan)?;
            let val = if augment_val {
                let (vplan, val) = plan_and_execute(&val, &targets.val, seed.wrapping_add(1))?;
                log::info!("val split: {} synthesized images", vplan.records.len());
                write_json(&out.join("val_augment_plan.json"), &vplan)?;
                val
            } else {
                if !targets.val.is_empty() {
                    log::warn!("validation targets ignored; pass --augment-val to apply them");
                }
                val
            };
            write_split("train", &train)?;
            write_split("val", &val)?;
            write_with(&out.join("stats.csv"), |w| write_stats_csv(&category_stats(&train), w))?;
        }
        None => {
            write_split("annotations", &ds)?;
            write_with(&out.join("stats.csv"), |w| write_stats_csv(&category_stats(&ds), w))?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    iterations: usize,
    initial_loss: f64,
    final_loss: f64,
    iter_time_mean: f64,
    iter_time_std: f64,
    timing_warmup: usize,
    cbam_invocations_per_iteration: usize,
    val_accuracy: Option<f64>,
}

fn write_metrics(out: &Path, report: &MetricsReport, stats: &[CategoryStats]) -> Result<()> {
    write_text(&out.join("metrics.json"), &report.to_json_string())?;
    write_with(&out.join("metrics.csv"), |w| report.write_csv(w))?;
    let table = size_ordered_report(report, stats)?;
    write_with(&out.join("size_ordered.csv"), |w| table.write_csv(w))
}

fn train(out: &Path, config: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let mut t = match resume {
        Some(p) => Trainer::resume(&Checkpoint::load(p)?)?,
        None => Trainer::new(&TrainConfig::load(config.expect("clap requires --config without --resume"))?)?,
    };
    write_text(&out.join("config.json"), &t.cfg.to_json_string())?;
    let result = t.run();
    write_with(&out.join("loss_curve.csv"), |w| write_loss_csv(&t.losses, w))?;
    write_with(&out.join("timing.csv"), |w| write_timing_csv(&t.iter_times, TIMING_WARMUP, w))?;
    if let Some(p) = &t.cfg.timing_log_path {
        write_with(p, |w| write_timing_csv(&t.iter_times, TIMING_WARMUP, w))?;
    }
    result?;
    t.checkpoint().save(out.join("checkpoint.ckpt"))?;
    let timing = t.timing();
    let summary = TrainSummary {
        iterations: t.iteration(),
        initial_loss: t.losses.first().copied().unwrap_or(f64::NAN),
        final_loss: t.losses.last().copied().unwrap_or(f64::NAN),
        iter_time_mean: timing.mean,
        iter_time_std: timing.std,
        timing_warmup: timing.warmup,
        cbam_invocations_per_iteration: t.last_cbam_invocations,
        val_accuracy: t.val_accuracy()?,
    };
    write_json(&out.join("summary.json"), &summary)?;
    if let Some(report) = t.evaluate_val()? {
        write_metrics(out, &report, &t.data.stats)?;
    }
    log::info!(
        "{} iterations, loss {:.4} → {:.4}, {:.4} ± {:.4} s/iter",
        summary.iterations,
        summary.initial_loss,
        summary.final_loss,
        summary.iter_time_mean,
        summary.iter_time_std
    );
    Ok(())
}

fn eval(out: &Path, ckpt_path: &Path, dets: Option<&Path>, dataset: Option<&Path>, images: Option<PathBuf>) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let (gt, stats) = match dataset {
        Some(p) => {
            let mut ds = load_coco(p)?;
            if dets.is_none() {
                load_pixels(&mut ds, images.unwrap_or_else(|| default_image_dir(p)))?;
            }
            let stats = category_stats(&ds);
            (ds, stats)
        }
        None => {
            let data = Trainer::resume(&ckpt)?.data;
            (data.val_set, data.stats)
        }
    };
    let detections = match dets {
        Some(p) => load_detections(p)?,
        None => {
            if ckpt.config.task != Task::Localization {
                return Err(Error::InvalidParam(
                    "a classification checkpoint has no detections; pass --dets or use a localization config".into(),
                )
                .into());
            }
            let mut store = ParamStore::new();
            let model = Model::build(&ckpt.config.swin, Task::Localization, ckpt.category_ids.clone(), &mut store)?;
            ckpt.copy_params_into(&mut store)?;
            let mut all = Vec::new();
            for sample in prepare_samples(&gt, ckpt.config.swin.input_size)? {
                all.extend(model.detect(&store, &sample)?);
            }
            write_text(&out.join("detections.json"), &detections_to_json(&all))?;
            all
        }
    };
    let report = evaluate(&detections, &ground_truth(&gt), &gt.categories, MAX_DETS)?;
    write_metrics(out, &report, &stats)?;
    println!("mAP50 {:.4}  mAP75 {:.4}  AR100 {:.4}", report.map50, report.map75, report.mar100);
    Ok(())
}

fn gradcheck(out: &Path, seed: u64, eps: f64, tol: f64) -> Result<()> {
    let entries = gradient_suite(seed, eps, tol)?;
    let mut text = String::from("name,max_rel_err,checked,structural_zeros,max_abs_structural,passed\n");
    for e in &entries {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.name, e.max_rel_err, e.checked, e.structural_zeros, e.max_abs_structural, e.passed
        ));
        println!(
            "{} {:<20} max rel err {:.3e} over {} coordinates (worst {} analytic {:.6e} numeric {:.6e})",
            if e.passed { "PASS" } else { "FAIL" },
            e.name,
            e.max_rel_err,
            e.checked,
            e.worst,
            e.worst_values.0,
            e.worst_values.1
        );
    }
    write_text(&out.join("gradcheck.csv"), &text)?;
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed).map(|e| e.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn ablate(out: &Path, config: &Path, seeds: &[u64], variants: &[Placement]) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let ab = run_ablation(&cfg, variants, seeds)?;
    write_with(&out.join("ablation.csv"), |w| ab.write_summary_csv(w))?;
    write_with(&out.join("ablation_runs.csv"), |w| ab.write_runs_csv(w))?;
    let table = ab.size_ordered()?;
    write_with(&out.join("size_ordered.csv"), |w| table.write_csv(w))?;
    for r in &ab.runs {
        let dir = out.join("runs").join(format!("{}_seed{}", r.variant, r.seed));
        write_with(&dir.join("loss_curve.csv"), |w| write_loss_csv(&r.losses, w))?;
        write_with(&dir.join("timing.csv"), |w| write_timing_csv(&r.iter_times, TIMING_WARMUP, w))?;
        write_text(&dir.join("metrics.json"), &r.report.to_json_string())?;
    }
    write_json(&out.join("metrics.json"), &serde_json::json!({ "summary": ab.summary, "runs": ab.runs }))?;
    for s in &ab.summary {
        println!(
            "{:<10} mAP50 {:.4} mAP75 {:.4} AR100 {:.4} {:.4} ± {:.4} s/iter",
            s.variant, s.map50, s.map75, s.mar100, s.iter_time_mean, s.iter_time_std
        );
    }
    Ok(())
}

fn bench(out: &Path, config: &Path, iters: usize, placements: Option<Vec<Placement>>) -> Result<()> {
    if iters <= TIMING_WARMUP {
        return Err(Error::InvalidParam(format!("--iters must exceed the {TIMING_WARMUP} warmup iterations")).into());
    }
    let base = TrainConfig::load(config)?;
    let ds = base.load_dataset()?;
    let placements = placements.unwrap_or_else(|| vec![base.swin.placement]);
    let mut text = String::from("variant,iterations,warmup,iter_time_mean,iter_time_std\n");
    for p in placements {
        let mut cfg = base.clone();
        cfg.swin.placement = p;
        cfg.iterations = Some(iters);
        let mut t = Trainer::with_dataset(&cfg, &ds)?;
        t.run()?;
        let s = t.timing();
        text.push_str(&format!("{p},{iters},{},{},{}\n", s.warmup, s.mean, s.std));
        write_with(&out.join(format!("timing_{p}.csv")), |w| write_timing_csv(&t.iter_times, TIMING_WARMUP, w))?;
        write_with(&out.join("timing.csv"), |w| write_timing_csv(&t.iter_times, TIMING_WARMUP, w))?;
        println!("{p:<10} {:.5} ± {:.5} s/iter over {} iterations", s.mean, s.std, s.samples);
    }
    write_text(&out.join("bench.csv"), &text)
}
