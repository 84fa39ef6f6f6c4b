//! Trains and evaluates every placement variant on the same data and
//! seeds, and tabulates accuracy and iteration time.

use std::io::Write;

use serde::Serialize;

use super::head::Task;
use super::trainer::{timing_summary, TrainConfig, Trainer, TIMING_WARMUP};
use crate::data::{category_stats, CategoryStats, SizeClass};
use crate::error::{Error, Result};
use crate::metrics::{size_ordered_table, CategoryMetrics, MetricsReport, SizeOrderedTable};
use crate::swin::Placement;

pub const ABLATION_CSV_HEADER: [&str; 6] = ["variant", "map50", "map75", "mar100", "iter_time_mean", "iter_time_std"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRun {
    pub variant: Placement,
    pub seed: u64,
    pub map50: f64,
    pub map75: f64,
    pub mar100: f64,
    pub iter_time_mean: f64,
    pub iter_time_std: f64,
    /// Mean AP50 over small and regular categories.
    pub small_ap50: Option<f64>,
    pub regular_ap50: Option<f64>,
    pub final_loss: f64,
    #[serde(skip)]
    pub losses: Vec<f64>,
    #[serde(skip)]
    pub iter_times: Vec<f64>,
    #[serde(skip)]
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationSummary {
    pub variant: Placement,
    pub map50: f64,
    pub map75: f64,
    pub mar100: f64,
    /// Over the pooled post-warmup iterations of every seed.
    pub iter_time_mean: f64,
    pub iter_time_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ablation {
    pub runs: Vec<AblationRun>,
    pub summary: Vec<AblationSummary>,
    /// Statistics of the full dataset, used for the size breakdown.
    pub stats: Vec<CategoryStats>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn class_mean(report: &MetricsReport, stats: &[CategoryStats], class: SizeClass) -> Option<f64> {
    let vals: Vec<f64> = report
        .per_category
        .iter()
        .filter(|c| stats.iter().any(|s| s.category_id == c.category_id && s.size_class == class))
        .filter_map(|c| c.ap50)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Runs `variants × seeds` trainings. The localization head is used so
/// every run yields detection metrics.
pub fn run_ablation(base: &TrainConfig, variants: &[Placement], seeds: &[u64]) -> Result<Ablation> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::InvalidParam("ablation needs at least one variant and one seed".into()));
    }
    let mut base = base.clone();
    if base.task != Task::Localization {
        log::warn!("ablation switches the task to localization to obtain detection metrics");
        base.task = Task::Localization;
    }
    base.validate()?;
    let ds = base.load_dataset()?;
    let stats = category_stats(&ds);
    let mut runs = Vec::with_capacity(variants.len() * seeds.len());
    let mut summary = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut pooled = Vec::new();
        let first = runs.len();
        for &seed in seeds {
            let mut cfg = base.clone().with_seed(seed);
            cfg.swin.placement = variant;
            log::info!("ablation: {variant} seed {seed}");
            let mut t = Trainer::with_dataset(&cfg, &ds)?;
            t.run()?;
            let report = t.evaluate_val()?.expect("localization head reports metrics");
            let timing = t.timing();
            pooled.extend_from_slice(t.iter_times.get(TIMING_WARMUP..).unwrap_or(&[]));
            runs.push(AblationRun {
                variant,
                seed,
                map50: report.map50,
                map75: report.map75,
                mar100: report.mar100,
                iter_time_mean: timing.mean,
                iter_time_std: timing.std,
                small_ap50: class_mean(&report, &stats, SizeClass::Small),
                regular_ap50: class_mean(&report, &stats, SizeClass::Regular),
                final_loss: *t.losses.last().expect("at least one iteration"),
                losses: t.losses.clone(),
                iter_times: t.iter_times.clone(),
                report,
            });
        }
        let mine = &runs[first..];
        let timing = timing_summary(&pooled, 0);
        summary.push(AblationSummary {
            variant,
            map50: mean(mine.iter().map(|r| r.map50)),
            map75: mean(mine.iter().map(|r| r.map75)),
            mar100: mean(mine.iter().map(|r| r.mar100)),
            iter_time_mean: timing.mean,
            iter_time_std: timing.std,
        });
    }
    Ok(Ablation { runs, summary, stats })
}

impl Ablation {
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(ABLATION_CSV_HEADER)?;
        for s in &self.summary {
            w.write_record([
                s.variant.name().to_string(),
                s.map50.to_string(),
                s.map75.to_string(),
                s.mar100.to_string(),
                s.iter_time_mean.to_string(),
                s.iter_time_std.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn write_runs_csv<W: Write>(&self, out: W) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "variant",
            "seed",
            "map50",
            "map75",
            "mar100",
            "iter_time_mean",
            "iter_time_std",
            "small_ap50",
            "regular_ap50",
            "final_loss",
        ])?;
        for r in &self.runs {
            w.write_record([
                r.variant.name().to_string(),
                r.seed.to_string(),
                r.map50.to_string(),
                r.map75.to_string(),
                r.mar100.to_string(),
                r.iter_time_mean.to_string(),
                r.iter_time_std.to_string(),
                opt(r.small_ap50),
                opt(r.regular_ap50),
                r.final_loss.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Per-variant report with each category's AP averaged over seeds.
    pub fn variant_report(&self, variant: Placement) -> Option<MetricsReport> {
        let runs: Vec<&AblationRun> = self.runs.iter().filter(|r| r.variant == variant).collect();
        let first = runs.first()?;
        let avg = |f: &dyn Fn(&CategoryMetrics) -> Option<f64>, k: usize| {
            let vals: Vec<f64> = runs.iter().filter_map(|r| f(&r.report.per_category[k])).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let per_category = first
            .report
            .per_category
            .iter()
            .enumerate()
            .map(|(k, c)| CategoryMetrics {
                ap50: avg(&|m| m.ap50, k),
                ap75: avg(&|m| m.ap75, k),
                ar100: avg(&|m| m.ar100, k),
                ..c.clone()
            })
            .collect();
        let s = self.summary.iter().find(|s| s.variant == variant)?;
        Some(MetricsReport {
            map50: s.map50,
            map75: s.map75,
            mar100: s.mar100,
            per_category,
            ..first.report.clone()
        })
    }

    /// AP50 per category and variant, ordered by size ratio.
    pub fn size_ordered(&self) -> Result<SizeOrderedTable> {
        let reports: Vec<(String, MetricsReport)> = self
            .summary
            .iter()
            .filter_map(|s| self.variant_report(s.variant).map(|r| (s.variant.name().to_string(), r)))
            .collect();
        let refs: Vec<(&str, &MetricsReport)> = reports.iter().map(|(n, r)| (n.as_str(), r)).collect();
        size_ordered_table(&refs, &self.stats)
    }
}
