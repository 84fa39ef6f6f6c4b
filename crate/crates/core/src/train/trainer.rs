//! Training loop with per-iteration wall-clock timing.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::head::Task;
use super::model::{prepare_samples, Model, Sample};
use super::optim::{AdamW, AdamWParams};
use super::synthetic::{generate_synthetic, SyntheticSpec};
use crate::cbam::{refine_invocations, reset_refine_invocations};
use crate::data::{category_stats, io::load_pixels, load_coco, split_train_val, CategoryStats, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, ground_truth, Detection, MetricsReport, MAX_DETS};
use crate::params::{ParamStore, Session};
use crate::swin::SwinConfig;

/// Iterations excluded from the timing summary.
pub const TIMING_WARMUP: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Coco { annotations: PathBuf, images: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub swin: SwinConfig,
    #[serde(default)]
    pub task: Task,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Overrides `epochs` when set.
    #[serde(default)]
    pub iterations: Option<usize>,
    /// Drives data splitting and batch order; `swin.seed` drives the init.
    pub seed: u64,
    pub dataset: DatasetSource,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub timing_log_path: Option<PathBuf>,
}

fn default_eps() -> f64 {
    1e-8
}

fn default_val_fraction() -> f64 {
    0.2
}

impl TrainConfig {
    /// Nano backbone on the default synthetic set, 200 iterations.
    pub fn nano_synthetic() -> Self {
        let hp = AdamWParams::default();
        TrainConfig {
            swin: SwinConfig::nano(),
            task: Task::Classification,
            lr: hp.lr,
            weight_decay: hp.weight_decay,
            betas: hp.betas,
            eps: hp.eps,
            epochs: 36,
            batch_size: 16,
            iterations: Some(200),
            seed: 0,
            dataset: DatasetSource::Synthetic(SyntheticSpec::default()),
            val_fraction: 0.2,
            timing_log_path: None,
        }
    }

    /// Backbone and training seeds set together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.swin.seed = seed;
        self
    }

    pub fn adamw(&self) -> AdamWParams {
        AdamWParams { lr: self.lr, betas: self.betas, eps: self.eps, weight_decay: self.weight_decay }
    }

    pub fn validate(&self) -> Result<()> {
        self.swin.validate()?;
        self.adamw().validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.iterations == Some(0) {
            return Err(Error::InvalidParam("epochs, batch_size and iterations must be at least 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidParam(format!("val_fraction {} must lie in (0, 1)", self.val_fraction)));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("training config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json_str(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Loads or generates the dataset (with pixels).
    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetSource::Synthetic(spec) => generate_synthetic(spec),
            DatasetSource::Coco { annotations, images } => {
                let mut ds = load_coco(annotations)?;
                load_pixels(&mut ds, images)?;
                Ok(ds)
            }
        }
    }
}

/// Mean and population standard deviation of the retained samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub warmup: usize,
    pub samples: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn timing_summary(times: &[f64], warmup: usize) -> TimingSummary {
    let kept = times.get(warmup..).unwrap_or(&[]);
    let n = kept.len();
    if n == 0 {
        return TimingSummary { warmup, samples: 0, mean: f64::NAN, std: f64::NAN };
    }
    let mean = kept.iter().sum::<f64>() / n as f64;
    let var = kept.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n as f64;
    TimingSummary { warmup, samples: n, mean, std: var.sqrt() }
}

pub fn write_loss_csv<W: Write>(losses: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_timing_csv<W: Write>(times: &[f64], warmup: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "seconds", "warmup"])?;
    for (i, t) in times.iter().enumerate() {
        w.write_record([(i + 1).to_string(), t.to_string(), (i < warmup).to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Train/validation data prepared for one configuration.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train_set: Dataset,
    pub val_set: Dataset,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    /// Statistics of the whole dataset before splitting, so the size
    /// classes do not depend on which images land in validation.
    pub stats: Vec<CategoryStats>,
}

impl PreparedData {
    pub fn new(cfg: &TrainConfig, ds: &Dataset) -> Result<Self> {
        if ds.images.is_empty() {
            return Err(Error::DatasetEmpty);
        }
        let (train_set, val_set) = split_train_val(ds, 1.0 - cfg.val_fraction, cfg.seed)?;
        let mut train = prepare_samples(&train_set, cfg.swin.input_size)?;
        if cfg.task == Task::Classification {
            train.retain(|s| s.label.is_some());
        }
        if train.is_empty() {
            return Err(Error::DatasetEmpty);
        }
        let val = prepare_samples(&val_set, cfg.swin.input_size)?;
        Ok(PreparedData { train_set, val_set, train, val, stats: category_stats(ds) })
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub store: ParamStore,
    pub optimizer: AdamW,
    pub data: PreparedData,
    /// Loss of every completed iteration.
    pub losses: Vec<f64>,
    /// Wall-clock seconds of every iteration run in this process.
    pub iter_times: Vec<f64>,
    /// CBAM refinements counted during the last forward pass.
    pub last_cbam_invocations: usize,
    epoch_order: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let ds = cfg.load_dataset()?;
        Self::with_dataset(cfg, &ds)
    }

    pub fn with_dataset(cfg: &TrainConfig, ds: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let data = PreparedData::new(cfg, ds)?;
        let mut store = ParamStore::new();
        let ids = ds.categories.iter().map(|c| c.id).collect();
        let model = Model::build(&cfg.swin, cfg.task, ids, &mut store)?;
        let optimizer = AdamW::new(&store, cfg.adamw())?;
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            store,
            optimizer,
            data,
            losses: Vec::new(),
            iter_times: Vec::new(),
            last_cbam_invocations: 0,
            epoch_order: None,
        })
    }

    /// Restores parameters, optimizer state and loss history.
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(&ckpt.config)?;
        t.restore(ckpt)?;
        Ok(t)
    }

    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.copy_params_into(&mut self.store)?;
        if let Some(opt) = &ckpt.optimizer {
            self.optimizer = opt.clone();
        }
        self.losses = ckpt.losses.clone();
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            category_ids: self.model.category_ids.clone(),
            losses: self.losses.clone(),
            store: self.store.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    pub fn iteration(&self) -> usize {
        self.losses.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.train.len().div_ceil(self.cfg.batch_size)
    }

    pub fn total_iterations(&self) -> usize {
        self.cfg.iterations.unwrap_or(self.cfg.epochs * self.batches_per_epoch())
    }

    /// Sample indices of 0-based iteration `it`: a per-epoch shuffle drawn
    /// from the training seed, so any iteration can be reproduced alone.
    pub fn batch_indices(&mut self, it: usize) -> Vec<usize> {
        let bpe = self.batches_per_epoch();
        let (epoch, pos) = (it / bpe, it % bpe);
        let fresh = !matches!(&self.epoch_order, Some((e, _)) if *e == epoch);
        if fresh {
            let mut order: Vec<usize> = (0..self.data.train.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
            rng.set_stream(epoch as u64);
            order.shuffle(&mut rng);
            self.epoch_order = Some((epoch, order));
        }
        let order = &self.epoch_order.as_ref().expect("order cached").1;
        let b = self.cfg.batch_size;
        order[pos * b..((pos + 1) * b).min(order.len())].to_vec()
    }

    /// One optimizer iteration; returns its loss.
    pub fn step(&mut self) -> Result<f64> {
        let start = Instant::now();
        let it = self.iteration();
        let idx = self.batch_indices(it);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &self.data.train[i]).collect();
        let (loss, grads) = {
            let mut s = Session::new(&self.store, true);
            reset_refine_invocations();
            let out = self.model.loss(&mut s, &batch)?;
            self.last_cbam_invocations = refine_invocations();
            let loss = s.tape.value(out).item().expect("scalar loss");
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { iteration: it + 1, loss });
            }
            s.tape.backward(out)?;
            (loss, s.param_grads())
        };
        self.optimizer.step(&mut self.store, &grads)?;
        self.losses.push(loss);
        self.iter_times.push(start.elapsed().as_secs_f64());
        Ok(loss)
    }

    /// Runs until `until` iterations are complete (capped at the total).
    pub fn run_until(&mut self, until: usize) -> Result<()> {
        let end = until.min(self.total_iterations());
        while self.iteration() < end {
            let loss = self.step()?;
            let it = self.iteration();
            if it == 1 || it % 25 == 0 {
                log::info!("iteration {it}/{end}: loss {loss:.5}");
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.total_iterations())
    }

    pub fn timing(&self) -> TimingSummary {
        timing_summary(&self.iter_times, TIMING_WARMUP)
    }

    /// Detections on the validation split (localization head).
    pub fn val_detections(&self) -> Result<Vec<Detection>> {
        let mut dets = Vec::new();
        for sample in &self.data.val {
            dets.extend(self.model.detect(&self.store, sample)?);
        }
        Ok(dets)
    }

    /// Validation metrics; `None` for the classification head.
    pub fn evaluate_val(&self) -> Result<Option<MetricsReport>> {
        if self.model.task() != Task::Localization {
            return Ok(None);
        }
        let dets = self.val_detections()?;
        let gts = ground_truth(&self.data.val_set);
        evaluate(&dets, &gts, &self.data.val_set.categories, MAX_DETS).map(Some)
    }

    /// Top-1 accuracy on validation images with a label.
    pub fn val_accuracy(&self) -> Result<Option<f64>> {
        if self.model.task() != Task::Classification {
            return Ok(None);
        }
        let (mut hit, mut n) = (0usize, 0usize);
        for sample in self.data.val.iter().filter(|s| s.label.is_some()) {
            let logits = self.model.logits(&self.store, sample)?;
            let best = logits.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|p| p.0);
            hit += (best == sample.label) as usize;
            n += 1;
        }
        Ok((n > 0).then(|| hit as f64 / n as f64))
    }
}

/// Mean loss over 1-based iterations `from..=to`.
pub fn window_mean(losses: &[f64], from: usize, to: usize) -> f64 {
    let w = &losses[from - 1..to];
    w.iter().sum::<f64>() / w.len() as f64
}
