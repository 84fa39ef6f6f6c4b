//! Synthetic data, task heads, AdamW, the training loop, checkpoints and
//! the placement ablation.

pub mod ablation;
pub mod checkpoint;
pub mod head;
pub mod model;
pub mod optim;
pub mod synthetic;
pub mod trainer;

pub use ablation::{run_ablation, Ablation, AblationRun, AblationSummary, ABLATION_CSV_HEADER};
pub use checkpoint::Checkpoint;
pub use head::{ClassificationHead, LocalizationHead, Task};
pub use model::{prepare_samples, Model, Sample};
pub use optim::{adamw_step, AdamW, AdamWParams};
pub use synthetic::{generate_synthetic, DefectKind, SyntheticSpec};
pub use trainer::{
    timing_summary, window_mean, write_loss_csv, write_timing_csv, DatasetSource, TimingSummary, TrainConfig, Trainer,
    TIMING_WARMUP,
};
