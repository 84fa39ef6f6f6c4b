use std::path::PathBuf;
use std::process::ExitCode;

use cbam_swin::data::EnhanceMethod;
use cbam_swin::swin::Placement;
use clap::{Parser, Subcommand};

mod commands;

#[derive(Debug, Parser)]
#[command(name = "cbam-swin", version, about = "CBAM-Swin rail-defect toolkit")]
struct Cli {
    /// Root directory for every output file.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-category instance statistics and the small-instance rule.
    Stats {
        /// COCO annotation file.
        coco: PathBuf,
    },
    /// Enhance images and balance categories by planned augmentation.
    Preprocess {
        coco: PathBuf,
        /// Image directory (defaults to the annotation file's directory).
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, value_parser = parse_enhance)]
        enhance: Option<EnhanceMethod>,
        /// JSON object overriding enhancement parameters.
        #[arg(long)]
        enhance_params: Option<PathBuf>,
        /// JSON file with per-split image-count targets.
        #[arg(long)]
        augment_plan: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
        /// Also augment the validation split toward its targets.
        #[arg(long)]
        augment_val: bool,
    },
    /// Train a backbone and head from a JSON config.
    Train {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        /// Continue from a checkpoint (its stored config is used).
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
    },
    /// Detection metrics for a checkpoint's predictions or a results file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// COCO-style detection results; model predictions are used otherwise.
        #[arg(long)]
        dets: Option<PathBuf>,
        /// COCO ground truth; the checkpoint's validation split otherwise.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of ops, CBAM and a block pair.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = cbam_swin::gradsuite::DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value_t = cbam_swin::gradsuite::DEFAULT_TOLERANCE)]
        tol: f64,
    },
    /// Train and evaluate every placement variant over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', value_parser = parse_placement)]
        variants: Option<Vec<Placement>>,
    },
    /// Per-iteration timing of a config.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 50)]
        iters: usize,
        /// Placements to time (defaults to the config's own).
        #[arg(long, value_delimiter = ',', value_parser = parse_placement)]
        placements: Option<Vec<Placement>>,
    },
}

fn parse_enhance(s: &str) -> Result<EnhanceMethod, String> {
    s.parse().map_err(|e: cbam_swin::Error| e.to_string())
}

fn parse_placement(s: &str) -> Result<Placement, String> {
    s.parse().map_err(|e: cbam_swin::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
