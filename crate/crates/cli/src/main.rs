//! `ovdet` command-line entry point.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime
//! failure, 3 a check (gradient suite) that ran and failed.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "ovdet", version, about = "Miniature open-vocabulary detector on synthetic shapes")]
pub struct Cli {
    /// Directory that relative input and output paths are resolved against [default: current directory]
    #[arg(long, global = true, env = "OVDET_OUT_DIR")]
    pub out_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic shapes dataset
    GenData(GenDataArgs),
    /// Train stage 1 (detector) or stage 2 (text-to-image fusion)
    Train(TrainArgs),
    /// Evaluate a checkpoint; held-out datasets are scored zero-shot
    Eval(EvalArgs),
    /// Train and evaluate the ablation rows over several seeds
    Ablate(AblateArgs),
    /// Write focal and difficulty-weighted loss curves as CSV
    Losscurve(LosscurveArgs),
    /// Compare analytic gradients with central differences
    Gradcheck(GradcheckArgs),
    /// Print a checkpoint's manifest, configuration and split
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Heldout,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Which category combos to draw objects from
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
    /// Number of scenes
    #[arg(long, default_value_t = 2000)]
    pub count: usize,
    /// Master seed; scene i uses a seed derived from (seed, split, i)
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Split specification as TOML [default: 4 shapes x 4 colors, diagonal held out]
    #[arg(long)]
    pub split_config: Option<PathBuf>,
    /// Output file
    #[arg(long, default_value = "scenes.jsonl")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML file with a [train] table; flags override it [default: built-in defaults]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training dataset from gen-data
    #[arg(long, default_value = "scenes.jsonl")]
    pub data: PathBuf,
    /// Training stage, 1 or 2 [default: 1, or the config value]
    #[arg(long)]
    pub stage: Option<u8>,
    /// Stage-1 checkpoint to start stage 2 from [default: none]
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    /// Optimizer steps [default: 6000, or the config value]
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Images per step [default: 8, or the config value]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Base learning rate [default: 1e-4, or the config value]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Seed for model init, batches and noise [default: 0, or the config value]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train auxiliary queries from noisy positives [default: true, or the config value]
    #[arg(long)]
    pub o2m: Option<bool>,
    /// Classification loss for auxiliary positives [default: dwcl, or the config value]
    #[arg(long, value_enum)]
    pub aux_cls_loss: Option<AuxLossArg>,
    /// Checkpoint written at the end (and every --checkpoint-every steps)
    #[arg(long, default_value = "checkpoint.ovd")]
    pub checkpoint: PathBuf,
    /// Intermediate checkpoint interval; 0 writes only at the end [default: 0, or the config value]
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Per-iteration loss CSV
    #[arg(long, default_value = "metrics.csv")]
    pub metrics: PathBuf,
    /// Continue from this checkpoint's saved state instead of starting fresh [default: none]
    #[arg(long, conflicts_with_all = ["config", "stage", "init_from", "batch_size", "lr", "seed", "o2m", "aux_cls_loss"])]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AuxLossArg {
    Dwcl,
    Focal,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, default_value = "checkpoint.ovd")]
    pub checkpoint: PathBuf,
    /// Evaluation dataset; a held-out dataset is scored on held-out combos only
    #[arg(long, default_value = "heldout.jsonl")]
    pub data: PathBuf,
    /// Human-readable report [default: stdout only]
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Metrics CSV [default: none]
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// TOML file with [train] and [ablate] tables; flags override it [default: built-in defaults]
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "scenes.jsonl")]
    pub train_data: PathBuf,
    /// Held-out dataset for zero-shot scoring
    #[arg(long, default_value = "heldout.jsonl")]
    pub eval_data: PathBuf,
    /// Comma-separated seeds [default: 0,1,2, or the config value]
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Stage-1 iterations per cell [default: 6000, or the config value]
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Stage-2 iterations for the full row [default: 2000, or the config value]
    #[arg(long)]
    pub stage2_iterations: Option<usize>,
    /// Images per step [default: 8, or the config value]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Base learning rate [default: 1e-4, or the config value]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Instead of the four rows, sweep focal and the difficulty-weighted
    /// loss over (beta1, beta2) in {(1,1.5),(1,2),(1,2.5),(2,1),(2,1.5),(2,2)}
    #[arg(long, default_value_t = false)]
    pub beta_sweep: bool,
    /// Result CSV
    #[arg(long, default_value = "ablation.csv")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LosscurveArgs {
    /// Difficulty prior IoU of the curve
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    /// Fixed difficulty normalizer used in place of a batch mean
    #[arg(long, default_value_t = 0.25)]
    pub normalizer: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta1: f64,
    #[arg(long, default_value_t = 2.0)]
    pub beta2: f64,
    /// Focal weighting factor
    #[arg(long, default_value_t = 0.25)]
    pub alpha: f64,
    /// Focal focusing exponent
    #[arg(long, default_value_t = 2.0)]
    pub gamma: f64,
    /// Probability grid k/steps for k = 1..steps-1
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    /// IoU grid k/iou_steps for k = 0..iou_steps-1
    #[arg(long, default_value_t = 20)]
    pub iou_steps: usize,
    /// Curve CSV: p, focal, difficulty-weighted
    #[arg(long, default_value = "losscurve.csv")]
    pub curve: PathBuf,
    /// Surface CSV: p, iou, difficulty-weighted
    #[arg(long, default_value = "losssurface.csv")]
    pub surface: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    Losses,
    Fusion,
    Model,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "losses")]
    pub scope: ScopeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Perturb the analytic gradient of this group (negative control) [default: none]
    #[arg(long)]
    pub corrupt: Option<String>,
    /// Also write the report here [default: stdout only]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long, default_value = "checkpoint.ovd")]
    pub checkpoint: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(commands::EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
