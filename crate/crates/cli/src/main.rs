mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hvq_core::hvq::HierarchyMode;

#[derive(Parser, Debug)]
#[command(
    name = "hvq",
    version,
    about = "Hierarchical vector-quantized transformer for multi-class anomaly detection"
)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus in the MVTec directory layout.
    Gen(GenArgs),
    /// Train a model and write its checkpoint.
    Train(TrainArgs),
    /// Score a test split with a checkpoint.
    Eval(EvalArgs),
    /// Train and evaluate a grid of configurations.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub test_normal: Option<usize>,
    #[arg(long)]
    pub test_anomalous: Option<usize>,
    /// Square image side in pixels.
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct ModelFlags {
    #[arg(long)]
    pub hierarchy: Option<HierarchyMode>,
    /// Skip quantization entirely.
    #[arg(long)]
    pub no_vq: bool,
    #[arg(long)]
    pub no_switch_codebook: bool,
    #[arg(long)]
    pub no_switch_expert: bool,
    /// Drop the transport loss and the transport scores.
    #[arg(long)]
    pub no_pot: bool,
    /// Prototypes per codebook.
    #[arg(long = "K", value_name = "K")]
    pub k: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Route training images by label rather than by the classifier.
    #[arg(long)]
    pub teacher_force_switch: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Square image side in pixels.
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Corpus in the MVTec layout; a synthetic corpus is generated when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus in the MVTec layout; defaults to regenerating the checkpoint's synthetic corpus.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write input / mask / score-map triptychs for anomalous test images.
    #[arg(long)]
    pub plot: bool,
    #[arg(long)]
    pub no_pot: bool,
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grid {
    Hierarchy,
    K,
    Components,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub grid: Grid,
    /// Codebook sizes for the `k` grid.
    #[arg(long, value_delimiter = ',', default_value = "64,128,256")]
    pub ks: Vec<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
