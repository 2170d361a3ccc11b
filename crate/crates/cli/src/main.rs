use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(name = "gazekit", version, about = "Audio-visual gaze following toolkit")]
struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic clips (frames, audio, annotations).
    Synth(SynthArgs),
    /// Convert annotations between VGS, COCO, VOC and VAT.
    Convert(ConvertArgs),
    /// Deterministic 9:1 train/test split of annotated frames.
    Split(SplitArgs),
    /// Train the lip/audio sync embedders and place the speaker threshold.
    TrainSync(TrainSyncArgs),
    /// Train the gaze-candidate detector.
    TrainDetector(TrainDetectorArgs),
    /// Train the subject/candidate matcher on a frozen detector.
    TrainMatcher(TrainMatcherArgs),
    /// Run the full pipeline on one clip.
    Infer(InferArgs),
    /// Average precision of detections, or an ablation of two runs.
    Eval(EvalArgs),
    /// Finite-difference checks of every layer kind and loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory; clips go to `<out>/synth<seed>`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fixed clip length in frames.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub min_persons: Option<usize>,
    #[arg(long)]
    pub max_persons: Option<usize>,
    /// The voice belongs to nobody on screen.
    #[arg(long)]
    pub out_of_frame_voice: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Vgs,
    Coco,
    Voc,
    Vat,
}

#[derive(Args)]
pub struct ConvertArgs {
    /// Input file (a directory for VOC).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "vgs")]
    pub from: Format,
    #[arg(long, value_enum)]
    pub to: Format,
    /// Output file (a directory for VOC).
    #[arg(long)]
    pub output: PathBuf,
    /// VGS file whose video headers are used when importing VAT.
    #[arg(long)]
    pub headers: Option<PathBuf>,
}

#[derive(Args)]
pub struct SplitArgs {
    /// VGS annotations.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Manifest JSON path.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args)]
pub struct SgdArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainSyncArgs {
    /// A clip directory or a directory of clip directories.
    #[arg(long)]
    pub clips: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sgd: SgdArgs,
    #[arg(long)]
    pub margin: Option<f64>,
    /// Take every n-th window start.
    #[arg(long, default_value_t = 2)]
    pub stride: usize,
}

#[derive(Args)]
pub struct TrainDetectorArgs {
    #[arg(long)]
    pub clips: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sgd: SgdArgs,
    /// Train the arm whose identity channels are zero.
    #[arg(long)]
    pub no_audio: bool,
    /// Use every n-th frame of each clip.
    #[arg(long, default_value_t = 10)]
    pub frame_stride: usize,
}

#[derive(Args)]
pub struct TrainMatcherArgs {
    #[arg(long)]
    pub clips: PathBuf,
    /// Trained detector checkpoint (kept frozen).
    #[arg(long)]
    pub detector: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sgd: SgdArgs,
    #[arg(long)]
    pub no_audio: bool,
    #[arg(long, default_value_t = 10)]
    pub frame_stride: usize,
}

#[derive(Args)]
pub struct InferArgs {
    /// Pipeline configuration file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub sync: Option<PathBuf>,
    #[arg(long)]
    pub detector: Option<PathBuf>,
    #[arg(long)]
    pub matcher: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Zero both identity channels and skip speaker identification.
    #[arg(long)]
    pub no_audio: bool,
    #[arg(long)]
    pub no_overlays: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Detections JSON lines, or an `infer` output directory.
    #[arg(long)]
    pub detections: PathBuf,
    /// Ground-truth JSON lines, VGS annotations, or a clip directory.
    #[arg(long)]
    pub ground_truth: PathBuf,
    /// Second run for an ablation report.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub gate: f64,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 104)]
    pub cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

/// Summary of a finished command.
pub struct Report {
    pub text: String,
    pub json: serde_json::Value,
    /// The command ran but its result is a failure (exit code 1).
    pub failed: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, result) = match &cli.command {
        Command::Synth(a) => ("synth", commands::synth(a)),
        Command::Convert(a) => ("convert", commands::convert(a)),
        Command::Split(a) => ("split", commands::split(a)),
        Command::TrainSync(a) => ("train-sync", commands::train_sync(a)),
        Command::TrainDetector(a) => ("train-detector", commands::train_detector(a)),
        Command::TrainMatcher(a) => ("train-matcher", commands::train_matcher(a)),
        Command::Infer(a) => ("infer", commands::infer(a)),
        Command::Eval(a) => ("eval", commands::eval(a)),
        Command::Gradcheck(a) => ("gradcheck", commands::gradcheck(a)),
    };
    match result {
        Ok(report) => {
            if cli.json {
                println!("{}", report.json);
            } else {
                print!("{}", report.text);
            }
            if report.failed {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "command": name, "error": e.to_string() }));
            ExitCode::from(1)
        }
    }
}
