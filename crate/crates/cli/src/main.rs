mod detect;
mod eval;
mod inspect;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vigil_core::decode::{DEFAULT_NMS_THRESHOLD, DEFAULT_SCORE_THRESHOLD};
use vigil_core::evalkit::{AccuracyMode, MATCH_IOU_THRESHOLD};
use vigil_core::pipeline::PreprocessMode;

/// Exit status for runs where some frames or lines could not be processed.
pub const EXIT_PARTIAL: u8 = 1;
/// Exit status for unusable configuration or input files.
pub const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "vigil", version, about = "Three-scale YOLO-style object detection on the CPU")]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Summarize a network definition and optionally verify a weights file.
    Inspect(InspectArgs),
    /// Run detection on an image or a directory of frames.
    Detect(DetectArgs),
    /// Score records files against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub netdef: PathBuf,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Override the definition's input size (square).
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Stretch,
    Letterbox,
}

impl From<ModeArg> for PreprocessMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Stretch => PreprocessMode::Stretch,
            ModeArg::Letterbox => PreprocessMode::Letterbox,
        }
    }
}

#[derive(Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub netdef: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    /// Class names, one per line; ids without a name print as `class<id>`.
    #[arg(long)]
    pub names: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SCORE_THRESHOLD, value_parser = unit_interval)]
    pub score_thresh: f64,
    #[arg(long, default_value_t = DEFAULT_NMS_THRESHOLD, value_parser = unit_interval)]
    pub nms_thresh: f64,
    /// Square network input side; must be a multiple of 32.
    #[arg(long, default_value_t = 416)]
    pub size: usize,
    #[arg(long, value_enum, default_value = "stretch")]
    pub mode: ModeArg,
    /// Output directory for records, timings and annotated frames.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Report boxes on a fixed 256x256 canvas instead of source pixels.
    #[arg(long)]
    pub compat_256_scale: bool,
    /// Sequence name stored in the records header (defaults to the input name).
    #[arg(long)]
    pub sequence: Option<String>,
    /// Image file or directory of frames.
    pub input: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum AccuracyArg {
    Box,
    Frame,
}

impl From<AccuracyArg> for AccuracyMode {
    fn from(a: AccuracyArg) -> Self {
        match a {
            AccuracyArg::Box => AccuracyMode::BoxLevel,
            AccuracyArg::Frame => AccuracyMode::FrameLevel,
        }
    }
}

#[derive(Args)]
pub struct EvalArgs {
    /// Ground-truth JSON-lines file.
    #[arg(long = "gt")]
    pub ground_truth: PathBuf,
    #[arg(long)]
    pub names: Option<PathBuf>,
    #[arg(long, default_value_t = MATCH_IOU_THRESHOLD, value_parser = unit_interval)]
    pub iou: f64,
    #[arg(long, value_enum, default_value = "box")]
    pub accuracy: AccuracyArg,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// One records file per video.
    #[arg(required = true)]
    pub records: Vec<PathBuf>,
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Inspect(a) => inspect::run(&a),
        Command::Detect(a) => detect::run(&a),
        Command::Eval(a) => eval::run(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}
