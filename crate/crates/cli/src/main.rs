mod commands;
mod config;
mod draw;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "sonar-kd", version, about = "Sonar wall detection: dataset prep, training, offline distillation, evaluation")]
struct Cli {
    /// Flat `key = value` file; keys are long flag names, flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize or import originals, add noise/flip variants and split 70/15/15.
    MakeDataset(MakeDatasetArgs),
    /// Train a detector, optionally distilling from a teacher.
    Train(TrainArgs),
    /// Store a teacher's FPN logits for every image of a split.
    DumpLogits(DumpLogitsArgs),
    /// Box-level evaluation on a dataset split.
    Eval(EvalArgs),
    /// Frame-share evaluation against a wall-presence timeline.
    EvalVideo(EvalVideoArgs),
    /// Detect on one image.
    Infer(InferArgs),
}

#[derive(Args, Debug)]
pub struct MakeDatasetArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Noise standard deviation in intensity units.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Number of synthetic originals (ignored with --import).
    #[arg(long)]
    pub synth: Option<usize>,
    /// Directory of PNG/PGM originals with same-stem `.txt` annotations.
    #[arg(long)]
    pub import: Option<PathBuf>,
    /// Square side every image is synthesized at or resized to.
    #[arg(long)]
    pub size: Option<usize>,
    /// Keep only the originals.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = ["nano", "tiny", "s", "m", "l", "x"])]
    pub preset: Option<String>,
    #[arg(long, value_parser = ["on", "off"])]
    pub vit: Option<String>,
    /// Stem width before the preset multiplier (64 = full size).
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Disable online random flip/noise.
    #[arg(long)]
    pub no_aug: bool,
    /// Add the distillation loss; needs --teacher-logits (offline) or --teacher (online).
    #[arg(long)]
    pub kd: bool,
    #[arg(long)]
    pub teacher_logits: Option<PathBuf>,
    /// Teacher checkpoint run on every batch (slow).
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_parser = ["adam", "sgd"])]
    pub optimizer: Option<String>,
    #[arg(long, value_parser = ["cosine", "constant"])]
    pub schedule: Option<String>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Gradient-norm cap; 0 disables.
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub kd_bbox: Option<f64>,
    #[arg(long)]
    pub kd_obj: Option<f64>,
    #[arg(long)]
    pub kd_cls: Option<f64>,
    #[arg(long, value_parser = ["additive", "blend"])]
    pub kd_mode: Option<String>,
    /// Hard-loss share in blend mode.
    #[arg(long)]
    pub kd_lambda: Option<f64>,
    #[arg(long, value_parser = ["batch-scales", "element-mean"])]
    pub kd_norm: Option<String>,
    #[arg(long)]
    pub log_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DumpLogitsArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = ["train", "val", "test"])]
    pub split: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_parser = ["train", "val", "test"])]
    pub split: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Per-image prediction files `<id>.txt` instead of a checkpoint.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub iou: Option<f64>,
    #[arg(long)]
    pub score_thresh: Option<f64>,
    #[arg(long)]
    pub nms_iou: Option<f64>,
    /// Row label in the rendered tables.
    #[arg(long)]
    pub label: Option<String>,
    /// Directory for report.{json,csv,txt}.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalVideoArgs {
    #[arg(long)]
    pub frames: Option<PathBuf>,
    /// `frame_stem 0|1` per line.
    #[arg(long)]
    pub gt_timeline: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub score_thresh: Option<f64>,
    #[arg(long)]
    pub nms_iou: Option<f64>,
    #[arg(long)]
    pub wall_class: Option<usize>,
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Prediction file to write (`class score cx cy w h`, normalized).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// PNG copy of the image with the detections drawn.
    #[arg(long)]
    pub annotated: Option<PathBuf>,
    #[arg(long)]
    pub score_thresh: Option<f64>,
    #[arg(long)]
    pub nms_iou: Option<f64>,
}

fn error_envelope(err: &anyhow::Error) -> serde_json::Value {
    let code = err
        .chain()
        .find_map(|e| e.downcast_ref::<sonar_kd::Error>())
        .map_or("error", sonar_kd::Error::code);
    let message = err.root_cause().to_string();
    let context: Vec<String> = err.chain().map(|e| e.to_string()).filter(|m| *m != message).collect();
    serde_json::json!({ "code": code, "message": message, "context": context })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let config = cli.config.as_deref();
    let result = match cli.command {
        Command::MakeDataset(a) => commands::make_dataset(a, config),
        Command::Train(a) => commands::train(a, config),
        Command::DumpLogits(a) => commands::dump_logits(a, config),
        Command::Eval(a) => commands::eval(a, config),
        Command::EvalVideo(a) => commands::eval_video(a, config),
        Command::Infer(a) => commands::infer(a, config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_envelope(&e));
            ExitCode::FAILURE
        }
    }
}
