//! `echoview`: dataset generation, training, evaluation, prediction,
//! occlusion saliency, and aggregation benchmarking.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric
//! failure.

mod commands;
mod stage;

use std::fmt;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use echoview_core::aggregation::SchemeKind;
use echoview_core::dataio::Split;
use echoview_core::models::Head;
use echoview_core::preprocess::ViewKind;
use echoview_core::CoreError;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "echoview", version, about = "Multi-view echo clip classification")]
struct Cli {
    /// Worker thread count (default: ECHOVIEW_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with a manifest.
    Generate(GenerateArgs),
    /// Train a key-frame, video, or view-classifier model.
    Train(TrainArgs),
    /// Score a checkpoint on one manifest split.
    Eval(EvalArgs),
    /// Predict one study from a directory of clips.
    Predict(PredictArgs),
    /// Occlusion saliency map for one study.
    Occlude(OccludeArgs),
    /// Per-scheme study latency and accuracy.
    Benchmark(BenchmarkArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchChoice {
    McDsc,
    MbDsc,
    MbDscFifth,
    McStandard,
}

impl ArchChoice {
    pub fn preset_name(self) -> &'static str {
        match self {
            ArchChoice::McDsc => "mc-dsc",
            ArchChoice::MbDsc => "mb-dsc",
            ArchChoice::MbDscFifth => "mb-dsc-fifth",
            ArchChoice::McStandard => "mc-standard",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadChoice {
    Binary,
    Three,
}

impl HeadChoice {
    pub fn to_head(self) -> Head {
        match self {
            HeadChoice::Binary => Head::Binary,
            HeadChoice::Three => Head::ThreeClass,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeChoice {
    Frameind,
    Rnn,
    Nonlocal,
    Temporal,
}

impl SchemeChoice {
    pub fn to_scheme(self) -> SchemeKind {
        match self {
            SchemeChoice::Frameind => SchemeKind::Frameind,
            SchemeChoice::Rnn => SchemeKind::Rnn,
            SchemeChoice::Nonlocal => SchemeKind::Nonlocal,
            SchemeChoice::Temporal => SchemeKind::Temporal,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeChoice {
    Keyframe,
    Video,
    View,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitChoice {
    Train,
    Val,
    Test,
}

impl SplitChoice {
    pub fn to_split(self) -> Split {
        match self {
            SplitChoice::Train => Split::Train,
            SplitChoice::Val => Split::Val,
            SplitChoice::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ViewChoice {
    Pslax,
    Pssax,
    A4c,
    Sxlax,
    Sslax,
}

impl ViewChoice {
    pub fn to_view(self) -> ViewKind {
        match self {
            ViewChoice::Pslax => ViewKind::PSLAX,
            ViewChoice::Pssax => ViewKind::PSSAX,
            ViewChoice::A4c => ViewKind::A4C,
            ViewChoice::Sxlax => ViewKind::SXLAX,
            ViewChoice::Sslax => ViewKind::SSLAX,
        }
    }
}

#[derive(Args, Serialize)]
pub struct GenerateArgs {
    /// Phantom spec JSON; built-in defaults when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Dataset output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeChoice::Keyframe)]
    pub mode: ModeChoice,
    #[arg(long, value_enum, default_value_t = ArchChoice::McDsc)]
    pub arch: ArchChoice,
    #[arg(long, value_enum, default_value_t = HeadChoice::Binary)]
    pub head: HeadChoice,
    /// Clip aggregation scheme (video and view modes).
    #[arg(long, value_enum, default_value_t = SchemeChoice::Temporal)]
    pub aggregation: SchemeChoice,
    /// Weight of the key-frame attention supervision term.
    #[arg(long, default_value_t = 1.0)]
    pub keyframe_loss: f64,
    /// Override the architecture's input extent (16/32/64/128/256).
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 20)]
    pub patience: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    /// Spawn this many virtual patients per incomplete positive train study.
    #[arg(long)]
    pub augment: Option<usize>,
    /// Continue from a checkpoint (params + optimizer state).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run directory for checkpoint, curves, and report.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
    pub split: SplitChoice,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct PredictArgs {
    /// Video-model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Study directory: one subdirectory of PNG frames per clip.
    #[arg(long)]
    pub clips: PathBuf,
    /// Clip directories are unlabeled; route them to view slots first.
    #[arg(long, default_value_t = false)]
    pub unordered_views: bool,
    /// View-classifier checkpoint (required with --unordered-views).
    #[arg(long)]
    pub router: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct OccludeArgs {
    /// Key-frame model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Subject id of the study to explain.
    #[arg(long)]
    pub subject: String,
    /// View channel to occlude.
    #[arg(long, value_enum, default_value_t = ViewChoice::A4c)]
    pub view: ViewChoice,
    #[arg(long = "box", default_value_t = 4)]
    pub box_size: usize,
    #[arg(long, default_value_t = 4)]
    pub stride: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
    pub split: SplitChoice,
    /// Video checkpoints to compare; repeat per scheme.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Timed sweeps over the study set.
    #[arg(long, default_value_t = 3)]
    pub passes: usize,
    /// Cap the number of studies.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Command-line misuse detected after parsing (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::Numeric(_)) => 3,
        _ => 2,
    }
}

fn configure_threads(flag: Option<usize>) {
    let n = flag.or_else(|| {
        std::env::var("ECHOVIEW_THREADS").ok().and_then(|s| s.parse::<usize>().ok())
    });
    if let Some(n) = n.filter(|&n| n > 0) {
        // Ignore failure: the global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Generate(a) => commands::generate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Occlude(a) => commands::occlude(&a),
        Command::Benchmark(a) => commands::benchmark(&a),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    configure_threads(cli.threads);
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(exit_code(&e));
    }
}
