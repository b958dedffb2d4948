use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use plcompose::aggregation::{
    AggregationConfig, AggregationStrategy, SoftNmsConfig, SoftNmsMethod, DEFAULT_GROUP_IOU,
};
use plcompose::classification::TieBreak;
use plcompose::filtering::{FilterConfig, DEFAULT_CONFIDENCE_THRESHOLD};
use plcompose::Error;

mod commands;

/// Compose black-box detectors and classifiers into one pseudo-labeled dataset.
#[derive(Parser, Debug)]
#[command(name = "plcompose", version, about)]
struct Cli {
    /// More log output (-v info, -vv debug, -vvv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Collect one model's predictions from its HTTP endpoint.
    Collect(CollectArgs),
    /// Apply the confidence or entropy filter to one predictions file.
    Filter(FilterCmd),
    /// Filter and aggregate the predictions files listed in a registry.
    Aggregate(AggregateCmd),
    /// Score pseudo-labels (or any predictions) against ground truth.
    Evaluate(EvaluateCmd),
    /// Generate synthetic ground truth and noisy detectors.
    Simulate(SimulateCmd),
    /// Collect (where needed), filter, aggregate and optionally evaluate.
    Pipeline(PipelineCmd),
    /// Serve fixed predictions over the endpoint protocol.
    ServeStub(ServeStubCmd),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Task {
    Detection,
    Classification,
}

#[derive(Args, Debug)]
struct CollectArgs {
    /// Model registry (JSON).
    #[arg(long)]
    registry: PathBuf,
    /// COCO file whose `images` form the corpus.
    #[arg(long)]
    corpus: PathBuf,
    /// Registry id of the model to query.
    #[arg(long)]
    model_id: String,
    /// Output predictions file (COCO).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    endpoint: EndpointArgs,
}

#[derive(Args, Debug, Clone)]
struct EndpointArgs {
    /// Concurrent requests per endpoint.
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    /// Retries per image after the first attempt.
    #[arg(long, default_value_t = 2)]
    retries: u32,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
    /// Base backoff between retries, in milliseconds.
    #[arg(long, default_value_t = 200)]
    backoff_ms: u64,
    /// Directory that corpus file names are resolved against; when set,
    /// image bytes are sent with each request.
    #[arg(long)]
    image_root: Option<PathBuf>,
    /// Environment variable holding a bearer token.
    #[arg(long)]
    token_env: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct FilterArgs {
    /// Drop detections scoring below this.
    #[arg(long, default_value_t = DEFAULT_CONFIDENCE_THRESHOLD)]
    confidence_threshold: f64,
    /// Drop classification labels whose entropy (nats) exceeds this.
    #[arg(long, default_value_t = f64::INFINITY)]
    entropy_threshold: f64,
}

impl FilterArgs {
    fn config(&self) -> plcompose::Result<FilterConfig> {
        FilterConfig::new(self.entropy_threshold, self.confidence_threshold)
    }
}

#[derive(Args, Debug, Clone)]
struct StrategyArgs {
    /// unanimous, consensus or affirmative.
    #[arg(long, default_value = "consensus")]
    strategy: AggregationStrategy,
    /// IoU at which same-category boxes join one object group.
    #[arg(long, default_value_t = DEFAULT_GROUP_IOU)]
    group_iou: f64,
    /// Soft-NMS decay: gaussian or linear.
    #[arg(long, default_value = "gaussian")]
    nms: SoftNmsMethod,
    /// Gaussian decay width.
    #[arg(long, default_value_t = SoftNmsConfig::DEFAULT_SIGMA)]
    nms_sigma: f64,
    /// Linear decay applies above this IoU.
    #[arg(long, default_value_t = SoftNmsConfig::DEFAULT_IOU_CUT)]
    nms_iou_cut: f64,
    /// Boxes whose decayed score falls below this are dropped.
    #[arg(long, default_value_t = SoftNmsConfig::DEFAULT_SCORE_PRUNE)]
    nms_prune: f64,
    /// Classification ties: abstain or mean-prob.
    #[arg(long, default_value = "abstain")]
    tie: TieBreak,
}

impl StrategyArgs {
    fn config(&self) -> plcompose::Result<AggregationConfig> {
        let nms = SoftNmsConfig::new(self.nms, self.nms_sigma, self.nms_iou_cut, self.nms_prune)?;
        AggregationConfig::new(self.strategy, self.group_iou, nms)
    }
}

#[derive(Args, Debug)]
struct FilterCmd {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Registry supplying the category table (needed for the results layout).
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Model id for annotations that carry none.
    #[arg(long, default_value = "input")]
    model_id: String,
    #[arg(long, value_enum, default_value_t = Task::Detection)]
    task: Task,
    #[command(flatten)]
    filter: FilterArgs,
}

#[derive(Args, Debug)]
struct AggregateCmd {
    #[arg(long)]
    registry: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Pseudo-label output (COCO).
    #[arg(long)]
    out: PathBuf,
    /// Also write the run summary here.
    #[arg(long)]
    summary: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Task::Detection)]
    task: Task,
    #[command(flatten)]
    filter: FilterArgs,
    #[command(flatten)]
    strategy: StrategyArgs,
}

#[derive(Args, Debug)]
struct EvaluateCmd {
    /// Ground truth (COCO annotation layout).
    #[arg(long)]
    truth: PathBuf,
    /// Predictions or pseudo-labels (COCO).
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, value_enum, default_value_t = Task::Detection)]
    task: Task,
    /// Write the full report as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateCmd {
    /// `desk` for the built-in three-detector scenario, or a scenario JSON file.
    #[arg(long, default_value = "desk")]
    detectors: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    images: Option<usize>,
    /// Keep only the first N categories of the scenario.
    #[arg(long)]
    categories: Option<usize>,
    #[arg(long)]
    objects_per_image: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct PipelineCmd {
    #[arg(long)]
    registry: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Pseudo-label output (COCO).
    #[arg(long)]
    out: PathBuf,
    /// Ground truth; when given, an evaluation report is produced.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Run summary JSON (defaults to `<out>.summary.json`).
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Where collected predictions go (defaults to `<out>.collected/`).
    #[arg(long)]
    work_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Task::Detection)]
    task: Task,
    #[command(flatten)]
    filter: FilterArgs,
    #[command(flatten)]
    strategy: StrategyArgs,
    #[command(flatten)]
    endpoint: EndpointArgs,
}

#[derive(Args, Debug)]
struct ServeStubCmd {
    /// Detections to serve, looked up by image id.
    #[arg(long)]
    predictions: PathBuf,
    /// Registry supplying the category table (needed for the results layout).
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
}

/// An error tagged with the stage that raised it.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: Error,
}

pub trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, StageError>;
}

impl<T> Stage<T> for plcompose::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        e if e.is_io() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Collect(a) => commands::collect(a),
        Command::Filter(a) => commands::filter(a),
        Command::Aggregate(a) => commands::aggregate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Pipeline(a) => commands::pipeline(a),
        Command::ServeStub(a) => commands::serve_stub(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(StageError { stage, error }) => {
            eprintln!("error [{stage}]: {error}");
            ExitCode::from(exit_code(&error))
        }
    }
}
