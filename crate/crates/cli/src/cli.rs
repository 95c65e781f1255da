use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use prefrank_core::emotion::Emotion;
use prefrank_core::face::DEFAULT_DOF;

#[derive(Debug, Parser)]
#[command(name = "prefrank", version, about = "Pairwise preference ranking and optimization of parametric faces")]
#[command(args_override_self = true)]
pub struct Cli {
    /// TOML or JSON file whose keys mirror the flags; top-level keys set the
    /// global options, a table named after a subcommand sets its options.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root for every default input and output path.
    #[arg(long, global = true, env = "PREFRANK_DATA_DIR", default_value = "data")]
    pub data_dir: PathBuf,
    /// Actuator count of the face simulator.
    #[arg(long, global = true, default_value_t = DEFAULT_DOF)]
    pub dof: usize,
    /// Seed of the face simulator's hidden expression directions.
    #[arg(long, global = true, default_value_t = 0)]
    pub sim_seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a candidate pool: faces visited by BO on the hidden intensity plus Sobol fillers.
    #[command(args_override_self = true)]
    GenPool(GenPoolArgs),
    /// Pick the most mutually distant images and list their pairs.
    #[command(args_override_self = true)]
    Select(SelectArgs),
    /// Rank the subset, either with the simulator as annotator or through the web service.
    #[command(args_override_self = true)]
    Annotate(AnnotateArgs),
    /// Cross-validate and fit one preference model per emotion.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Search actuator space for the strongest expression under a trained model.
    #[command(args_override_self = true)]
    Optimize(OptimizeArgs),
    /// Summarize cross-validation and optimization results.
    #[command(args_override_self = true)]
    Report(ReportArgs),
    /// Run the annotation service.
    #[command(args_override_self = true)]
    Serve(ServeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenPool(_) => "gen-pool",
            Command::Select(_) => "select",
            Command::Annotate(_) => "annotate",
            Command::Train(_) => "train",
            Command::Optimize(_) => "optimize",
            Command::Report(_) => "report",
            Command::Serve(_) => "serve",
        }
    }
}

#[derive(Debug, Args)]
pub struct EmotionArgs {
    #[arg(long)]
    pub emotion: Option<Emotion>,
    /// Loop over all six target emotions.
    #[arg(long, conflicts_with = "emotion")]
    pub all_emotions: bool,
}

impl EmotionArgs {
    pub fn targets(&self) -> Result<Vec<Emotion>, UsageError> {
        match (self.emotion, self.all_emotions) {
            (_, true) => Ok(Emotion::TARGETS.to_vec()),
            (Some(e), false) if Emotion::TARGETS.contains(&e) => Ok(vec![e]),
            (Some(e), false) => Err(UsageError(format!("{e} is not a target emotion"))),
            (None, false) => Err(UsageError("pass --emotion or --all-emotions".into())),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenPoolArgs {
    #[arg(long, default_value_t = 500)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Share of the pool taken from BO runs on the hidden intensity.
    #[arg(long, default_value_t = 0.5)]
    pub bo_fraction: f64,
    /// Evaluations per BO run.
    #[arg(long, default_value_t = 60)]
    pub bo_budget: usize,
    /// Output directory [default: DATA_DIR].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Pool manifest [default: DATA_DIR/pool.jsonl].
    #[arg(long)]
    pub pool: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    /// Output directory [default: the pool's directory].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Synthetic,
    Human,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[arg(long, value_enum, default_value_t = Mode::Synthetic)]
    pub mode: Mode,
    #[command(flatten)]
    pub emotions: EmotionArgs,
    #[arg(long, default_value = "synthetic")]
    pub annotator: String,
    /// Shuffle seed of the merge sort.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Subset manifest [default: DATA_DIR/subset.jsonl].
    #[arg(long)]
    pub subset: Option<PathBuf>,
    /// Session directory [default: DATA_DIR/sessions].
    #[arg(long)]
    pub sessions_dir: Option<PathBuf>,
    /// Continue an unfinished session file instead of refusing to touch it.
    #[arg(long)]
    pub resume: bool,
    /// Address of the service in human mode.
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    /// Static UI bundle served by the service in human mode.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub emotions: EmotionArgs,
    /// Subset manifest [default: DATA_DIR/subset.jsonl].
    #[arg(long)]
    pub subset: Option<PathBuf>,
    /// Session files [default: every DATA_DIR/sessions/session-*-EMOTION.jsonl].
    #[arg(long, num_args = 1..)]
    pub sessions: Vec<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0.005)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 30)]
    pub patience: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    /// Multiplier on the score difference inside the pair sigmoid.
    #[arg(long, default_value_t = 10.0)]
    pub sigmoid_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory [default: DATA_DIR/models].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Model checkpoint [default: DATA_DIR/models/model-EMOTION.json].
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub emotions: EmotionArgs,
    #[arg(long, default_value_t = 300)]
    pub budget: usize,
    /// Sobol points evaluated before the GP takes over.
    #[arg(long, default_value_t = 20)]
    pub init: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of runs, with seeds SEED, SEED+1, ...
    #[arg(long, default_value_t = 1)]
    pub runs: u64,
    /// Output directory [default: DATA_DIR/runs].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run summaries or directories holding them [default: DATA_DIR/runs].
    #[arg(long, num_args = 1..)]
    pub runs: Vec<PathBuf>,
    /// Directory with cross-validation reports [default: DATA_DIR/models].
    #[arg(long)]
    pub models: Option<PathBuf>,
    /// Output directory [default: DATA_DIR].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Pool or subset manifest [default: DATA_DIR/subset.jsonl].
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Session directory [default: DATA_DIR/sessions].
    #[arg(long)]
    pub sessions_dir: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

/// Bad or missing arguments discovered after parsing; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}
