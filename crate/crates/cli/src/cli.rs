use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use url::Url;

use al_core::augment::Split;
use al_core::rounds::{OracleKind, Phase, RoundMode};
use al_core::sampler::Strategy;
use al_core::{Label, Pool};

/// Parse a snake_case enum name through its serde representation.
fn snake<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "al",
    version,
    about = "Active-learning workbench for rare-class triage notes"
)]
pub struct Cli {
    /// Project store directory.
    #[arg(long, short = 'p', global = true, default_value = ".")]
    pub project: PathBuf,

    /// Event timestamps: wall clock, or seq-derived for reproducible logs.
    #[arg(long, global = true, value_enum, default_value_t = ClockArg::System)]
    pub clock: ClockArg,

    /// Print what a mutating command would do and exit without writing.
    #[arg(long, global = true)]
    pub dry_run: bool,

    /// Train and predict through a remote classifier backend.
    #[arg(long, global = true)]
    pub backend_url: Option<Url>,

    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClockArg {
    System,
    Logical,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a project store from a project config (TOML).
    Init {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Preprocess and add records from a JSONL file.
    Ingest {
        file: PathBuf,
        /// Override the pool recorded in the file.
        #[arg(long, value_parser = snake::<Pool>)]
        pool: Option<Pool>,
    },
    /// Preprocess a JSONL file and split it with the keyword rules.
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        rejected: Option<PathBuf>,
        /// Rule set (TOML); defaults to the project's, then the starter set.
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Extra regex patterns stripped before filtering.
        #[arg(long = "strip")]
        strip: Vec<String>,
    },
    /// Embed the clean text of a JSONL file.
    Embed {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Embedder spec (TOML); defaults to the project's.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    #[command(subcommand)]
    Topics(TopicsCommand),
    #[command(subcommand)]
    Sample(SampleCommand),
    #[command(subcommand)]
    Labels(LabelsCommand),
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Run the training and checkpoint-selection phases of the current round.
    Train,
    /// Score the unlabeled pools and build the query queue, or score a file
    /// with one checkpoint.
    Predict(PredictArgs),
    #[command(subcommand)]
    Augment(AugmentCommand),
    #[command(subcommand)]
    Round(RoundCommand),
    #[command(subcommand)]
    Eval(EvalCommand),
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Scripted end-to-end run with the simulated oracle.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to --project.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum TopicsCommand {
    /// Cluster the focused pool and write a topic model file.
    Build {
        #[arg(long, default_value_t = 30)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        top_n: usize,
    },
    /// Merge topics of a model file down to `--to`.
    Reduce {
        #[arg(long)]
        to: usize,
        /// Model file; defaults to the newest one.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        top_n: usize,
    },
    /// Flag target topics and record the model in the project.
    Flag(FlagArgs),
    /// Print topic sizes, flags and keywords.
    Show {
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct FlagArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Probed positive share at which a topic is flagged.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Probe each topic against a sealed oracle key.
    #[arg(long, conflicts_with = "topics")]
    pub oracle_key: Option<PathBuf>,
    #[arg(long, default_value_t = 15)]
    pub per_topic: usize,
    /// Flag these topic indices directly.
    #[arg(long, value_delimiter = ',')]
    pub topics: Vec<usize>,
}

#[derive(Debug, Subcommand)]
pub enum SampleCommand {
    /// Draw the diversity seed batch from the recorded topic model.
    Seed {
        #[arg(long)]
        total: usize,
        #[arg(long, default_value_t = 0.6)]
        target_share: f64,
        #[arg(long, default_value_t = 3)]
        floor: usize,
        #[arg(long)]
        cap: Option<usize>,
    },
    /// Preview uncertain negatives from the current round's predictions.
    Uncertain(PreviewArgs),
    /// Preview positive predictions.
    Positives(PreviewArgs),
    /// Preview keyword-matching negatives (likely false negatives).
    Fn(PreviewArgs),
}

#[derive(Debug, Args)]
pub struct PreviewArgs {
    /// Negative-class confidence threshold; defaults to the project's.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_parser = snake::<Pool>, default_value = "focused")]
    pub pool: Pool,
    /// Write the batch here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum LabelsCommand {
    /// Submit labels from a JSONL file of {record_id, label, oracle_id[, oracle_kind]}.
    Submit {
        #[arg(long)]
        file: PathBuf,
        /// Only accept records in this batch.
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Label every outstanding queue item from a sealed oracle key.
    Simulate {
        #[arg(long)]
        oracle_key: PathBuf,
        #[arg(long, default_value = "sim")]
        oracle_id: String,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Only label records in this batch.
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Submit one label.
    Set {
        #[arg(long)]
        record: String,
        #[arg(long, value_parser = snake::<Label>)]
        label: Label,
        #[arg(long)]
        oracle_id: String,
        #[arg(long, value_parser = snake::<OracleKind>, default_value = "human")]
        kind: OracleKind,
    },
    /// List labels awaiting adjudication.
    Conflicts,
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Create dataset version 1 from the labeled seed batch.
    Seed {
        #[arg(long, default_value_t = 0.2)]
        validation_share: f64,
    },
    /// Print split counts of every version.
    Show,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Score with this checkpoint instead of advancing the round.
    #[arg(long, requires_all = ["input", "output"])]
    pub checkpoint: Option<String>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum AugmentCommand {
    /// Remove the vaccine-reaction span from a positive.
    FlipNeg {
        #[arg(long)]
        id: String,
        #[arg(long)]
        span: String,
        #[arg(long, value_parser = snake::<Split>, default_value = "train")]
        split: Split,
    },
    /// Insert a vaccine-reaction span into a negative at token `--pos`.
    FlipPos {
        #[arg(long)]
        id: String,
        #[arg(long)]
        span: String,
        #[arg(long)]
        pos: usize,
        #[arg(long, value_parser = snake::<Split>, default_value = "train")]
        split: Split,
    },
}

#[derive(Debug, Subcommand)]
pub enum RoundCommand {
    /// Start the next round on the newest dataset version.
    Start {
        #[arg(long, value_parser = snake::<RoundMode>, default_value = "from_scratch")]
        mode: RoundMode,
        /// Round options (TOML); flags below override it.
        #[arg(long)]
        options: Option<PathBuf>,
        #[arg(long)]
        max_per_batch: Option<usize>,
        #[arg(long)]
        validation_share: Option<f64>,
        #[arg(long)]
        deployment_train_share: Option<f64>,
    },
    /// Run the current phase and move on, once or until `--until`.
    Advance {
        #[arg(long, value_parser = snake::<Phase>)]
        until: Option<Phase>,
    },
    /// Print the project status.
    Status,
    /// Print the outstanding queue.
    Queue {
        #[arg(long, value_parser = snake::<Strategy>)]
        strategy: Option<Strategy>,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Print a round's metrics, or record and print the model comparison.
    Report {
        #[arg(long, conflicts_with = "compare")]
        round: Option<u32>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        compare: bool,
        #[arg(long)]
        json: bool,
    },
    /// Review a month of deployment notes with one checkpoint.
    Audit {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        oracle_key: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Write focused.jsonl, deployment.jsonl and oracle_key.json.
    Generate {
        /// Corpus spec (TOML); unset fields take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        n_focused: Option<usize>,
        #[arg(long)]
        n_deployment: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the desk-scale pipeline config as TOML.
    Config,
}
