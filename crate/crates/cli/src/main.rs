use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

#[derive(Parser)]
#[command(name = "deqkg", version, about = "Doubly inductive link prediction on knowledge graphs")]
struct Cli {
    /// Worker threads. Computation is currently single-threaded; the value is
    /// recorded in run outputs.
    #[arg(long, global = true, env = "DEQKG_WORKERS", default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the grandparent tree benchmark (train and test bundles).
    GenFd2(GenFd2Args),
    /// Sample a connected subgraph from a triplet file.
    Sample(SampleArgs),
    /// Split a triplet file into observed, valid and test parts.
    Split(SplitArgs),
    /// Partition a triplet file by groups of relations.
    TopicSplit(TopicSplitArgs),
    /// Train an encoder on a dataset bundle.
    Train(TrainArgs),
    /// Rank test queries against sampled negatives.
    Eval(EvalArgs),
    /// Run a symmetry or oracle audit.
    Check(CheckArgs),
    /// Derive all triplets implied by Horn clauses.
    Uqer(UqerArgs),
}

#[derive(Args)]
pub struct GenFd2Args {
    /// Tree depths of the training graph.
    #[arg(long, value_delimiter = ',', default_value = "6")]
    pub train_depths: Vec<u32>,
    /// Tree depths of the test graph.
    #[arg(long, value_delimiter = ',', default_value = "6,6")]
    pub test_depths: Vec<u32>,
    /// Share of training queries held out for validation.
    #[arg(long, default_value_t = 0.1)]
    pub valid_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, clap::ValueEnum)]
pub enum SampleMethod {
    Bfs,
    ForestFire,
}

#[derive(Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "bfs")]
    pub method: SampleMethod,
    #[arg(long, default_value_t = 1000)]
    pub max_nodes: usize,
    #[arg(long, default_value_t = 10000)]
    pub max_triplets: usize,
    #[arg(long, default_value_t = 50)]
    pub max_per_node: usize,
    /// Node count for forest-fire sampling.
    #[arg(long)]
    pub target_nodes: Option<usize>,
    #[arg(long, default_value_t = 0.8)]
    pub burn_prob: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// `observed,valid,test` or `observed,test`.
    #[arg(long, value_delimiter = ',', default_value = "0.8,0.1,0.1")]
    pub ratios: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct TopicSplitArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// TOML file with `[[group]]` tables holding `name` and `relations`.
    #[arg(long)]
    pub groups: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    /// TOML run configuration. Flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset bundle directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seed for both initialisation and training.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub aggregation: Option<String>,
    #[arg(long)]
    pub inverse_mode: Option<String>,
    /// Drop the distance features.
    #[arg(long)]
    pub no_distance: bool,
    /// Epochs without validation improvement before stopping; 0 disables.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Continue from a checkpoint; epoch numbering carries on.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset bundle directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value = "node")]
    pub task: String,
    #[arg(long, default_value_t = 50)]
    pub num_negatives: usize,
    /// `all-others` or `with-replacement`.
    #[arg(long, default_value = "all-others")]
    pub relation_negatives: String,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub ks: Vec<usize>,
    #[arg(long)]
    pub filtered: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Score uniformly at random instead of with a checkpoint.
    #[arg(long)]
    pub random_scorer: bool,
    /// Accept test names that also occur in training.
    #[arg(long)]
    pub allow_overlap: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CheckArgs {
    /// invariance, equivariance, counterexample, deq-trend or uqer.
    pub what: String,
    /// Audit this checkpoint instead of a fresh encoder.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Tree depth for the clause check.
    #[arg(long, default_value_t = 3)]
    pub depth: u32,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct UqerArgs {
    /// Clause file; the tree-benchmark rule when omitted.
    #[arg(long)]
    pub clauses: Option<PathBuf>,
    /// Triplet file to derive from.
    #[arg(long, conflicts_with = "data")]
    pub graph: Option<PathBuf>,
    /// Bundle whose observed graph is used.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000_000)]
    pub budget: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenFd2(a) => commands::gen_fd2(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::Split(a) => commands::split(&a),
        Command::TopicSplit(a) => commands::topic_split(&a),
        Command::Train(a) => commands::train(&a, cli.workers),
        Command::Eval(a) => commands::eval(&a),
        Command::Check(a) => commands::check(&a),
        Command::Uqer(a) => commands::uqer(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
