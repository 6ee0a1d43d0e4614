//! `expforce` command-line tool.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use expforce_core::predictors::BackendKind;

use crate::config::{Overrides, RunConfig, CONFIG_ENV};

#[derive(Debug, Parser)]
#[command(name = "expforce", version, about = "Experience-conditioned grasp force prediction", long_about = None)]
pub struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML run configuration
    #[arg(long, global = true, env = CONFIG_ENV, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Run seed (folds, synthesis, random experiences)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Maximum concurrent model/embedding requests
    #[arg(long, global = true, value_name = "N")]
    concurrency: Option<usize>,
    /// Embedding cache directory
    #[arg(long, global = true, value_name = "DIR")]
    cache_dir: Option<PathBuf>,
    /// Disable the embedding cache even if the config sets one
    #[arg(long, global = true)]
    no_cache: bool,
    /// Directory with replacement prompt templates
    #[arg(long, global = true, value_name = "DIR")]
    templates_dir: Option<PathBuf>,
    /// Leave the gripper description out of prompts
    #[arg(long, global = true)]
    no_embodiment: bool,
    /// More log output (-v per-query lines, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

/// Backend selection shared by the prediction commands.
#[derive(Debug, Args, Clone)]
struct BackendArgs {
    /// exp-force, zero-shot, knn-average or random-exp
    #[arg(long)]
    backend: Option<BackendKind>,
    /// Number of retrieved experiences
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Experience pool utilities
    Pool {
        #[command(subcommand)]
        command: PoolCommand,
    },
    /// Generate a synthetic pool with simulated ground-truth forces
    SynthPool {
        /// Number of objects
        #[arg(long)]
        n: usize,
        /// Output pool directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Embed every pool record (fills the cache)
    Embed {
        #[arg(long, value_name = "DIR")]
        pool: PathBuf,
        /// Also write `{id: vector}` JSON here
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Show the top-k experiences for a query
    Retrieve {
        #[arg(long, value_name = "DIR")]
        pool: PathBuf,
        #[command(flatten)]
        query: QueryArgs,
        #[arg(long, default_value_t = 7)]
        k: usize,
    },
    /// Ask the descriptor model to describe an image
    Describe {
        #[arg(long, value_name = "FILE")]
        image: PathBuf,
    },
    /// Predict the grasp force for one object
    Predict {
        #[arg(long, value_name = "DIR")]
        pool: PathBuf,
        #[command(flatten)]
        query: QueryArgs,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Cross-validated evaluation
    Eval {
        #[command(subcommand)]
        command: EvalCommand,
    },
    /// Re-render report files from a saved report.json or sweep.json
    Report {
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum PoolCommand {
    /// Check schema, ids and image references
    Validate {
        #[arg(value_name = "DIR")]
        dir: PathBuf,
    },
}

#[derive(Debug, Args, Clone)]
struct QueryArgs {
    /// Use this pool record as the query (it is excluded from retrieval)
    #[arg(long, conflicts_with = "query_image", required_unless_present = "query_image")]
    query_id: Option<String>,
    /// Image of a new object
    #[arg(long, value_name = "FILE")]
    query_image: Option<PathBuf>,
    /// Description of the new object; asked from the descriptor model if absent
    #[arg(long, requires = "query_image")]
    description: Option<String>,
}

#[derive(Debug, Args, Clone)]
struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    pool: PathBuf,
    /// Output directory for report files
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long)]
    backend: Option<BackendKind>,
    #[arg(long)]
    folds: Option<usize>,
    /// Describe queries with the descriptor model instead of stored descriptions
    #[arg(long)]
    describe_queries: bool,
    /// Exit non-zero when any query failed
    #[arg(long)]
    strict: bool,
}

#[derive(Debug, Subcommand)]
enum EvalCommand {
    /// One cross-validation at a fixed k
    Cv {
        #[command(flatten)]
        args: EvalArgs,
        #[arg(long)]
        k: Option<usize>,
    },
    /// One cross-validation per k on shared folds and embeddings
    SweepK {
        #[command(flatten)]
        args: EvalArgs,
        /// Comma-separated k values
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
}

fn overrides(cli: &Cli) -> Overrides {
    let g = &cli.global;
    let mut o = Overrides {
        seed: g.seed,
        concurrency_limit: g.concurrency,
        cache_dir: g.cache_dir.clone(),
        no_cache: g.no_cache,
        templates_dir: g.templates_dir.clone(),
        no_embodiment: g.no_embodiment,
        ..Overrides::default()
    };
    match &cli.command {
        Command::Predict { backend, .. } => {
            o.backend = backend.backend;
            o.k = backend.k;
        }
        Command::Eval { command } => {
            let args = match command {
                EvalCommand::Cv { args, k } => {
                    o.k = *k;
                    args
                }
                EvalCommand::SweepK { args, .. } => args,
            };
            o.backend = args.backend;
            o.n_folds = args.folds;
            o.describe_queries = args.describe_queries;
        }
        _ => {}
    }
    o
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.global.verbose);
    let result = RunConfig::load(cli.global.config.as_deref(), &overrides(&cli)).and_then(|cfg| {
        println!("config fingerprint: {}", cfg.fingerprint());
        commands::run(&cli.command, &cfg)
    });
    match result {
        Ok(commands::Status::Clean) => ExitCode::SUCCESS,
        Ok(commands::Status::QueryFailures(n)) => {
            eprintln!("error: {n} queries failed (--strict)");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
