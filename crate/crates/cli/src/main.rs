mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use seqplace::evaluation::{BenchConfig, DEFAULT_THRESHOLD_M};
use seqplace::features::SyntheticWorldConfig;
use seqplace::heads::DEFAULT_ALPHA;
use seqplace::training::TrainConfig;
use seqplace::{Error, ErrorCategory};

use config::{Overrides, RunConfig};

/// Sequential descriptors for place recognition: generate synthetic worlds,
/// train fusion heads, index, query, evaluate and benchmark.
#[derive(Debug, Parser)]
#[command(name = "seqplace", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic world with train, val and test splits.
    Generate(GenerateArgs),
    /// Train a fusion head with triplet loss and hard-negative mining.
    Train(TrainArgs),
    /// Describe a database split and write a retrieval index.
    Index(IndexArgs),
    /// Retrieve the nearest database sequences for each query.
    Query(QueryArgs),
    /// Score retrievals against geography and report recall@N.
    Evaluate(EvaluateArgs),
    /// Time exhaustive kNN search as the database grows.
    Bench(BenchArgs),
    /// Frame-reversal and sequence-length studies.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run config; flags given on the command line win over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = SyntheticWorldConfig::default().n_landmarks)]
    n_landmarks: usize,
    #[arg(long, default_value_t = SyntheticWorldConfig::default().landmark_dim)]
    landmark_dim: usize,
    #[arg(long, default_value_t = SyntheticWorldConfig::default().route_length_m)]
    route_length_m: f64,
    #[arg(long, default_value_t = SyntheticWorldConfig::default().seq_len)]
    seq_len: usize,
    #[arg(long, default_value_t = SyntheticWorldConfig::default().grid_h)]
    grid_h: usize,
    #[arg(long, default_value_t = SyntheticWorldConfig::default().grid_w)]
    grid_w: usize,
    #[arg(long, default_value_t = SyntheticWorldConfig::default().noise_sigma)]
    noise_sigma: f64,
    #[arg(long, default_value_t = SyntheticWorldConfig::default().domain_shift_sigma)]
    domain_shift_sigma: f64,
    #[arg(long, default_value_t = SyntheticWorldConfig::default().query_stride)]
    query_stride: usize,
}

#[derive(Debug, Args)]
struct HeadArgs {
    /// Head to train: seqvlad, cat, fc or tconv.
    #[arg(long, default_value = "seqvlad")]
    head: String,
    /// SeqVLAD clusters K.
    #[arg(long, default_value_t = 64)]
    clusters: usize,
    /// SeqVLAD soft-assignment sharpness used at initialization.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// FC output dimension.
    #[arg(long, default_value_t = 4096)]
    out_dim: usize,
    /// Temporal convolution width.
    #[arg(long, default_value_t = 3)]
    tconv_width: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by `generate`.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    head: HeadArgs,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().margin)]
    margin: f64,
    #[arg(long, default_value_t = TrainConfig::default().max_epochs)]
    max_epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().patience)]
    patience: usize,
    #[arg(long, default_value_t = TrainConfig::default().epoch_queries)]
    epoch_queries: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().negatives)]
    negatives: usize,
    #[arg(long, default_value_t = TrainConfig::default().cache_size)]
    cache_size: usize,
}

#[derive(Debug, Args)]
struct IndexArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by `generate`.
    #[arg(long)]
    data: PathBuf,
    /// Head checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split whose database is indexed.
    #[arg(long, default_value = "test")]
    split: String,
    /// Reduce descriptors to this many PCA dimensions, fitted on the train database.
    #[arg(long)]
    pca: Option<usize>,
    /// Whiten the PCA projection.
    #[arg(long, default_value_t = false)]
    whiten: bool,
}

#[derive(Debug, Args)]
struct Retrieval {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    data: PathBuf,
    /// Head checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Index file written by `index`.
    #[arg(long)]
    index: PathBuf,
    /// PCA model written by `index --pca`.
    #[arg(long)]
    pca: Option<PathBuf>,
    /// Split whose queries are used.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    retrieval: Retrieval,
    /// Neighbours returned per query.
    #[arg(long, default_value_t = 20)]
    top_n: usize,
    /// Only this query sequence.
    #[arg(long)]
    query_id: Option<String>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    retrieval: Retrieval,
    /// Recall cutoffs.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 5, 10, 20])]
    ns: Vec<usize>,
    /// Correct-match distance in meters.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD_M)]
    threshold_m: f64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',', default_values_t = BenchConfig::default().sizes)]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = BenchConfig::default().dims)]
    dims: Vec<usize>,
    #[arg(long, default_value_t = BenchConfig::default().warmup)]
    warmup: usize,
    #[arg(long, default_value_t = BenchConfig::default().measured)]
    measured: usize,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    #[command(flatten)]
    common: Common,
    /// reverse or length.
    #[arg(value_parser = ["reverse", "length"])]
    kind: String,
    /// Dataset directory written by `generate`.
    #[arg(long)]
    data: PathBuf,
    /// Head checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to run the study on.
    #[arg(long, default_value = "test")]
    split: String,
    /// Sequence lengths for the length study.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 3, 5, 7, 9])]
    lengths: Vec<usize>,
}

fn exit_code(c: ErrorCategory) -> u8 {
    match c {
        ErrorCategory::Config => 2,
        ErrorCategory::Io => 3,
        ErrorCategory::Shape => 4,
        ErrorCategory::Numerical => 5,
    }
}

fn init_threads() -> seqplace::Result<()> {
    let Ok(v) = std::env::var("SEQPLACE_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("SEQPLACE_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run() -> seqplace::Result<()> {
    init_threads()?;
    let matches = Cli::command().get_matches();
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    let flags = Overrides(sub);
    match cli.command {
        Command::Generate(a) => {
            let mut cfg = RunConfig::load(a.common.config.as_deref())?;
            let w = &mut cfg.world;
            flags.set("seed", &mut w.seed);
            flags.set("n_landmarks", &mut w.n_landmarks);
            flags.set("landmark_dim", &mut w.landmark_dim);
            flags.set("route_length_m", &mut w.route_length_m);
            flags.set("seq_len", &mut w.seq_len);
            flags.set("grid_h", &mut w.grid_h);
            flags.set("grid_w", &mut w.grid_w);
            flags.set("noise_sigma", &mut w.noise_sigma);
            flags.set("domain_shift_sigma", &mut w.domain_shift_sigma);
            flags.set("query_stride", &mut w.query_stride);
            commands::generate(&cfg.world, &a.common.out)
        }
        Command::Train(a) => {
            let mut cfg = RunConfig::load(a.common.config.as_deref())?;
            let t = &mut cfg.train;
            flags.set("seed", &mut t.seed);
            flags.set("lr", &mut t.lr);
            flags.set("margin", &mut t.margin);
            flags.set("max_epochs", &mut t.max_epochs);
            flags.set("patience", &mut t.patience);
            flags.set("epoch_queries", &mut t.epoch_queries);
            flags.set("batch_size", &mut t.batch_size);
            flags.set("negatives", &mut t.negatives);
            flags.set("cache_size", &mut t.cache_size);
            apply_head_flags(&flags, &mut cfg);
            commands::train(&cfg, &a.data, &a.common.out)
        }
        Command::Index(a) => {
            RunConfig::load(a.common.config.as_deref())?;
            let job = commands::IndexJob {
                data: &a.data,
                checkpoint: &a.checkpoint,
                split: a.split.parse()?,
                pca: a.pca,
                whiten: a.whiten,
            };
            commands::index(&job, &a.common.out)
        }
        Command::Query(a) => {
            RunConfig::load(a.common.config.as_deref())?;
            commands::query(&a.retrieval.job()?, a.top_n, a.query_id.as_deref(), &a.common.out)
        }
        Command::Evaluate(a) => {
            let mut cfg = RunConfig::load(a.common.config.as_deref())?;
            flags.set_list("ns", &mut cfg.eval.ns);
            flags.set("threshold_m", &mut cfg.eval.threshold_m);
            commands::evaluate(&a.retrieval.job()?, &cfg.eval.eval_config(), &a.common.out)
        }
        Command::Bench(a) => {
            let mut cfg = RunConfig::load(a.common.config.as_deref())?;
            flags.set_list("sizes", &mut cfg.bench.sizes);
            flags.set_list("dims", &mut cfg.bench.dims);
            flags.set("warmup", &mut cfg.bench.warmup);
            flags.set("measured", &mut cfg.bench.measured);
            let seed = if flags.given("seed") { a.common.seed } else { BenchConfig::default().seed };
            commands::bench(&cfg.bench_config(seed), &a.common.out)
        }
        Command::Experiment(a) => {
            let mut cfg = RunConfig::load(a.common.config.as_deref())?;
            flags.set_list("lengths", &mut cfg.eval.lengths);
            let job = commands::ExperimentJob {
                data: &a.data,
                checkpoint: &a.checkpoint,
                split: a.split.parse()?,
            };
            match a.kind.as_str() {
                "reverse" => commands::experiment_reverse(&job, &cfg, &a.common.out),
                _ => commands::experiment_length(&job, &cfg, &a.common.out),
            }
        }
    }
}

fn apply_head_flags(flags: &Overrides<'_>, cfg: &mut RunConfig) {
    let h = &mut cfg.head;
    flags.set("head", &mut h.kind);
    flags.set("clusters", &mut h.clusters);
    flags.set("alpha", &mut h.alpha);
    flags.set("out_dim", &mut h.out_dim);
    flags.set("tconv_width", &mut h.tconv_width);
}

impl Retrieval {
    fn job(&self) -> seqplace::Result<commands::RetrievalJob<'_>> {
        Ok(commands::RetrievalJob {
            data: &self.data,
            checkpoint: &self.checkpoint,
            index: &self.index,
            pca: self.pca.as_deref(),
            split: self.split.parse()?,
        })
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(exit_code(e.category()))
        }
    }
}
