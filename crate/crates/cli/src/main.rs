use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latent_reco::bouchard::DEFAULT_EM_ITERS;
use latent_reco::encoder::EncoderKind;
use latent_reco::metrics::{DcgMode, DEFAULT_METRIC_K};
use latent_reco::predict::DEFAULT_MC_SAMPLES;
use latent_reco::simulator::LengthSpec;
use latent_reco::trainer::BoundKind;
use serde::Serialize;

mod commands;

/// Latent-variable session recommender: simulate sessions, train item
/// embeddings with amortized variational inference, infer user states and
/// predict and evaluate next views.
#[derive(Debug, Parser)]
#[command(name = "latent-reco", version)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw sessions from a random or given ground-truth model.
    Simulate(SimulateArgs),
    /// Split a session file into train and test files by whole sessions.
    Split(SplitArgs),
    /// Train item parameters and an encoder.
    Train(TrainArgs),
    /// Fit a posterior to each session by EM and print it.
    Infer(InferArgs),
    /// Rank next-item candidates for each session.
    Predict(PredictArgs),
    /// Score baselines and latent models by leave-last-out RC@K and DCG@K.
    Eval(EvalArgs),
    /// Run the seven-product example histories.
    CaseStudy(CaseStudyArgs),
}

#[derive(Debug, Args, Serialize)]
struct SimulateArgs {
    #[arg(long, default_value_t = 20)]
    num_items: usize,
    /// Latent dimension of the random ground truth.
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 100)]
    sessions: usize,
    /// Session length: `N` or `poisson:LAMBDA` (Poisson plus one).
    #[arg(long, default_value = "10")]
    length: LengthSpec,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Standard deviation of random embedding entries.
    #[arg(long, default_value_t = 1.0)]
    psi_scale: f64,
    /// Standard deviation of random popularity shifts.
    #[arg(long, default_value_t = 0.5)]
    rho_scale: f64,
    /// Use this parameter file instead of a random ground truth.
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    /// Session CSV to write.
    #[arg(long, default_value = "sessions.csv")]
    out: PathBuf,
    /// Where to write the ground-truth parameters.
    #[arg(long, default_value = "ground_truth.txt")]
    params_out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct SplitArgs {
    #[arg(long, default_value = "sessions.csv")]
    data: PathBuf,
    /// Number of items in the catalog (default: largest id + 1).
    #[arg(long)]
    num_items: Option<usize>,
    /// Keep only the N most viewed items, re-indexed by popularity.
    #[arg(long)]
    top_items: Option<usize>,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "train.csv")]
    train_out: PathBuf,
    #[arg(long, default_value = "test.csv")]
    test_out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long, default_value = "sessions.csv")]
    data: PathBuf,
    #[arg(long)]
    num_items: Option<usize>,
    /// JSON training config; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `bouchard` or `reparam`.
    #[arg(long)]
    bound: Option<BoundKind>,
    /// `linear_bouchard`, `linear_gaussian` or `deep_gaussian`.
    #[arg(long)]
    encoder: Option<EncoderKind>,
    /// Latent dimension.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Noise draws per session for the reparameterized bound.
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluate batches sequentially.
    #[arg(long)]
    deterministic: bool,
    /// Model file; `.json` selects the JSON form.
    #[arg(long, default_value = "model.txt")]
    out: PathBuf,
    #[arg(long, default_value = "encoder.json")]
    encoder_out: PathBuf,
    /// Per-epoch mean objective as CSV.
    #[arg(long, default_value = "loss.csv")]
    loss_out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct InferArgs {
    #[arg(long, default_value = "model.txt")]
    model: PathBuf,
    #[arg(long, default_value = "sessions.csv")]
    data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EM_ITERS)]
    em_iters: usize,
    /// Output file (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
enum LatentArg {
    Em,
    Ae,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
enum MethodArg {
    Mc,
    Mean,
}

#[derive(Debug, Args, Serialize)]
struct PredictArgs {
    #[arg(long, default_value = "model.txt")]
    model: PathBuf,
    #[arg(long, default_value = "sessions.csv")]
    data: PathBuf,
    /// How each session's posterior is obtained.
    #[arg(long, value_enum, default_value_t = LatentArg::Em)]
    latent: LatentArg,
    /// Encoder file, required with `--latent ae`.
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MethodArg::Mc)]
    method: MethodArg,
    #[arg(long, default_value_t = DEFAULT_MC_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = DEFAULT_EM_ITERS)]
    em_iters: usize,
    /// Length of each ranked list.
    #[arg(long, default_value_t = DEFAULT_METRIC_K)]
    top: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
enum Algorithm {
    Pop,
    Itemknn,
    Lvm,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    /// Sessions the baselines are fitted on.
    #[arg(long, default_value = "sessions.csv")]
    train: PathBuf,
    #[arg(long, default_value = "sessions.csv")]
    test: PathBuf,
    #[arg(long)]
    num_items: Option<usize>,
    /// Methods to score, comma separated.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Algorithm::Pop, Algorithm::Itemknn, Algorithm::Lvm])]
    algorithm: Vec<Algorithm>,
    #[arg(long, default_value = "model.txt")]
    model: PathBuf,
    /// Encoder file; adds the AE rows for the latent model.
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Row label of the latent model (default: from the encoder kind).
    #[arg(long)]
    train_label: Option<String>,
    #[arg(long, default_value_t = DEFAULT_METRIC_K)]
    k_metric: usize,
    /// `binary` or `literal`.
    #[arg(long, default_value = "binary")]
    dcg: DcgMode,
    #[arg(long, default_value_t = DEFAULT_MC_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = DEFAULT_EM_ITERS)]
    em_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Score sessions sequentially.
    #[arg(long)]
    deterministic: bool,
    #[arg(long, default_value = "report.csv")]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct CaseStudyArgs {
    #[arg(long, default_value_t = DEFAULT_EM_ITERS)]
    em_iters: usize,
    /// Draws for the next-item distributions.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Lib(latent_reco::Error),
}

impl From<latent_reco::Error> for CliError {
    fn from(e: latent_reco::Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Lib(e) if e.is_data_error() => 2,
            CliError::Lib(e) if e.is_numeric_error() => 3,
            CliError::Lib(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => f.write_str(msg),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Split(a) => commands::split(&a),
        Command::Train(a) => commands::train(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::CaseStudy(a) => commands::case_study(&a),
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
