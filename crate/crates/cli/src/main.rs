mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Generate watermarked corpora, train students and test them for
/// watermark radioactivity.
#[derive(Debug, Parser)]
#[command(name = "radioscope", version)]
pub struct Cli {
    /// Worker threads [default: all cores].
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// TOML file supplying defaults for flags; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a corpus from the teacher, optionally watermarked.
    Generate(GenerateArgs),
    /// Train (or continue training) an n-gram student.
    Train(TrainArgs),
    /// Collect the k-grams of a corpus into a filter file.
    BuildFilter(FilterArgs),
    /// Test a suspect model for radioactivity.
    Detect(DetectArgs),
    /// Membership-inference baseline without a watermark.
    Mia(MiaArgs),
    /// Run a scenario file and write results.csv and summary.svg.
    Scenario(ScenarioArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Kgw,
    Ak,
    Mpac,
}

fn parse_key(s: &str) -> Result<u64, String> {
    let v = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => s.parse(),
    };
    v.map_err(|_| "expected a decimal or 0x-prefixed hexadecimal 64-bit integer".to_string())
}

#[derive(Debug, Clone, Args)]
pub struct WatermarkArgs {
    /// Watermarking scheme [default: kgw].
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// Secret key; never written to any output.
    #[arg(long, env = "RADIOSCOPE_KEY", hide_env_values = true, value_parser = parse_key)]
    pub key: Option<u64>,
    /// Window size [default: 2].
    #[arg(long)]
    pub k: Option<usize>,
    /// Greenlist fraction [default: 0.25].
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Logit bias [default: 3.0]; not used by `ak`.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Logit temperature of the `ak` scheme [default: 1.0].
    #[arg(long)]
    pub ak_temperature: Option<f64>,
    /// Message bits for `mpac`, e.g. 10110010.
    #[arg(long)]
    pub message: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct TeacherArgs {
    /// Vocabulary size [default: 256].
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Seed of the synthetic source the teacher is fitted on [default: 0].
    #[arg(long)]
    pub source_seed: Option<u64>,
    /// Zipf exponent of the source [default: 1.0].
    #[arg(long)]
    pub source_exponent: Option<f64>,
    /// Source documents the teacher is fitted on [default: 2000].
    #[arg(long)]
    pub teacher_docs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct SamplingArgs {
    /// Sampling temperature; 0 is greedy [default: 0.8].
    #[arg(long)]
    pub temp: Option<f64>,
    /// Nucleus mass [default: 0.95].
    #[arg(long)]
    pub nucleus_p: Option<f64>,
    /// Sampling seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub wm: WatermarkArgs,
    #[command(flatten)]
    pub teacher: TeacherArgs,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Write unwatermarked text.
    #[arg(long)]
    pub no_watermark: bool,
    /// Number of documents [default: 1000].
    #[arg(long)]
    pub docs: Option<usize>,
    /// Tokens per document [default: 256].
    #[arg(long)]
    pub doc_len: Option<usize>,
    /// Output directory; receives corpus.jsonl.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSONL corpora to train on.
    #[arg(long, required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    /// Continue training this model instead of starting from scratch.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// n-gram order [default: 3].
    #[arg(long)]
    pub order: Option<usize>,
    /// Add-lambda smoothing [default: 0.01].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Vocabulary size [default: 256].
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Watermark window size the student is meant to absorb [default: 2].
    #[arg(long)]
    pub k: Option<usize>,
    /// Output directory; receives model.rsm.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FilterSourceArg {
    /// Outputs known to have been handed to the suspect.
    Supervised,
    /// Freshly generated watermarked text.
    Fresh,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    /// Window size [default: 2].
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum, default_value = "supervised")]
    pub source: FilterSourceArg,
    /// Output directory; receives filter.rsf.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Open,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SupervisionArg {
    Supervised,
    Unsupervised,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Open: read the texts through the suspect. Closed: let the suspect
    /// complete prompts taken from the texts [default: open].
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Local suspect model (model.rsm).
    #[arg(long, conflicts_with = "endpoint", required_unless_present = "endpoint")]
    pub model: Option<PathBuf>,
    /// Remote suspect endpoint.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Bearer token for the endpoint.
    #[arg(long, env = "RADIOSCOPE_API_TOKEN", hide_env_values = true)]
    pub api_token: Option<String>,
    /// Watermarked texts (JSONL).
    #[arg(long)]
    pub texts: PathBuf,
    #[command(flatten)]
    pub wm: WatermarkArgs,
    /// Vocabulary size; required with --endpoint.
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Detector knowledge [default: unsupervised].
    #[arg(long, value_enum)]
    pub supervision: Option<SupervisionArg>,
    /// Filter file; closed mode only.
    #[arg(long)]
    pub filter: Option<PathBuf>,
    /// Cap on scored tuples per repetition.
    #[arg(long)]
    pub budget: Option<u64>,
    /// Split the texts into this many disjoint chunks, one test each
    /// [default: 1].
    #[arg(long)]
    pub repetitions: Option<usize>,
    /// Score every tuple. The p-value is then NOT valid.
    #[arg(long)]
    pub no_dedup: bool,
    /// Prompt tokens taken from each text in closed mode [default: 64].
    #[arg(long)]
    pub prompt_len: Option<usize>,
    /// Completion tokens in closed mode [default: 192].
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// In-context copy probability of a local suspect [default: 0.6].
    #[arg(long)]
    pub copy_prob: Option<f64>,
    /// Tokens a copy must match [default: 2].
    #[arg(long)]
    pub copy_len: Option<usize>,
    /// Documents per entry of per_chunk [default: 100].
    #[arg(long)]
    pub chunk_docs: Option<usize>,
    /// Output directory; receives report.json and results.csv.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct MiaArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Documents suspected to be in the training data.
    #[arg(long)]
    pub candidates: PathBuf,
    /// Documents known not to be.
    #[arg(long)]
    pub fresh: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    /// No tuple could be scored.
    Inconclusive,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Inconclusive) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
