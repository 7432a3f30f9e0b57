//! `pvlir`: command-line front end for every pipeline stage.
//!
//! Stages exchange line-delimited JSON files; vector files use the
//! tab-separated base64 format of the index module. Reports go to stdout as
//! JSON unless an output path is given.

mod commands;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "pvlir", version, about = "Weakly supervised PVLI dataset construction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Normalize statement pairs or captions.
    #[command(subcommand)]
    Normalize(NormalizeCmd),
    /// Keep records whose token length is within one standard deviation of the mean.
    LengthFilter(LengthFilterArgs),
    /// Apply the labeling functions to captions.
    Extract(ExtractArgs),
    /// Draw calibration samples and fold annotated samples into the LF table.
    #[command(subcommand)]
    Calibrate(CalibrateCmd),
    /// Summary reports.
    #[command(subcommand)]
    Report(ReportCmd),
    /// Write hashed embeddings for records with `id` and `text`.
    Embed(EmbedArgs),
    /// Build or query an exact nearest-neighbor index.
    #[command(subcommand)]
    Index(IndexCmd),
    /// Fuse per-space rankings with Copeland's method.
    Fuse(FuseArgs),
    /// Image querying through a fixture or live provider.
    #[command(subcommand)]
    Iq(IqCmd),
    /// Merge the three strategies into one deduplicated dataset.
    Assemble(AssembleArgs),
    /// Draw the tuning and noisy-test splits.
    Split(SplitArgs),
    /// Counterfactual (masked) variants.
    #[command(subcommand)]
    Cf(CfCmd),
    /// Score a prediction file against gold labels.
    Score(ScoreArgs),
    /// Human verification: serve the API, select the clean test set, compute agreement.
    #[command(subcommand)]
    Verify(VerifyCmd),
    /// Run every stage over a caption file, a statement-pair file and an image fixture file.
    Pipeline(PipelineArgs),
    /// Generate a synthetic corpus and run the pipeline over it.
    Demo(DemoArgs),
}

#[derive(Debug, Subcommand)]
enum NormalizeCmd {
    /// Statement-bank rows (`id`, `precondition`, `action`, `label`, `source`).
    Statements {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Accepted source tags, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "anion,atomic,paco")]
        sources: Vec<String>,
        /// Person spans from an external detector (`id`, `spans`).
        #[arg(long)]
        spans: Option<PathBuf>,
        #[arg(long)]
        rejects: Option<PathBuf>,
    },
    /// Raw captions (`id`, `text`, `image_ref`, `source`).
    Captions {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rejects: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum RecordKind {
    Statement,
    Caption,
}

#[derive(Debug, Args)]
struct LengthFilterArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "statement")]
    kind: RecordKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long)]
    captions: PathBuf,
    /// LF table; the bundled table when omitted.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Conjunction decisions from an external tagger (`caption_id`, `lf_name`, `conjunction`).
    #[arg(long)]
    pos: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum CalibrateCmd {
    Sample {
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        lf: String,
        #[arg(long, default_value_t = pvlir_core::lf_engine::DEFAULT_CALIBRATION_SIZE)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    Ingest {
        #[arg(long)]
        sample: PathBuf,
        /// Sampled instances with a `score` of 0 or 1.
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        table: Option<PathBuf>,
        /// Updated LF table.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum ReportCmd {
    /// Retention and allow share per precision threshold.
    Cumulative {
        #[arg(long)]
        instances: PathBuf,
        #[arg(long, default_value = "0.0:1.0:0.05")]
        thresholds: String,
    },
    /// LF match counts per caption source.
    Lf {
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        primary_only: bool,
    },
    /// Strategy, LF and caption-source distribution of a dataset.
    Dist {
        #[arg(long)]
        dataset: PathBuf,
        /// Caption dataset sizes, one `tag size` per line.
        #[arg(long)]
        sizes: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model_id: String,
    #[arg(long, default_value_t = 256)]
    dim: usize,
    #[arg(long, default_value_t = 3)]
    ngram: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum IndexCmd {
    /// Load and validate a vector file.
    Build {
        #[arg(long)]
        vectors: PathBuf,
    },
    /// Top-k captions for every query vector.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = pvlir_core::embed_index::DEFAULT_K)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct FuseArgs {
    /// Ranking files, one or more per encoder space.
    #[arg(long, required = true, num_args = 1..)]
    rankings: Vec<PathBuf>,
    #[arg(long, default_value_t = pvlir_core::embed_index::DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = pvlir_core::rank_fusion::DEFAULT_PERSISTENCE)]
    p: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum ProviderKind {
    Fixture,
    Live,
}

#[derive(Debug, Subcommand)]
enum IqCmd {
    Run {
        #[arg(long)]
        statements: PathBuf,
        #[arg(long, value_enum, default_value = "fixture")]
        provider: ProviderKind,
        /// Fixture file (`query`, `urls`) for the fixture provider.
        #[arg(long)]
        fixture: Option<PathBuf>,
        /// Search endpoint for the live provider.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, default_value_t = 1.0)]
        qps: f64,
        #[arg(long, default_value_t = pvlir_core::image_query::DEFAULT_N)]
        n: usize,
        /// Statement sources not to search, comma separated.
        #[arg(long, value_delimiter = ',')]
        exclude_sources: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        block_sites: Vec<String>,
        #[arg(long, default_value_t = 4)]
        max_in_flight: usize,
        /// Only search statements of this kind.
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rejects: Option<PathBuf>,
    },
    Stats {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, default_value_t = pvlir_core::image_query::DEFAULT_TOP_SITES)]
        top: usize,
    },
}

#[derive(Debug, Args)]
struct AssembleArgs {
    /// Normalized statements (needed to resolve CQ and IQ pairs).
    #[arg(long)]
    statements: PathBuf,
    #[arg(long)]
    extracted: Option<PathBuf>,
    #[arg(long)]
    fusion: Option<PathBuf>,
    /// Normalized captions referenced by the fusion file.
    #[arg(long)]
    captions: Option<PathBuf>,
    #[arg(long)]
    iq_results: Option<PathBuf>,
    #[arg(long, default_value_t = pvlir_core::lf_engine::DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Uncalibrated LFs to keep anyway.
    #[arg(long, value_delimiter = ',')]
    whitelist: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = pvlir_core::assembly::DEFAULT_TUNING)]
    tuning: usize,
    #[arg(long, default_value_t = pvlir_core::assembly::DEFAULT_NOISY_TEST)]
    noisy_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum CfCmd {
    Make {
        #[arg(long)]
        dataset: PathBuf,
        /// Variant kinds, comma separated; all four when omitted.
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Patch lattice as `ROWSxCOLS`.
        #[arg(long, default_value = "4x4")]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    /// Restrict gold to one split (`tuning`, `noisy_test`, `clean_test`).
    #[arg(long)]
    split: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Subcommand)]
enum VerifyCmd {
    Serve {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Registered annotator ids, one per line; anyone non-empty when omitted.
        #[arg(long)]
        annotators: Option<PathBuf>,
        /// Static files for the annotation UI.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
        /// Verify a seeded sample of this many instances instead of all.
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Mark instances with at least two correct votes as clean test.
    Select {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fleiss' kappa over complete units of a vote log.
    Kappa {
        #[arg(long)]
        log: PathBuf,
    },
}

#[derive(Debug, Args)]
struct PipelineArgs {
    #[arg(long)]
    captions: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    fixture: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct DemoArgs {
    #[arg(long, default_value_t = 200)]
    n_captions: usize,
    #[arg(long, default_value_t = 50)]
    n_statements: usize,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long, default_value_t = 30)]
    tuning: usize,
    #[arg(long, default_value_t = 10)]
    noisy_test: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = commands::run(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
