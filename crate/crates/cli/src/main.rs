use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctm_core::pipeline::{run_all, run_stage, PipelineConfig, PipelineError, PipelineManifest, Stage};
use ctm_core::synth::{generate_planted, PlantedSpec};

/// Contextual topic modeling pipeline.
#[derive(Debug, Parser)]
#[command(name = "ctm", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load and validate the corpus.
    Ingest(RunArgs),
    /// Clean abstracts into term lists.
    Preprocess(RunArgs),
    /// Build count and TF-IDF matrices.
    Vectorize(RunArgs),
    /// Fit the LDA topic model.
    Lda(RunArgs),
    /// Compute or load document embeddings.
    Embed(RunArgs),
    /// Concatenate topic and embedding vectors and train the autoencoder.
    Fuse(RunArgs),
    /// Cluster the latent space and compare methods by silhouette.
    Cluster(RunArgs),
    /// Lay documents out in 2-D.
    Project(RunArgs),
    /// Export topic shares, terms, evolution and coordinates.
    Report(RunArgs),
    /// Run every stage in order.
    RunAll(RunArgs),
    /// Write a planted-topic synthetic corpus (corpus.jsonl, truth.json).
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Pipeline config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    n_topics: usize,
    #[arg(long, default_value_t = 200)]
    n_docs: usize,
    #[arg(long, default_value_t = 60)]
    doc_length: usize,
    #[arg(long, default_value_t = 40)]
    vocab_per_topic: usize,
    #[arg(long, default_value_t = 0.2)]
    overlap: f64,
    #[arg(long, default_value_t = 0.1)]
    concentration: f64,
    #[arg(long, default_value_t = 2004)]
    year_min: i32,
    #[arg(long, default_value_t = 2021)]
    year_max: i32,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

fn load_config(args: &RunArgs) -> Result<PipelineConfig, PipelineError> {
    let mut config = PipelineConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.out {
        config.out_dir = std::path::absolute(out).map_err(|source| PipelineError::Io {
            path: out.display().to_string(),
            source,
        })?;
    }
    Ok(config)
}

fn run(stage: Option<Stage>, args: &RunArgs) -> Result<PipelineManifest, PipelineError> {
    let config = load_config(args)?;
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads.max(1))
        .build()
        .map_err(|e| PipelineError::Config {
            field: "--threads".into(),
            message: e.to_string(),
        })?;
    pool.install(|| match stage {
        Some(stage) => run_stage(stage, &config),
        None => run_all(&config),
    })
}

fn report_error(err: &dyn std::error::Error) {
    eprintln!("error: {err}");
    let mut source = err.source();
    while let Some(cause) = source {
        eprintln!("  caused by: {cause}");
        source = cause.source();
    }
}

fn synth(args: &SynthArgs) -> ExitCode {
    let spec = PlantedSpec {
        n_topics: args.n_topics,
        n_docs: args.n_docs,
        doc_length: args.doc_length,
        vocab_per_topic: args.vocab_per_topic,
        overlap_fraction: args.overlap,
        year_range: (args.year_min, args.year_max),
        mixing_concentration: args.concentration,
        seed: args.seed,
    };
    let planted = match generate_planted(&spec) {
        Ok(p) => p,
        Err(e) => {
            report_error(&e);
            return ExitCode::from(2);
        }
    };
    match planted.write_dir(&args.out) {
        Ok(()) => {
            println!("wrote {} documents to {}", planted.corpus.len(), args.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            report_error(&e);
            ExitCode::from(1)
        }
    }
}

fn summarize(manifest: &PipelineManifest, out: &Path) {
    for (name, entry) in &manifest.stages {
        println!("{name}: {} files", entry.outputs.len());
    }
    println!("manifest: {}", PipelineManifest::path(out).display());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CTM_LOG", "warn")).init();
    let cli = Cli::parse();
    let (stage, args) = match &cli.command {
        Command::Synth(args) => return synth(args),
        Command::RunAll(args) => (None, args),
        Command::Ingest(a) => (Some(Stage::Ingest), a),
        Command::Preprocess(a) => (Some(Stage::Preprocess), a),
        Command::Vectorize(a) => (Some(Stage::Vectorize), a),
        Command::Lda(a) => (Some(Stage::Lda), a),
        Command::Embed(a) => (Some(Stage::Embed), a),
        Command::Fuse(a) => (Some(Stage::Fuse), a),
        Command::Cluster(a) => (Some(Stage::Cluster), a),
        Command::Project(a) => (Some(Stage::Project), a),
        Command::Report(a) => (Some(Stage::Report), a),
    };
    match run(stage, args) {
        Ok(manifest) => {
            let out = load_config(args).map(|c| c.out_path()).unwrap_or_default();
            summarize(&manifest, &out);
            ExitCode::SUCCESS
        }
        Err(e) => {
            report_error(&e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
