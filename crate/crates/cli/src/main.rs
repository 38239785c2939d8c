//! `refrev`: reference revision pipeline over JSONL corpora.

mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use refrev::rescore::Strategy;

use config::PipelineConfig;
use stages::Context;

#[derive(Debug, Parser)]
#[command(
    name = "refrev",
    version,
    about = "Align, classify, corrupt and revise reference summaries",
    after_help = "Any config key can be overridden with --section.key VALUE, e.g. --match.embed_threshold 0.8"
)]
struct Cli {
    /// TOML config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Filter or rescore strategy.
    #[arg(long, global = true)]
    strategy: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Annotate entities with the lexicon tagger.
    Tag,
    /// Align reference sentences to source evidence.
    Align,
    /// Label supportedness and emit hallucinated-entity masks.
    Classify,
    /// Apply a data filter: no_admission, unsupported, halluc_ents, control_buckets.
    Filter,
    /// Sample corruptions and corruption-model records.
    Corrupt,
    /// Build contrastive revision training records.
    BuildContrast,
    /// Build revision prompts for unsupported sentences.
    Prompts,
    /// Select revisions: less_abstractive, more_abstractive, fully_extractive, rank_corrected.
    Rescore,
    /// Faithfulness report for summaries (default: the references).
    Metrics,
    /// Supportedness histograms, class counts and coverage correlation.
    Diagnostics,
    /// align, classify, corrupt, build-contrast, prompts.
    All,
}

/// Splits `--section.key value` and `--section.key=value` pairs out of the
/// argument list.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        match inline.or_else(|| it.next()) {
            Some(v) => overrides.push((key, v)),
            None => {
                rest.push(arg);
            }
        }
    }
    (rest, overrides)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<refrev::Error>() {
            return if e.is_io() { 2 } else { 1 };
        }
        if let Some(e) = cause.downcast_ref::<csv::Error>() {
            if e.is_io_error() {
                return 2;
            }
        }
    }
    1
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<serde_json::Value> {
    let mut config = PipelineConfig::load(cli.config.as_deref(), &overrides)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(workers) = cli.workers {
        config.workers = workers;
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(config.workers).build()?;
    let strategy = cli.strategy.clone();
    pool.install(move || {
        let ctx = Context::load(config)?;
        match cli.command {
            Command::Tag => ctx.tag(),
            Command::Align => ctx.align(),
            Command::Classify => ctx.classify(),
            Command::Filter => {
                let s = strategy.ok_or_else(|| refrev::Error::InvalidInput("filter needs --strategy".into()))?;
                ctx.filter(&s)
            }
            Command::Corrupt => ctx.corrupt(),
            Command::BuildContrast => ctx.build_contrast(),
            Command::Prompts => ctx.prompts(),
            Command::Rescore => {
                let s = match strategy {
                    Some(s) => s.parse::<Strategy>()?,
                    None => ctx.config.rescore.strategy,
                };
                ctx.rescore(s)
            }
            Command::Metrics => ctx.metrics(),
            Command::Diagnostics => ctx.diagnostics(),
            Command::All => ctx.all(),
        }
    })
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, overrides) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
