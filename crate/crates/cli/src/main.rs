use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use classtalk_core::align::write_alignment;
use classtalk_core::batch::{
    load_results, write_aggregate_csv, write_features_csv, write_icc_csv, write_reliability_csv,
    ManifestEntry, AGGREGATE_CSV, ERRORS_JSON, FEATURES_CSV, ICC_CSV, RELIABILITY_CSV,
};
use classtalk_core::ingest::{parse_expert_with, parse_machine_with, ParseOptions};
use classtalk_core::{
    align_recording, discover, emit_report, parse_meta, run_pipeline, validate, CorpusManifest,
    PipelineResults, ReportFormat, RunConfig, Transcript,
};
use log::{info, warn};

const EXIT_USAGE: u8 = 1;
const EXIT_PARTIAL: u8 = 2;
const EXIT_FATAL: u8 = 3;

/// Classroom speech transcript reliability and feature extraction.
#[derive(Debug, Parser)]
#[command(name = "classtalk", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and validate every recording without computing anything.
    IngestCheck(CorpusArgs),
    /// Align machine and expert transcripts and write one JSONL audit per recording.
    Align(CorpusArgs),
    /// Compute per-recording and pooled speech features.
    Features(CorpusArgs),
    /// Compute machine-vs-expert reliability tables.
    Reliability(CorpusArgs),
    /// Run everything and write the full report set.
    Batch(CorpusArgs),
    /// Re-emit reports from a saved results.json.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

#[derive(Debug, Args)]
struct CorpusArgs {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Directory scanned for <id>.machine.jsonl, <id>.expert.tsv and <id>.meta.json.
    #[arg(long, value_name = "DIR", required_unless_present = "manifest")]
    root: Option<PathBuf>,
    /// JSON manifest listing recordings explicitly.
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads (0 = one per core).
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
    #[arg(long, value_name = "SECS")]
    response_window: Option<f64>,
    #[arg(long, value_name = "SECS")]
    ld_window: Option<f64>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// results.json written by a previous batch run.
    #[arg(long, value_name = "PATH")]
    results: PathBuf,
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

/// Outcome of a verb that ran to completion.
enum Status {
    Clean,
    Partial(usize),
}

impl CorpusArgs {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(w) = self.response_window {
            cfg.response_window = w;
        }
        if let Some(w) = self.ld_window {
            cfg.ld_window = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn manifest(&self) -> Result<CorpusManifest> {
        Ok(discover(self.root.as_deref(), self.manifest.as_deref())?)
    }
}

fn write_errors(results: &PipelineResults, out: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(out.join(ERRORS_JSON))?);
    serde_json::to_writer_pretty(&mut w, &results.errors)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn status_of(results: &PipelineResults) -> Status {
    match results.errors.len() {
        0 => Status::Clean,
        n => Status::Partial(n),
    }
}

fn load_pair(
    entry: &ManifestEntry,
    opts: &ParseOptions,
) -> Result<(Transcript, Option<Transcript>)> {
    let meta = parse_meta(BufReader::new(File::open(&entry.meta_path)?)).context("metadata")?;
    let machine = parse_machine_with(
        BufReader::new(File::open(&entry.machine_path)?),
        meta.clone(),
        opts,
    )
    .context("machine transcript")?;
    let expert = match &entry.expert_path {
        Some(p) => Some(
            parse_expert_with(BufReader::new(File::open(p)?), meta, opts)
                .context("expert transcript")?,
        ),
        None => None,
    };
    Ok((machine, expert))
}

fn ingest_check(args: &CorpusArgs) -> Result<Status> {
    let cfg = args.run_config()?;
    let opts = cfg.parse_options()?;
    let mut failed = 0;
    for entry in &args.manifest()?.entries {
        match load_pair(entry, &opts) {
            Ok((machine, expert)) => {
                let mut warnings = validate(&machine);
                if let Some(e) = &expert {
                    warnings.extend(validate(e));
                }
                for w in &warnings {
                    info!("{}: {w:?}", entry.recording_id);
                }
                println!(
                    "{}\tok\tmachine={}\texpert={}\twarnings={}",
                    entry.recording_id,
                    machine.len(),
                    expert.map_or_else(|| "-".to_owned(), |e| e.len().to_string()),
                    warnings.len()
                );
            }
            Err(e) => {
                failed += 1;
                println!("{}\tfailed\t{e:#}", entry.recording_id);
            }
        }
    }
    Ok(if failed == 0 {
        Status::Clean
    } else {
        Status::Partial(failed)
    })
}

fn align(args: &CorpusArgs) -> Result<Status> {
    let cfg = args.run_config()?;
    let opts = cfg.parse_options()?;
    let dir = cfg.output_dir.join("alignments");
    fs::create_dir_all(&dir)?;
    let mut failed = 0;
    for entry in &args.manifest()?.entries {
        let (machine, expert) = match load_pair(entry, &opts) {
            Ok((m, Some(e))) => (m, e),
            Ok((_, None)) => {
                info!("{}: no expert transcript, skipped", entry.recording_id);
                continue;
            }
            Err(e) => {
                failed += 1;
                warn!("{}: {e:#}", entry.recording_id);
                continue;
            }
        };
        let corpus = align_recording(&machine, &expert, &cfg.align);
        let path = dir.join(format!("{}.jsonl", entry.recording_id));
        let mut w = BufWriter::new(File::create(&path)?);
        write_alignment(&corpus, &mut w)?;
        w.flush()?;
        println!(
            "{}\tpairs={}\tmachine_only={}\texpert_only={}",
            entry.recording_id,
            corpus.pairs.len(),
            corpus.machine_only.len(),
            corpus.expert_only.len()
        );
    }
    Ok(if failed == 0 {
        Status::Clean
    } else {
        Status::Partial(failed)
    })
}

/// Which part of the report set a verb writes in CSV mode.
#[derive(Clone, Copy)]
enum Tables {
    Features,
    Reliability,
    All,
}

fn pipeline(args: &CorpusArgs, tables: Tables) -> Result<Status> {
    let cfg = args.run_config()?;
    let manifest = args.manifest()?;
    let results = run_pipeline(&manifest, &cfg)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    match (tables, args.format) {
        (Tables::All, format) => {
            // The full-precision JSON is always kept next to the tables.
            emit_report(&results, out, ReportFormat::Json)?;
            if let Format::Csv = format {
                emit_report(&results, out, ReportFormat::Csv)?;
            }
        }
        (_, Format::Json) => {
            emit_report(&results, out, ReportFormat::Json)?;
        }
        (Tables::Features, Format::Csv) => {
            write_features_csv(&results.features, &out.join(FEATURES_CSV))?;
            write_aggregate_csv(&results, &out.join(AGGREGATE_CSV))?;
            write_errors(&results, out)?;
        }
        (Tables::Reliability, Format::Csv) => {
            write_reliability_csv(&results.reliability, &out.join(RELIABILITY_CSV))?;
            write_icc_csv(&results.reliability, &out.join(ICC_CSV))?;
            write_errors(&results, out)?;
        }
    }
    info!(
        "{} recordings, {} machine and {} expert utterances, {} failed",
        results.totals.recordings,
        results.totals.machine_utterances,
        results.totals.expert_utterances,
        results.errors.len()
    );
    Ok(status_of(&results))
}

fn report(args: &ReportArgs) -> Result<Status> {
    let results = load_results(&args.results)
        .with_context(|| format!("reading {}", args.results.display()))?;
    emit_report(&results, &args.out, args.format.into())?;
    Ok(status_of(&results))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WSW_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::IngestCheck(a) => ingest_check(a),
        Command::Align(a) => align(a),
        Command::Features(a) => pipeline(a, Tables::Features),
        Command::Reliability(a) => pipeline(a, Tables::Reliability),
        Command::Batch(a) => pipeline(a, Tables::All),
        Command::Report(a) => report(a),
    };
    match outcome {
        Ok(Status::Clean) => ExitCode::SUCCESS,
        Ok(Status::Partial(n)) => {
            eprintln!("{n} recording(s) failed; see {ERRORS_JSON}");
            ExitCode::from(EXIT_PARTIAL)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FATAL)
        }
    }
}
