//! Corpus-scale orchestration: discover recordings, run
//! ingest → align → features → reliability per recording in parallel, merge
//! the results in recording order and write the report tables.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::align::{align_recording, cross_classify, AlignConfig};
use crate::features::{
    summarize_with, FeatureConfig, FeatureSummary, LD_WINDOW_SECS, RESPONSE_WINDOW_SECS,
};
use crate::ingest::{parse_expert_with, parse_machine_with, parse_meta, validate, ParseOptions};
use crate::reliability::{
    icc_absolute_pairwise, time_weighted_mean, RecordingReliability, ReliabilityReport,
};
use crate::transcript::{
    Normalizer, RecordingMeta, Source, SpeakerRole, Transcript, DEFAULT_STRIP_PATTERNS,
};

pub const MACHINE_SUFFIX: &str = ".machine.jsonl";
pub const EXPERT_SUFFIX: &str = ".expert.tsv";
pub const META_SUFFIX: &str = ".meta.json";

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("{recording_id}: missing file {}", path.display())]
    MissingFile { recording_id: String, path: PathBuf },
    #[error("no recordings found")]
    EmptyCorpus,
    #[error("recording id {0:?} appears more than once")]
    DuplicateRecording(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub recording_id: String,
    pub machine_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_path: Option<PathBuf>,
    pub meta_path: PathBuf,
}

/// Recordings to process, sorted by id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn finish(mut entries: Vec<ManifestEntry>) -> Result<Self, BatchError> {
        if entries.is_empty() {
            return Err(BatchError::EmptyCorpus);
        }
        entries.sort_by(|a, b| a.recording_id.cmp(&b.recording_id));
        for w in entries.windows(2) {
            if w[0].recording_id == w[1].recording_id {
                return Err(BatchError::DuplicateRecording(w[0].recording_id.clone()));
            }
        }
        for e in &entries {
            let paths = [
                Some(&e.machine_path),
                e.expert_path.as_ref(),
                Some(&e.meta_path),
            ];
            if let Some(p) = paths.into_iter().flatten().find(|p| !p.is_file()) {
                return Err(BatchError::MissingFile {
                    recording_id: e.recording_id.clone(),
                    path: p.clone(),
                });
            }
        }
        Ok(Self { entries })
    }
}

/// Builds a manifest from an explicit manifest file, or else by scanning
/// `root` for `<id>.machine.jsonl`, `<id>.expert.tsv` and `<id>.meta.json`.
pub fn discover(
    root: Option<&Path>,
    manifest_path: Option<&Path>,
) -> Result<CorpusManifest, BatchError> {
    match (manifest_path, root) {
        (Some(m), _) => load_manifest(m),
        (None, Some(r)) => scan_dir(r),
        (None, None) => Err(BatchError::Manifest(
            "need a root directory or a manifest".into(),
        )),
    }
}

/// Reads a manifest JSON; relative paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<CorpusManifest, BatchError> {
    let file = File::open(path)?;
    let mut manifest: CorpusManifest = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| BatchError::Manifest(e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for e in &mut manifest.entries {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut e.machine_path);
        resolve(&mut e.meta_path);
        if let Some(p) = e.expert_path.as_mut() {
            resolve(p);
        }
    }
    CorpusManifest::finish(manifest.entries)
}

#[derive(Default)]
struct Found {
    machine: Option<PathBuf>,
    expert: Option<PathBuf>,
    meta: Option<PathBuf>,
}

fn scan_dir(root: &Path) -> Result<CorpusManifest, BatchError> {
    let mut found: BTreeMap<String, Found> = BTreeMap::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| BatchError::Io(e.into()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy();
        let path = entry.path().to_path_buf();
        for (suffix, kind) in [(MACHINE_SUFFIX, 0), (EXPERT_SUFFIX, 1), (META_SUFFIX, 2)] {
            if let Some(id) = name.strip_suffix(suffix).filter(|id| !id.is_empty()) {
                let slot = found.entry(id.to_owned()).or_default();
                let target = match kind {
                    0 => &mut slot.machine,
                    1 => &mut slot.expert,
                    _ => &mut slot.meta,
                };
                if target.replace(path.clone()).is_some() {
                    return Err(BatchError::DuplicateRecording(id.to_owned()));
                }
            }
        }
    }
    let mut entries = Vec::with_capacity(found.len());
    for (id, f) in found {
        let dir = f
            .machine
            .as_ref()
            .or(f.meta.as_ref())
            .or(f.expert.as_ref())
            .and_then(|p| p.parent())
            .unwrap_or(root)
            .to_path_buf();
        let missing = |suffix: &str| BatchError::MissingFile {
            recording_id: id.clone(),
            path: dir.join(format!("{id}{suffix}")),
        };
        let machine_path = f.machine.clone().ok_or_else(|| missing(MACHINE_SUFFIX))?;
        let meta_path = f.meta.clone().ok_or_else(|| missing(META_SUFFIX))?;
        entries.push(ManifestEntry {
            recording_id: id,
            machine_path,
            expert_path: f.expert,
            meta_path,
        });
    }
    CorpusManifest::finish(entries)
}

/// Settings for a pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub align: AlignConfig,
    pub response_window: f64,
    pub ld_window: f64,
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses one per core.
    pub workers: usize,
    /// Count WER only on recordings worn by the speaker role being scored.
    pub wer_wearer_match: bool,
    pub expert_delimiter: char,
    pub strip_patterns: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            align: AlignConfig::default(),
            response_window: RESPONSE_WINDOW_SECS,
            ld_window: LD_WINDOW_SECS,
            output_dir: PathBuf::from("out"),
            workers: 0,
            wer_wearer_match: true,
            expert_delimiter: '\t',
            strip_patterns: DEFAULT_STRIP_PATTERNS
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), BatchError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.response_window) {
            return Err(BatchError::InvalidConfig(format!(
                "response_window must be > 0, got {}",
                self.response_window
            )));
        }
        if !positive(self.ld_window) {
            return Err(BatchError::InvalidConfig(format!(
                "ld_window must be > 0, got {}",
                self.ld_window
            )));
        }
        if !self.expert_delimiter.is_ascii() {
            return Err(BatchError::InvalidConfig(
                "expert_delimiter must be ASCII".into(),
            ));
        }
        Ok(())
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            response_window: self.response_window,
            ld_window: self.ld_window,
        }
    }

    pub fn parse_options(&self) -> Result<ParseOptions, BatchError> {
        let normalizer = Normalizer::with_patterns(&self.strip_patterns)
            .map_err(|e| BatchError::InvalidConfig(e.to_string()))?;
        Ok(ParseOptions {
            normalizer,
            delimiter: self.expert_delimiter as u8,
        })
    }
}

/// Features of one (recording, source, role).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub recording_id: String,
    pub source: Source,
    pub summary: FeatureSummary,
}

/// A recording that could not be processed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryError {
    pub recording_id: String,
    pub stage: String,
    pub message: String,
}

/// Pooled totals for one (source, role).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub source: Source,
    pub role: SpeakerRole,
    pub n_recordings: u64,
    pub total_minutes: f64,
    pub n_utterances: u64,
    pub n_questions: u64,
    pub n_non_questions: u64,
    pub total_words: u64,
    pub mlu: Option<f64>,
    pub words_per_minute: Option<f64>,
    pub n_responded_questions: u64,
    pub n_responded_non_questions: u64,
    pub prop_responded_questions: Option<f64>,
    pub prop_responded_non_questions: Option<f64>,
    pub pct_questions_pooled: Option<f64>,
    /// Mean of per-recording question proportions.
    pub pct_questions_mean: Option<f64>,
    /// Mean over every lexical diversity window of every recording.
    pub lexical_diversity_per_minute: Option<f64>,
    /// Duration-weighted mean of per-recording pooled diversity.
    pub lexical_diversity_pooled: Option<f64>,
}

/// Teacher-to-child utterance ratio for one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRatio {
    pub source: Source,
    pub teacher_utterances: u64,
    pub child_utterances: u64,
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusTotals {
    pub recordings: u64,
    pub hours: f64,
    pub machine_utterances: u64,
    pub expert_utterances: u64,
}

/// Everything a run produces, ordered by recording id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineResults {
    pub totals: CorpusTotals,
    pub features: Vec<FeatureRow>,
    pub aggregate: Vec<AggregateRow>,
    pub utterance_ratios: Vec<UtteranceRatio>,
    pub reliability: ReliabilityReport,
    pub errors: Vec<EntryError>,
}

/// Per-recording output of one worker job.
#[derive(Debug)]
struct RecordingResult {
    meta: RecordingMeta,
    features: Vec<FeatureRow>,
    reliability: Option<RecordingReliability>,
    machine_utterances: u64,
    expert_utterances: u64,
}

fn entry_error(id: &str, stage: &str, e: impl std::fmt::Display) -> EntryError {
    EntryError {
        recording_id: id.to_owned(),
        stage: stage.to_owned(),
        message: e.to_string(),
    }
}

fn open(id: &str, path: &Path) -> Result<BufReader<File>, EntryError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| entry_error(id, "open", format!("{}: {e}", path.display())))
}

fn role_features(
    t: &Transcript,
    source: Source,
    cfg: &FeatureConfig,
) -> Result<Vec<FeatureRow>, EntryError> {
    SpeakerRole::SPEAKERS
        .iter()
        .map(|&role| {
            summarize_with(t, role, cfg)
                .map(|summary| FeatureRow {
                    recording_id: t.meta.recording_id.clone(),
                    source,
                    summary,
                })
                .map_err(|e| entry_error(&t.meta.recording_id, "features", e))
        })
        .collect()
}

fn process_entry(
    entry: &ManifestEntry,
    cfg: &RunConfig,
    opts: &ParseOptions,
) -> Result<RecordingResult, EntryError> {
    let id = entry.recording_id.as_str();
    let mut meta =
        parse_meta(open(id, &entry.meta_path)?).map_err(|e| entry_error(id, "meta", e))?;
    if meta.recording_id != id {
        debug!(
            "{id}: sidecar names recording {:?}; using manifest id",
            meta.recording_id
        );
        meta.recording_id = id.to_owned();
    }
    let fcfg = cfg.feature_config();

    let machine = parse_machine_with(open(id, &entry.machine_path)?, meta.clone(), opts)
        .map_err(|e| entry_error(id, "machine", e))?;
    let n_warn = validate(&machine).len();
    if n_warn > 0 {
        debug!("{id}: {n_warn} machine transcript warnings");
    }
    let mut features = role_features(&machine, Source::Machine, &fcfg)?;

    let mut reliability = None;
    let mut expert_utterances = 0;
    if let Some(path) = &entry.expert_path {
        let expert = parse_expert_with(open(id, path)?, meta.clone(), opts)
            .map_err(|e| entry_error(id, "expert", e))?;
        expert_utterances = expert.len() as u64;
        features.extend(role_features(&expert, Source::Expert, &fcfg)?);
        let corpus = align_recording(&machine, &expert, &cfg.align);
        let confusion = cross_classify(&corpus);
        reliability = Some(RecordingReliability::new(
            &corpus,
            confusion,
            cfg.wer_wearer_match,
        ));
    }
    Ok(RecordingResult {
        meta,
        features,
        reliability,
        machine_utterances: machine.len() as u64,
        expert_utterances,
    })
}

/// Runs every manifest entry and merges the results. Failing entries are
/// reported in `errors` and leave no other trace in the output.
pub fn run_pipeline(
    manifest: &CorpusManifest,
    cfg: &RunConfig,
) -> Result<PipelineResults, BatchError> {
    cfg.validate()?;
    let opts = cfg.parse_options()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| BatchError::InvalidConfig(e.to_string()))?;
    info!("processing {} recordings", manifest.len());
    let outcomes: Vec<Result<RecordingResult, EntryError>> = pool.install(|| {
        manifest
            .entries
            .par_iter()
            .map(|e| process_entry(e, cfg, &opts))
            .collect()
    });

    let mut results = PipelineResults::default();
    let mut recordings = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(r) => {
                results.totals.recordings += 1;
                results.totals.hours += r.meta.duration_minutes / 60.0;
                results.totals.machine_utterances += r.machine_utterances;
                results.totals.expert_utterances += r.expert_utterances;
                results.features.extend(r.features);
                recordings.extend(r.reliability);
            }
            Err(e) => {
                warn!("{}: {} failed: {}", e.recording_id, e.stage, e.message);
                results.errors.push(e);
            }
        }
    }
    results.aggregate = aggregate(&results.features);
    results.utterance_ratios = utterance_ratios(&results.aggregate);
    results.reliability = ReliabilityReport::from_recordings(recordings);
    fill_iccs(&mut results.reliability, &results.features);
    Ok(results)
}

/// Pools feature rows per (source, role).
pub fn aggregate(rows: &[FeatureRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(Source, SpeakerRole), Vec<&FeatureSummary>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.source, r.summary.role))
            .or_default()
            .push(&r.summary);
    }
    groups
        .into_iter()
        .map(|((source, role), ss)| {
            let sum = |f: fn(&FeatureSummary) -> u64| ss.iter().map(|s| f(s)).sum::<u64>();
            let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
            let total_minutes: f64 = ss.iter().map(|s| s.duration_minutes).sum();
            let n_utterances = sum(|s| s.n_utterances);
            let n_questions = sum(|s| s.n_questions);
            let n_non_questions = sum(|s| s.n_non_questions);
            let total_words = sum(|s| s.total_words);
            let n_rq = sum(|s| s.n_responded_questions);
            let n_rnq = sum(|s| s.n_responded_non_questions);
            let pcts: Vec<f64> = ss.iter().filter_map(|s| s.pct_questions).collect();
            let windows = sum(|s| s.ld_windows);
            let ld_total: f64 = ss
                .iter()
                .map(|s| s.lexical_diversity_per_minute * s.ld_windows as f64)
                .sum();
            let ld_pooled: Vec<Option<f64>> = ss
                .iter()
                .map(|s| Some(s.lexical_diversity_pooled))
                .collect();
            let durations: Vec<f64> = ss.iter().map(|s| s.duration_minutes).collect();
            AggregateRow {
                source,
                role,
                n_recordings: ss.len() as u64,
                total_minutes,
                n_utterances,
                n_questions,
                n_non_questions,
                total_words,
                mlu: ratio(total_words, n_utterances),
                words_per_minute: (total_minutes > 0.0).then(|| total_words as f64 / total_minutes),
                n_responded_questions: n_rq,
                n_responded_non_questions: n_rnq,
                prop_responded_questions: ratio(n_rq, n_questions),
                prop_responded_non_questions: ratio(n_rnq, n_non_questions),
                pct_questions_pooled: ratio(n_questions, n_utterances),
                pct_questions_mean: (!pcts.is_empty())
                    .then(|| pcts.iter().sum::<f64>() / pcts.len() as f64),
                lexical_diversity_per_minute: (windows > 0).then(|| ld_total / windows as f64),
                lexical_diversity_pooled: time_weighted_mean(&ld_pooled, &durations).ok(),
            }
        })
        .collect()
}

/// Teacher-to-child utterance ratio per source.
pub fn utterance_ratios(aggregate: &[AggregateRow]) -> Vec<UtteranceRatio> {
    [Source::Machine, Source::Expert]
        .into_iter()
        .filter_map(|source| {
            let count = |role| {
                aggregate
                    .iter()
                    .find(|a| a.source == source && a.role == role)
                    .map(|a| a.n_utterances)
            };
            let (t, c) = (count(SpeakerRole::Teacher), count(SpeakerRole::Child));
            if t.is_none() && c.is_none() {
                return None;
            }
            let (t, c) = (t.unwrap_or(0), c.unwrap_or(0));
            Some(UtteranceRatio {
                source,
                teacher_utterances: t,
                child_utterances: c,
                ratio: (c > 0).then(|| t as f64 / c as f64),
            })
        })
        .collect()
}

/// Per-recording feature values compared by ICC, in report column order.
/// Reads one feature value out of a summary.
pub type FeatureGetter = fn(&FeatureSummary) -> Option<f64>;

pub const ICC_FEATURES: &[(&str, FeatureGetter)] = &[
    ("question_rate", |s| {
        Some(s.n_questions as f64 / s.duration_minutes)
    }),
    ("non_question_rate", |s| {
        Some(s.n_non_questions as f64 / s.duration_minutes)
    }),
    ("responded_question_rate", |s| {
        Some(s.n_responded_questions as f64 / s.duration_minutes)
    }),
    ("response_proportion", |s| {
        (s.n_utterances > 0).then(|| s.n_responded() as f64 / s.n_utterances as f64)
    }),
    ("mlu_overall", |s| s.mlu_overall),
    ("mlu_question", |s| s.mlu_question),
    ("mlu_non_question", |s| s.mlu_non_question),
    ("words_per_minute", |s| Some(s.words_per_minute)),
    ("lexical_diversity", |s| {
        Some(s.lexical_diversity_per_minute)
    }),
];

/// Key under which an ICC is stored in the report.
pub fn icc_key(feature: &str, role: SpeakerRole) -> String {
    format!("{feature}_{role}")
}

/// Machine-vs-expert ICC for every feature and role over recordings that
/// have both sources.
pub fn fill_iccs(report: &mut ReliabilityReport, rows: &[FeatureRow]) {
    let mut by_key: BTreeMap<(String, SpeakerRole), [Option<&FeatureSummary>; 2]> = BTreeMap::new();
    for r in rows {
        let slot = by_key
            .entry((r.recording_id.clone(), r.summary.role))
            .or_default();
        slot[usize::from(r.source == Source::Expert)] = Some(&r.summary);
    }
    for role in SpeakerRole::SPEAKERS {
        let both: Vec<[&FeatureSummary; 2]> = by_key
            .iter()
            .filter(|((_, r), _)| *r == role)
            .filter_map(|(_, s)| Some([s[0]?, s[1]?]))
            .collect();
        for (name, value) in ICC_FEATURES {
            let ratings: Vec<[Option<f64>; 2]> =
                both.iter().map(|[m, e]| [value(m), value(e)]).collect();
            let key = icc_key(name, role);
            match icc_absolute_pairwise(&ratings) {
                Ok(icc) => {
                    report.iccs.insert(key, icc);
                }
                Err(e) => {
                    report.icc_failures.insert(key, e.to_string());
                }
            }
        }
    }
}

/// Output flavour for [`emit_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

pub const RESULTS_JSON: &str = "results.json";
pub const ERRORS_JSON: &str = "errors.json";
pub const FEATURES_CSV: &str = "features.csv";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const RELIABILITY_CSV: &str = "reliability.csv";
pub const ICC_CSV: &str = "icc.csv";

/// Column order of `features.csv`.
pub const FEATURE_COLUMNS: &[&str] = &[
    "recording_id",
    "source",
    "role",
    "duration_minutes",
    "n_utterances",
    "n_questions",
    "n_non_questions",
    "total_words",
    "mlu_overall",
    "mlu_question",
    "mlu_non_question",
    "words_per_minute",
    "n_responded_questions",
    "n_responded_non_questions",
    "prop_responded_questions",
    "prop_responded_non_questions",
    "pct_questions",
    "lexical_diversity_per_minute",
    "lexical_diversity_pooled",
];

pub const AGGREGATE_COLUMNS: &[&str] = &[
    "source",
    "role",
    "n_recordings",
    "total_minutes",
    "mlu",
    "words_per_minute",
    "n_utterances",
    "n_questions",
    "n_non_questions",
    "n_responded_questions",
    "n_responded_non_questions",
    "prop_responded_questions",
    "prop_responded_non_questions",
    "pct_questions_pooled",
    "pct_questions_mean",
    "lexical_diversity_per_minute",
    "lexical_diversity_pooled",
    "utterance_ratio_teacher_child",
];

pub const RELIABILITY_COLUMNS: &[&str] = &[
    "recording_id",
    "academic_year",
    "classroom_id",
    "recorder",
    "f1_weighted",
    "accuracy",
    "kappa",
    "wer_teacher",
    "wer_child",
    "n_pairs",
    "excluded_other",
    "residue_machine",
    "residue_expert",
];

pub const TIME_WEIGHTED_LABEL: &str = "Time-Weighted Mean";
pub const OVERALL_LABEL: &str = "Overall";

fn fixed(v: f64) -> String {
    format!("{v:.3}")
}

fn opt(v: Option<f64>) -> String {
    v.map(fixed).unwrap_or_default()
}

fn csv_writer(path: &Path) -> io::Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(
        path,
    )?)))
}

fn csv_io(e: csv::Error) -> io::Error {
    io::Error::other(e)
}

pub fn write_features_csv(rows: &[FeatureRow], path: &Path) -> io::Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(FEATURE_COLUMNS).map_err(csv_io)?;
    for r in rows {
        let s = &r.summary;
        w.write_record([
            r.recording_id.clone(),
            r.source.to_string(),
            s.role.to_string(),
            fixed(s.duration_minutes),
            s.n_utterances.to_string(),
            s.n_questions.to_string(),
            s.n_non_questions.to_string(),
            s.total_words.to_string(),
            opt(s.mlu_overall),
            opt(s.mlu_question),
            opt(s.mlu_non_question),
            fixed(s.words_per_minute),
            s.n_responded_questions.to_string(),
            s.n_responded_non_questions.to_string(),
            opt(s.prop_responded_questions),
            opt(s.prop_responded_non_questions),
            opt(s.pct_questions),
            fixed(s.lexical_diversity_per_minute),
            fixed(s.lexical_diversity_pooled),
        ])
        .map_err(csv_io)?;
    }
    w.flush()
}

pub fn write_aggregate_csv(results: &PipelineResults, path: &Path) -> io::Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(AGGREGATE_COLUMNS).map_err(csv_io)?;
    for a in &results.aggregate {
        let ratio = results
            .utterance_ratios
            .iter()
            .find(|r| r.source == a.source)
            .and_then(|r| r.ratio);
        w.write_record([
            a.source.to_string(),
            a.role.to_string(),
            a.n_recordings.to_string(),
            fixed(a.total_minutes),
            opt(a.mlu),
            opt(a.words_per_minute),
            a.n_utterances.to_string(),
            a.n_questions.to_string(),
            a.n_non_questions.to_string(),
            a.n_responded_questions.to_string(),
            a.n_responded_non_questions.to_string(),
            opt(a.prop_responded_questions),
            opt(a.prop_responded_non_questions),
            opt(a.pct_questions_pooled),
            opt(a.pct_questions_mean),
            opt(a.lexical_diversity_per_minute),
            opt(a.lexical_diversity_pooled),
            opt(ratio),
        ])
        .map_err(csv_io)?;
    }
    w.flush()
}

/// Per-recording rows, then the time-weighted and pooled rows.
pub fn write_reliability_csv(report: &ReliabilityReport, path: &Path) -> io::Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(RELIABILITY_COLUMNS).map_err(csv_io)?;
    for r in report.per_recording.values() {
        let m = &r.metrics;
        let c = &r.confusion;
        w.write_record([
            r.recording_id.clone(),
            r.academic_year.clone(),
            r.classroom_id.clone(),
            r.wearer_role.to_string(),
            opt(m.f1_weighted),
            opt(m.accuracy),
            opt(m.kappa),
            opt(m.wer_teacher),
            opt(m.wer_child),
            c.total().to_string(),
            c.excluded_other.to_string(),
            c.residue_machine.to_string(),
            c.residue_expert.to_string(),
        ])
        .map_err(csv_io)?;
    }
    let c = &report.pooled_confusion;
    for (label, m, counts) in [
        (TIME_WEIGHTED_LABEL, &report.time_weighted, false),
        (OVERALL_LABEL, &report.overall, true),
    ] {
        let count = |v: u64| if counts { v.to_string() } else { String::new() };
        w.write_record([
            label.to_owned(),
            String::new(),
            String::new(),
            String::new(),
            opt(m.f1_weighted),
            opt(m.accuracy),
            opt(m.kappa),
            opt(m.wer_teacher),
            opt(m.wer_child),
            count(c.total()),
            count(c.excluded_other),
            count(c.residue_machine),
            count(c.residue_expert),
        ])
        .map_err(csv_io)?;
    }
    w.flush()
}

/// One row per rater comparison, one column per feature × role.
pub fn write_icc_csv(report: &ReliabilityReport, path: &Path) -> io::Result<()> {
    let mut w = csv_writer(path)?;
    let keys: Vec<String> = ICC_FEATURES
        .iter()
        .flat_map(|(name, _)| SpeakerRole::SPEAKERS.map(|r| icc_key(name, r)))
        .collect();
    let mut header = vec!["comparison".to_owned(), "n_recordings".to_owned()];
    header.extend(keys.iter().cloned());
    w.write_record(&header).map_err(csv_io)?;
    let n = report.iccs.values().map(|i| i.n).max().unwrap_or(0);
    let mut row = vec!["machine_vs_expert".to_owned(), n.to_string()];
    row.extend(
        keys.iter()
            .map(|k| opt(report.iccs.get(k).map(|i| i.value))),
    );
    w.write_record(&row).map_err(csv_io)?;
    w.flush()
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()
}

/// Writes the report set into `out_dir` and returns the files written.
/// `errors.json` is always written; CSV mode adds the four tables, JSON mode
/// writes the full-precision `results.json`.
pub fn emit_report(
    results: &PipelineResults,
    out_dir: &Path,
    format: ReportFormat,
) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str| {
        let p = out_dir.join(name);
        written.push(p.clone());
        p
    };
    match format {
        ReportFormat::Csv => {
            write_features_csv(&results.features, &put(FEATURES_CSV))?;
            write_aggregate_csv(results, &put(AGGREGATE_CSV))?;
            write_reliability_csv(&results.reliability, &put(RELIABILITY_CSV))?;
            write_icc_csv(&results.reliability, &put(ICC_CSV))?;
        }
        ReportFormat::Json => write_json(results, &put(RESULTS_JSON))?,
    }
    write_json(&results.errors, &put(ERRORS_JSON))?;
    Ok(written)
}

/// Loads a `results.json` written by [`emit_report`].
pub fn load_results(path: &Path) -> io::Result<PipelineResults> {
    let file = File::open(path)?;
    serde_json::from_reader(BufReader::new(file)).map_err(io::Error::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(role: SpeakerRole, n_q: u64, n_nq: u64, words: u64, minutes: f64) -> FeatureSummary {
        let n = n_q + n_nq;
        FeatureSummary {
            role,
            duration_minutes: minutes,
            n_utterances: n,
            n_questions: n_q,
            n_non_questions: n_nq,
            total_words: words,
            mlu_overall: (n > 0).then(|| words as f64 / n as f64),
            mlu_question: None,
            mlu_non_question: None,
            words_per_minute: words as f64 / minutes,
            n_responded_questions: n_q / 2,
            n_responded_non_questions: 0,
            prop_responded_questions: None,
            prop_responded_non_questions: None,
            pct_questions: (n > 0).then(|| n_q as f64 / n as f64),
            lexical_diversity_per_minute: 2.0,
            lexical_diversity_pooled: 1.0,
            ld_windows: minutes.ceil() as u64,
        }
    }

    fn row(id: &str, source: Source, s: FeatureSummary) -> FeatureRow {
        FeatureRow {
            recording_id: id.into(),
            source,
            summary: s,
        }
    }

    #[test]
    fn aggregate_pools_counts() {
        let rows = vec![
            row(
                "a",
                Source::Machine,
                summary(SpeakerRole::Teacher, 2, 8, 50, 10.0),
            ),
            row(
                "b",
                Source::Machine,
                summary(SpeakerRole::Teacher, 0, 10, 30, 30.0),
            ),
            row(
                "a",
                Source::Machine,
                summary(SpeakerRole::Child, 1, 4, 20, 10.0),
            ),
        ];
        let agg = aggregate(&rows);
        let t = agg.iter().find(|a| a.role == SpeakerRole::Teacher).unwrap();
        assert_eq!((t.n_utterances, t.n_questions, t.total_words), (20, 2, 80));
        assert_eq!(t.mlu, Some(4.0));
        assert_eq!(t.words_per_minute, Some(2.0));
        assert_eq!(t.pct_questions_pooled, Some(0.1));
        assert_eq!(t.pct_questions_mean, Some(0.1));
        assert_eq!(t.prop_responded_questions, Some(0.5));
        let ratios = utterance_ratios(&agg);
        assert_eq!(ratios.len(), 1);
        assert_eq!(ratios[0].ratio, Some(4.0));
    }

    #[test]
    fn teacher_child_ratio() {
        let rows = vec![
            row(
                "a",
                Source::Machine,
                summary(SpeakerRole::Teacher, 481, 1590, 10_000, 55.0),
            ),
            row(
                "a",
                Source::Machine,
                summary(SpeakerRole::Child, 122, 1195, 5_000, 55.0),
            ),
        ];
        let r = utterance_ratios(&aggregate(&rows));
        assert!((r[0].ratio.unwrap() - 1.57).abs() < 0.005);
    }

    #[test]
    fn config_validation() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.response_window = 0.0;
        assert!(matches!(cfg.validate(), Err(BatchError::InvalidConfig(_))));
        let cfg = RunConfig {
            strip_patterns: vec!["[".into()],
            ..RunConfig::default()
        };
        assert!(cfg.parse_options().is_err());
    }

    #[test]
    fn config_from_partial_toml_like_json() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"response_window": 3.0, "align": {"gap_penalty": 0.1}}"#)
                .unwrap();
        assert_eq!(cfg.response_window, 3.0);
        assert_eq!(cfg.align.gap_penalty, 0.1);
        assert_eq!(cfg.align.min_iou, 0.10);
        assert_eq!(cfg.ld_window, 60.0);
    }
}
