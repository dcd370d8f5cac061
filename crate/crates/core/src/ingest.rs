//! Parsers for machine transcripts (line-delimited JSON), expert
//! annotation tables (delimiter-separated) and recording metadata sidecars.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transcript::{
    Normalizer, RecordingMeta, Source, SpeakerRole, Transcript, UttId, Utterance,
};

/// Fraction of expert rows that must carry a machine id for the transcript
/// to be treated as linked.
pub const LINKED_FRACTION: f64 = 0.9;

/// Tolerance when checking utterance offsets against the recording duration.
pub const DURATION_TOLERANCE_SECS: f64 = 1.0;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: u64, reason: String },
    #[error("line {line}: invalid timestamps (start {start}, end {end})")]
    InvalidTimestamps { line: u64, start: f64, end: f64 },
    #[error("line {line}: unknown speaker label {label:?}")]
    UnknownSpeakerLabel { line: u64, label: String },
    #[error("missing header column {0:?}")]
    MissingHeader(&'static str),
    #[error("invalid metadata: {0}")]
    InvalidMeta(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One line of a machine transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineSegmentRecord {
    pub start: f64,
    pub end: f64,
    pub text: String,
    pub speaker: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

/// One row of an expert annotation table.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertAnnotationRecord {
    pub start: f64,
    pub end: f64,
    pub speaker: String,
    pub text: String,
    pub linked_machine_id: Option<UttId>,
}

fn check_times(line: u64, start: f64, end: f64) -> Result<(), IngestError> {
    if !start.is_finite() || !end.is_finite() || start < 0.0 || end < start {
        return Err(IngestError::InvalidTimestamps { line, start, end });
    }
    Ok(())
}

fn parse_role(line: u64, label: &str) -> Result<SpeakerRole, IngestError> {
    SpeakerRole::from_label(label).ok_or_else(|| IngestError::UnknownSpeakerLabel {
        line,
        label: label.to_owned(),
    })
}

/// Parser options shared by both transcript formats.
#[derive(Debug, Clone)]
pub struct ParseOptions {
    pub normalizer: Normalizer,
    /// Expert table delimiter.
    pub delimiter: u8,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            normalizer: Normalizer::default(),
            delimiter: b'\t',
        }
    }
}

pub fn parse_machine<R: BufRead>(
    reader: R,
    meta: RecordingMeta,
) -> Result<Transcript, IngestError> {
    parse_machine_with(reader, meta, &ParseOptions::default())
}

/// Streams a line-delimited JSON machine transcript. Blank lines are
/// skipped; ids are physical 1-based line numbers.
pub fn parse_machine_with<R: BufRead>(
    reader: R,
    meta: RecordingMeta,
    opts: &ParseOptions,
) -> Result<Transcript, IngestError> {
    let mut utterances = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx as u64 + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MachineSegmentRecord =
            serde_json::from_str(&line).map_err(|e| IngestError::MalformedRecord {
                line: line_no,
                reason: e.to_string(),
            })?;
        check_times(line_no, rec.start, rec.end)?;
        let role = parse_role(line_no, &rec.speaker)?;
        if let Some(c) = rec.confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(IngestError::MalformedRecord {
                    line: line_no,
                    reason: format!("confidence {c} outside [0, 1]"),
                });
            }
        }
        let mut utt = Utterance::with_normalizer(
            &opts.normalizer,
            UttId(line_no),
            rec.start,
            rec.end,
            rec.text,
            role,
            Source::Machine,
        );
        utt.confidence = rec.confidence;
        utterances.push(utt);
    }
    Ok(Transcript::new(meta, utterances))
}

/// Writes a transcript back out as line-delimited JSON in transcript order.
pub fn write_machine<W: Write>(transcript: &Transcript, mut writer: W) -> Result<(), IngestError> {
    for u in &transcript.utterances {
        let rec = MachineSegmentRecord {
            start: u.onset,
            end: u.offset,
            text: u.raw_text.clone(),
            speaker: u.role.as_str().to_owned(),
            confidence: u.confidence,
        };
        serde_json::to_writer(&mut writer, &rec).map_err(io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn parse_expert<R: Read>(reader: R, meta: RecordingMeta) -> Result<Transcript, IngestError> {
    parse_expert_with(reader, meta, &ParseOptions::default())
}

/// Parses an expert table with header `start, end, speaker, text[, machine_id]`
/// (any column order). Ids are 1-based data row numbers.
pub fn parse_expert_with<R: Read>(
    reader: R,
    meta: RecordingMeta,
    opts: &ParseOptions,
) -> Result<Transcript, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter)
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let column = |name: &'static str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or(IngestError::MissingHeader(name))
    };
    let (c_start, c_end, c_speaker, c_text) = (
        column("start")?,
        column("end")?,
        column("speaker")?,
        column("text")?,
    );
    let c_link = column("machine_id").ok();

    let mut utterances = Vec::new();
    let mut n_linked = 0usize;
    for (idx, record) in rdr.records().enumerate() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(idx as u64 + 2, |p| p.line());
        let field = |c: usize| record.get(c).unwrap_or("");
        let number = |c: usize, name: &str| {
            field(c)
                .trim()
                .parse::<f64>()
                .map_err(|_| IngestError::MalformedRecord {
                    line,
                    reason: format!("{name} is not a number: {:?}", field(c)),
                })
        };
        let rec = ExpertAnnotationRecord {
            start: number(c_start, "start")?,
            end: number(c_end, "end")?,
            speaker: field(c_speaker).to_owned(),
            text: field(c_text).to_owned(),
            linked_machine_id: match c_link.map(|c| field(c).trim()).filter(|s| !s.is_empty()) {
                None => None,
                Some(s) => Some(UttId(s.parse().map_err(|_| {
                    IngestError::MalformedRecord {
                        line,
                        reason: format!("machine_id is not an integer: {s:?}"),
                    }
                })?)),
            },
        };
        check_times(line, rec.start, rec.end)?;
        let role = parse_role(line, &rec.speaker)?;
        let mut utt = Utterance::with_normalizer(
            &opts.normalizer,
            UttId(idx as u64 + 1),
            rec.start,
            rec.end,
            rec.text,
            role,
            Source::Expert,
        );
        if rec.linked_machine_id.is_some() {
            n_linked += 1;
        }
        utt.link = rec.linked_machine_id;
        utterances.push(utt);
    }
    let total = utterances.len();
    let mut transcript = Transcript::new(meta, utterances);
    transcript.linked = total > 0 && n_linked as f64 >= LINKED_FRACTION * total as f64;
    Ok(transcript)
}

fn csv_error(e: csv::Error) -> IngestError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => IngestError::Io(io),
        other => IngestError::MalformedRecord {
            line,
            reason: format!("{other:?}"),
        },
    }
}

/// Writes an expert table; the `machine_id` column is emitted only when at
/// least one utterance carries a link.
pub fn write_expert<W: Write>(
    transcript: &Transcript,
    writer: W,
    delimiter: u8,
) -> Result<(), IngestError> {
    let mut wtr = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_writer(writer);
    let with_link = transcript.utterances.iter().any(|u| u.link.is_some());
    let mut header = vec!["start", "end", "speaker", "text"];
    if with_link {
        header.push("machine_id");
    }
    wtr.write_record(&header).map_err(csv_error)?;
    for u in &transcript.utterances {
        let mut row = vec![
            format!("{:?}", u.onset),
            format!("{:?}", u.offset),
            u.role.as_str().to_owned(),
            u.raw_text.clone(),
        ];
        if with_link {
            row.push(u.link.map(|l| l.to_string()).unwrap_or_default());
        }
        wtr.write_record(&row).map_err(csv_error)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads the JSON metadata sidecar.
pub fn parse_meta<R: Read>(reader: R) -> Result<RecordingMeta, IngestError> {
    let meta: RecordingMeta =
        serde_json::from_reader(reader).map_err(|e| IngestError::InvalidMeta(e.to_string()))?;
    if !(meta.duration_minutes.is_finite() && meta.duration_minutes > 0.0) {
        return Err(IngestError::InvalidMeta(format!(
            "duration_minutes must be positive, got {}",
            meta.duration_minutes
        )));
    }
    Ok(meta)
}

/// Non-fatal findings from [`validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Warning {
    /// Two same-role utterances overlap in time.
    Overlap {
        first: UttId,
        second: UttId,
        role: SpeakerRole,
        seconds: f64,
    },
    PastDuration {
        id: UttId,
        offset: f64,
        duration_secs: f64,
    },
    ZeroWords {
        id: UttId,
    },
}

/// Reports overlapping same-role utterances, utterances running past the
/// recording duration and utterances with no words.
pub fn validate(transcript: &Transcript) -> Vec<Warning> {
    let mut warnings = Vec::new();
    let limit = transcript.meta.duration_seconds();

    // Sweep in onset order, keeping still-open utterances per role.
    let mut open: BTreeMap<SpeakerRole, Vec<&Utterance>> = BTreeMap::new();
    for u in &transcript.utterances {
        let active = open.entry(u.role).or_default();
        active.retain(|a| a.offset > u.onset);
        for a in active.iter() {
            let seconds = a.offset.min(u.offset) - u.onset;
            if seconds > 0.0 {
                warnings.push(Warning::Overlap {
                    first: a.id,
                    second: u.id,
                    role: u.role,
                    seconds,
                });
            }
        }
        active.push(u);
    }

    for u in &transcript.utterances {
        if u.offset > limit + DURATION_TOLERANCE_SECS {
            warnings.push(Warning::PastDuration {
                id: u.id,
                offset: u.offset,
                duration_secs: limit,
            });
        }
        if u.word_count() == 0 {
            warnings.push(Warning::ZeroWords { id: u.id });
        }
    }
    warnings
}
