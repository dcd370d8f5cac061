//! Core domain types plus text normalization, tokenization and question
//! detection shared by every other module.

use std::cmp::Ordering;
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Who produced an utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeakerRole {
    Teacher,
    Child,
    Other,
}

impl SpeakerRole {
    /// The two roles that take part in teacher/child features.
    pub const SPEAKERS: [SpeakerRole; 2] = [SpeakerRole::Teacher, SpeakerRole::Child];

    pub fn as_str(self) -> &'static str {
        match self {
            SpeakerRole::Teacher => "teacher",
            SpeakerRole::Child => "child",
            SpeakerRole::Other => "other",
        }
    }

    /// Parses a label from the closed set `teacher | child | other`
    /// (ASCII case-insensitive, surrounding whitespace ignored).
    pub fn from_label(label: &str) -> Option<Self> {
        let label = label.trim();
        [SpeakerRole::Teacher, SpeakerRole::Child, SpeakerRole::Other]
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(label))
    }

    /// The conversational partner used for response detection.
    pub fn partner(self) -> Option<Self> {
        match self {
            SpeakerRole::Teacher => Some(SpeakerRole::Child),
            SpeakerRole::Child => Some(SpeakerRole::Teacher),
            SpeakerRole::Other => None,
        }
    }

    /// Index into 2x2 teacher/child tables; `None` for `Other`.
    pub fn speaker_index(self) -> Option<usize> {
        match self {
            SpeakerRole::Teacher => Some(0),
            SpeakerRole::Child => Some(1),
            SpeakerRole::Other => None,
        }
    }
}

impl fmt::Display for SpeakerRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which side of the comparison a transcript came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Machine,
    Expert,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Machine => "machine",
            Source::Expert => "expert",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Utterance identifier. Parsers assign the 1-based line (machine) or row
/// (expert) number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UttId(pub u64);

impl fmt::Display for UttId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Bracketed `[...]`, angle `<...>` and double-parenthesis `((...))`
/// annotations are removed before normalization.
pub const DEFAULT_STRIP_PATTERNS: &[&str] = &[r"\[[^\]]*\]", r"<[^>]*>", r"\(\([^)]*\)\)"];

static DEFAULT_NORMALIZER: LazyLock<Normalizer> = LazyLock::new(Normalizer::default);

/// Text normalizer with a configurable list of non-speech marker patterns.
#[derive(Debug, Clone)]
pub struct Normalizer {
    strip: Vec<Regex>,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self::with_patterns(DEFAULT_STRIP_PATTERNS).expect("default strip patterns compile")
    }
}

impl Normalizer {
    pub fn with_patterns<S: AsRef<str>>(patterns: &[S]) -> Result<Self, regex::Error> {
        let strip = patterns
            .iter()
            .map(|p| Regex::new(p.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { strip })
    }

    /// Removes non-speech markers, leaving the rest of the text untouched.
    pub fn strip_markers(&self, raw: &str) -> String {
        let mut text = raw.to_owned();
        for re in &self.strip {
            if re.is_match(&text) {
                text = re.replace_all(&text, " ").into_owned();
            }
        }
        text
    }

    /// `normalize(strip_markers(raw))`.
    pub fn normalize(&self, raw: &str) -> String {
        normalize(&self.strip_markers(raw))
    }
}

fn is_apostrophe(c: char) -> bool {
    matches!(c, '\'' | '\u{2019}' | '\u{02BC}')
}

fn is_hyphen(c: char) -> bool {
    matches!(c, '-' | '\u{2010}' | '\u{2011}')
}

fn is_separator(c: char) -> bool {
    if c.is_whitespace() || c.is_control() {
        return true;
    }
    !c.is_alphanumeric()
        && (c.is_ascii_punctuation()
            || matches!(
            c,
            '\u{00A1}'..='\u{00BF}'
                | '\u{2000}'..='\u{206F}'
                | '\u{3000}'..='\u{303F}'
                | '\u{FF01}'..='\u{FF0F}'
                | '\u{FF1A}'..='\u{FF20}'
            ))
}

fn is_word_char(c: char) -> bool {
    !is_separator(c)
}

/// Lower-cases, strips punctuation and collapses whitespace.
///
/// Apostrophes between two word characters are kept (`it's` stays one
/// word), hyphens between word characters are dropped so the parts join,
/// and `.`, `,`, `:` between two digits are kept so numerals survive
/// verbatim. Every other separator becomes a space.
pub fn normalize(raw: &str) -> String {
    let chars: Vec<char> = raw.chars().flat_map(char::to_lowercase).collect();
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for (i, &c) in chars.iter().enumerate() {
        let prev = i.checked_sub(1).map(|p| chars[p]);
        let next = chars.get(i + 1).copied();
        let between = |pred: fn(char) -> bool| prev.is_some_and(pred) && next.is_some_and(pred);
        let keep = if is_word_char(c) {
            Some(c)
        } else if is_apostrophe(c) && between(is_word_char) {
            Some('\'')
        } else if matches!(c, '.' | ',' | ':') && between(|d| d.is_ascii_digit()) {
            Some(c)
        } else if is_hyphen(c) && between(is_word_char) {
            continue;
        } else {
            None
        };
        match keep {
            Some(k) => {
                if pending_space && !out.is_empty() {
                    out.push(' ');
                }
                pending_space = false;
                out.push(k);
            }
            None => pending_space = true,
        }
    }
    out
}

/// Splits normalized text on single spaces.
pub fn tokenize(normalized: &str) -> Vec<String> {
    normalized
        .split(' ')
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// True iff the text contains at least one `?`.
pub fn is_question(raw: &str) -> bool {
    raw.contains('?')
}

/// One timestamped, speaker-labeled segment of speech.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: UttId,
    pub onset: f64,
    pub offset: f64,
    pub raw_text: String,
    pub tokens: Vec<String>,
    pub question: bool,
    pub role: SpeakerRole,
    pub source: Source,
    /// Machine utterance this expert row was edited from, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<UttId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl Utterance {
    pub fn new(
        id: UttId,
        onset: f64,
        offset: f64,
        raw_text: impl Into<String>,
        role: SpeakerRole,
        source: Source,
    ) -> Self {
        Self::with_normalizer(
            &DEFAULT_NORMALIZER,
            id,
            onset,
            offset,
            raw_text,
            role,
            source,
        )
    }

    /// Builds an utterance, deriving `tokens` and `question` from the
    /// marker-stripped text.
    pub fn with_normalizer(
        normalizer: &Normalizer,
        id: UttId,
        onset: f64,
        offset: f64,
        raw_text: impl Into<String>,
        role: SpeakerRole,
        source: Source,
    ) -> Self {
        let raw_text = raw_text.into();
        let stripped = normalizer.strip_markers(&raw_text);
        let tokens = tokenize(&normalize(&stripped));
        Self {
            id,
            onset,
            offset,
            question: is_question(&stripped),
            tokens,
            raw_text,
            role,
            source,
            link: None,
            confidence: None,
        }
    }

    pub fn word_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }

    /// Onset, then offset, then id.
    pub fn chronological(a: &Utterance, b: &Utterance) -> Ordering {
        a.onset
            .total_cmp(&b.onset)
            .then(a.offset.total_cmp(&b.offset))
            .then(a.id.cmp(&b.id))
    }
}

/// Per-recording metadata, read from the JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingMeta {
    pub recording_id: String,
    /// Who wore the recorder.
    pub wearer_role: SpeakerRole,
    pub classroom_id: String,
    pub academic_year: String,
    pub duration_minutes: f64,
}

impl RecordingMeta {
    pub fn duration_seconds(&self) -> f64 {
        self.duration_minutes * 60.0
    }
}

/// Ordered utterances of one recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub meta: RecordingMeta,
    pub utterances: Vec<Utterance>,
    /// Set on expert transcripts whose rows carry machine ids.
    #[serde(default)]
    pub linked: bool,
}

impl Transcript {
    pub fn new(meta: RecordingMeta, mut utterances: Vec<Utterance>) -> Self {
        utterances.sort_by(Utterance::chronological);
        Self {
            meta,
            utterances,
            linked: false,
        }
    }

    pub fn by_role(&self, role: SpeakerRole) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.role == role)
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }
}
