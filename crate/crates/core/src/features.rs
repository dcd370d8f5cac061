//! Language features for one transcript and speaker role: MLU, speech
//! rate, questions, partner responses and lexical diversity.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transcript::{SpeakerRole, Transcript, UttId, Utterance};

/// Default response window after the target's offset, in seconds.
pub const RESPONSE_WINDOW_SECS: f64 = 2.5;
/// Default lexical diversity window, in seconds.
pub const LD_WINDOW_SECS: f64 = 60.0;
/// Slack on the response window so boundary onsets survive float rounding.
pub const RESPONSE_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("recording duration must be positive, got {0} minutes")]
    ZeroDuration(f64),
    #[error("responded count {responded} exceeds total {total}")]
    InvalidCounts { responded: u64, total: u64 },
    #[error("window length must be positive, got {0} s")]
    InvalidWindow(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub response_window: f64,
    pub ld_window: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            response_window: RESPONSE_WINDOW_SECS,
            ld_window: LD_WINDOW_SECS,
        }
    }
}

/// A partner utterance starting after the target and no later than the
/// response window past the target's offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseLink {
    pub target_utt_id: UttId,
    pub response_utt_id: UttId,
    /// Response onset minus target offset, in seconds (negative when the
    /// response starts before the target ends).
    pub latency: f64,
}

fn counts_toward_features(u: &Utterance) -> bool {
    u.role != SpeakerRole::Other && u.word_count() > 0
}

/// Words per utterance over utterances with at least one word.
pub fn mlu<'a>(utterances: impl IntoIterator<Item = &'a Utterance>) -> Option<f64> {
    let (words, n) = utterances
        .into_iter()
        .filter(|u| u.word_count() > 0)
        .fold((0usize, 0usize), |(w, n), u| (w + u.word_count(), n + 1));
    (n > 0).then(|| words as f64 / n as f64)
}

fn positive_duration(t: &Transcript) -> Result<f64, FeatureError> {
    let d = t.meta.duration_minutes;
    if d.is_finite() && d > 0.0 {
        Ok(d)
    } else {
        Err(FeatureError::ZeroDuration(d))
    }
}

pub fn words_per_minute(transcript: &Transcript, role: SpeakerRole) -> Result<f64, FeatureError> {
    let minutes = positive_duration(transcript)?;
    let words: usize = transcript.by_role(role).map(Utterance::word_count).sum();
    Ok(words as f64 / minutes)
}

pub fn detect_responses(transcript: &Transcript) -> Vec<ResponseLink> {
    detect_responses_within(transcript, RESPONSE_WINDOW_SECS)
}

/// Every (target, response) pair of teacher/child utterances with
/// different roles where the response onset lies in
/// `(target onset, target offset + window]`. Other-role and zero-word
/// utterances take no part.
pub fn detect_responses_within(transcript: &Transcript, window: f64) -> Vec<ResponseLink> {
    let us: Vec<&Utterance> = transcript
        .utterances
        .iter()
        .filter(|u| counts_toward_features(u))
        .collect();
    let mut links = Vec::new();
    for target in &us {
        let start = us.partition_point(|v| v.onset <= target.onset);
        for v in &us[start..] {
            let latency = v.onset - target.offset;
            if latency > window + RESPONSE_EPSILON {
                // Onsets are sorted; later utterances start later still.
                break;
            }
            if v.role != target.role {
                links.push(ResponseLink {
                    target_utt_id: target.id,
                    response_utt_id: v.id,
                    latency,
                });
            }
        }
    }
    links
}

/// `responded / total`, `None` when `total` is 0.
pub fn response_proportion(responded: u64, total: u64) -> Result<Option<f64>, FeatureError> {
    if responded > total {
        return Err(FeatureError::InvalidCounts { responded, total });
    }
    Ok((total > 0).then(|| responded as f64 / total as f64))
}

/// Distinct word types per window, one entry per window covering
/// `[0, duration)`. An utterance belongs to the window holding its onset;
/// onsets past the end fall into the last window.
pub fn lexical_types_per_window(
    transcript: &Transcript,
    role: SpeakerRole,
    window_secs: f64,
) -> Result<Vec<usize>, FeatureError> {
    let minutes = positive_duration(transcript)?;
    if !(window_secs.is_finite() && window_secs > 0.0) {
        return Err(FeatureError::InvalidWindow(window_secs));
    }
    let n_windows = ((minutes * 60.0 / window_secs).ceil() as usize).max(1);
    let mut types: Vec<HashSet<&str>> = vec![HashSet::new(); n_windows];
    for u in transcript.by_role(role) {
        let w = ((u.onset / window_secs).floor().max(0.0) as usize).min(n_windows - 1);
        types[w].extend(u.tokens.iter().map(String::as_str));
    }
    Ok(types.iter().map(HashSet::len).collect())
}

/// Mean over all windows (silent ones included) of distinct word types,
/// scaled to types per minute.
pub fn lexical_diversity_per_minute(
    transcript: &Transcript,
    role: SpeakerRole,
) -> Result<f64, FeatureError> {
    lexical_diversity_with_window(transcript, role, LD_WINDOW_SECS)
}

pub fn lexical_diversity_with_window(
    transcript: &Transcript,
    role: SpeakerRole,
    window_secs: f64,
) -> Result<f64, FeatureError> {
    let per_window = lexical_types_per_window(transcript, role, window_secs)?;
    let mean = per_window.iter().sum::<usize>() as f64 / per_window.len() as f64;
    Ok(mean * 60.0 / window_secs)
}

/// Distinct word types over the whole recording divided by its length.
pub fn lexical_diversity_pooled(
    transcript: &Transcript,
    role: SpeakerRole,
) -> Result<f64, FeatureError> {
    let minutes = positive_duration(transcript)?;
    let types: HashSet<&str> = transcript
        .by_role(role)
        .flat_map(|u| u.tokens.iter().map(String::as_str))
        .collect();
    Ok(types.len() as f64 / minutes)
}

/// The feature battery for one (transcript, role).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub role: SpeakerRole,
    pub duration_minutes: f64,
    pub n_utterances: u64,
    pub n_questions: u64,
    pub n_non_questions: u64,
    pub total_words: u64,
    pub mlu_overall: Option<f64>,
    pub mlu_question: Option<f64>,
    pub mlu_non_question: Option<f64>,
    pub words_per_minute: f64,
    /// Questions by this role that drew at least one partner response.
    pub n_responded_questions: u64,
    pub n_responded_non_questions: u64,
    pub prop_responded_questions: Option<f64>,
    pub prop_responded_non_questions: Option<f64>,
    pub pct_questions: Option<f64>,
    pub lexical_diversity_per_minute: f64,
    pub lexical_diversity_pooled: f64,
    /// Number of lexical diversity windows, for pooling across recordings.
    pub ld_windows: u64,
}

impl FeatureSummary {
    pub fn n_responded(&self) -> u64 {
        self.n_responded_questions + self.n_responded_non_questions
    }
}

pub fn summarize(
    transcript: &Transcript,
    role: SpeakerRole,
) -> Result<FeatureSummary, FeatureError> {
    summarize_with(transcript, role, &FeatureConfig::default())
}

/// Fills every [`FeatureSummary`] field. Utterances without words are
/// left out of all counts.
pub fn summarize_with(
    transcript: &Transcript,
    role: SpeakerRole,
    cfg: &FeatureConfig,
) -> Result<FeatureSummary, FeatureError> {
    if !(cfg.response_window.is_finite() && cfg.response_window > 0.0) {
        return Err(FeatureError::InvalidWindow(cfg.response_window));
    }
    let minutes = positive_duration(transcript)?;
    let responded: HashSet<UttId> = detect_responses_within(transcript, cfg.response_window)
        .into_iter()
        .map(|l| l.target_utt_id)
        .collect();

    let spoken: Vec<&Utterance> = transcript
        .by_role(role)
        .filter(|u| u.word_count() > 0)
        .collect();
    let (questions, statements): (Vec<&Utterance>, Vec<&Utterance>) =
        spoken.iter().copied().partition(|u| u.question);
    let n_utterances = spoken.len() as u64;
    let n_questions = questions.len() as u64;
    let n_non_questions = statements.len() as u64;
    let total_words = spoken.iter().map(|u| u.word_count() as u64).sum();
    let answered =
        |us: &[&Utterance]| us.iter().filter(|u| responded.contains(&u.id)).count() as u64;
    let n_responded_questions = answered(&questions);
    let n_responded_non_questions = answered(&statements);
    let per_window = lexical_types_per_window(transcript, role, cfg.ld_window)?;
    let ld_mean = per_window.iter().sum::<usize>() as f64 / per_window.len() as f64;

    Ok(FeatureSummary {
        role,
        duration_minutes: minutes,
        n_utterances,
        n_questions,
        n_non_questions,
        total_words,
        mlu_overall: mlu(spoken.iter().copied()),
        mlu_question: mlu(questions.iter().copied()),
        mlu_non_question: mlu(statements.iter().copied()),
        words_per_minute: total_words as f64 / minutes,
        n_responded_questions,
        n_responded_non_questions,
        prop_responded_questions: response_proportion(n_responded_questions, n_questions)?,
        prop_responded_non_questions: response_proportion(
            n_responded_non_questions,
            n_non_questions,
        )?,
        pct_questions: response_proportion(n_questions, n_utterances)?,
        lexical_diversity_per_minute: ld_mean * 60.0 / cfg.ld_window,
        lexical_diversity_pooled: lexical_diversity_pooled(transcript, role)?,
        ld_windows: per_window.len() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transcript::{RecordingMeta, Source};

    fn meta(minutes: f64) -> RecordingMeta {
        RecordingMeta {
            recording_id: "rec".into(),
            wearer_role: SpeakerRole::Child,
            classroom_id: "C1".into(),
            academic_year: "2223".into(),
            duration_minutes: minutes,
        }
    }

    fn t(minutes: f64, rows: &[(f64, f64, &str, SpeakerRole)]) -> Transcript {
        let us = rows
            .iter()
            .enumerate()
            .map(|(i, &(on, off, text, role))| {
                Utterance::new(UttId(i as u64 + 1), on, off, text, role, Source::Expert)
            })
            .collect();
        Transcript::new(meta(minutes), us)
    }

    use SpeakerRole::{Child as C, Teacher as T};

    #[test]
    fn mlu_examples() {
        let tr = t(
            1.0,
            &[
                (0.0, 1.0, "a b c", T),
                (2.0, 3.0, "a b c d e", T),
                (4.0, 5.0, "[laughs]", T),
            ],
        );
        assert_eq!(mlu(&tr.utterances), Some(4.0));
        assert_eq!(mlu(std::iter::empty()), None);
    }

    #[test]
    fn words_per_minute_examples() {
        let text = vec!["w"; 100].join(" ");
        let tr = t(4.0, &[(0.0, 30.0, &text, T)]);
        assert_eq!(words_per_minute(&tr, T).unwrap(), 25.0);
        assert_eq!(words_per_minute(&t(4.0, &[]), T).unwrap(), 0.0);
        assert!(matches!(
            words_per_minute(&t(0.0, &[]), T),
            Err(FeatureError::ZeroDuration(_))
        ));
    }

    #[test]
    fn response_rule() {
        let yes = t(
            1.0,
            &[
                (8.0, 10.0, "juice please", C),
                (12.0, 13.0, "here you go", T),
            ],
        );
        let links = detect_responses(&yes);
        assert_eq!(links.len(), 1);
        assert_eq!(links[0].latency, 2.0);
        let no = t(
            1.0,
            &[
                (8.0, 10.0, "juice please", C),
                (12.6, 13.0, "here you go", T),
            ],
        );
        assert!(detect_responses(&no).is_empty());
        let boundary = t(
            1.0,
            &[(8.0, 10.0, "juice please", C), (12.5, 13.0, "ok", T)],
        );
        assert_eq!(detect_responses(&boundary).len(), 1);
        // Interruptions count; simultaneous starts do not.
        let overlap = t(
            1.0,
            &[
                (8.0, 10.0, "juice", C),
                (8.0, 9.0, "wait", T),
                (9.0, 9.5, "no", T),
            ],
        );
        let links = detect_responses(&overlap);
        assert_eq!(links.len(), 1);
        assert_eq!(
            (links[0].target_utt_id, links[0].response_utt_id),
            (UttId(1), UttId(3))
        );
        assert_eq!(links[0].latency, -1.0);
    }

    #[test]
    fn proportions() {
        assert!((response_proportion(40, 122).unwrap().unwrap() - 0.33).abs() < 0.005);
        assert!((response_proportion(502, 1823).unwrap().unwrap() - 0.28).abs() < 0.005);
        assert_eq!(response_proportion(0, 0).unwrap(), None);
        assert_eq!(
            response_proportion(3, 2),
            Err(FeatureError::InvalidCounts {
                responded: 3,
                total: 2
            })
        );
    }

    #[test]
    fn lexical_diversity_examples() {
        let one = t(1.0, &[(0.0, 2.0, "the cat the cat", T)]);
        assert_eq!(lexical_diversity_per_minute(&one, T).unwrap(), 2.0);
        let two = t(2.0, &[(5.0, 9.0, "a b c d", T)]);
        assert_eq!(lexical_diversity_per_minute(&two, T).unwrap(), 2.0);
        assert_eq!(lexical_diversity_pooled(&two, T).unwrap(), 2.0);
        // Onset past the end lands in the last window.
        let late = t(1.0, &[(70.0, 71.0, "x y", T)]);
        assert_eq!(lexical_types_per_window(&late, T, 60.0).unwrap(), vec![2]);
        assert_eq!(
            lexical_types_per_window(&two, T, 30.0).unwrap(),
            vec![4, 0, 0, 0]
        );
        assert_eq!(lexical_diversity_with_window(&two, T, 30.0).unwrap(), 2.0);
    }

    #[test]
    fn summarize_empty() {
        let s = summarize(&t(3.0, &[]), C).unwrap();
        assert_eq!((s.n_utterances, s.n_questions, s.n_responded()), (0, 0, 0));
        assert_eq!(s.mlu_overall, None);
        assert_eq!(s.prop_responded_questions, None);
        assert_eq!(s.pct_questions, None);
        assert_eq!(s.words_per_minute, 0.0);
        assert_eq!(s.ld_windows, 3);
    }

    #[test]
    fn summarize_counts() {
        let tr = t(
            1.0,
            &[
                (0.0, 2.0, "how is the weather?", T),
                (2.5, 3.0, "sunny", C),
                (10.0, 11.0, "what is that?", C),
                (20.0, 21.0, "a raisin", T),
                (22.0, 23.0, "[laughs]", C),
            ],
        );
        let s = summarize(&tr, C).unwrap();
        assert_eq!(
            (s.n_utterances, s.n_questions, s.n_non_questions),
            (2, 1, 1)
        );
        assert_eq!(
            (s.n_responded_questions, s.n_responded_non_questions),
            (0, 0)
        );
        assert_eq!(s.total_words, 4);
        let s = summarize(&tr, T).unwrap();
        assert_eq!(
            (s.n_responded_questions, s.n_responded_non_questions),
            (1, 0)
        );
        assert_eq!(s.mlu_question, Some(4.0));
        assert_eq!(s.pct_questions, Some(0.5));
    }
}
