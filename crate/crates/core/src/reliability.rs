//! Agreement statistics between machine and expert codings: word-level
//! Levenshtein distance and WER, 2x2 confusion-matrix metrics, Cohen's
//! kappa, duration-weighted means and absolute-agreement ICC.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::AlignedCorpus;
use crate::transcript::{SpeakerRole, Utterance};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReliabilityError {
    #[error("both hypothesis and reference are absent")]
    BothAbsent,
    #[error("no utterances selected for WER")]
    EmptySelection,
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("length mismatch: {values} values vs {weights} weights")]
    LengthMismatch { values: usize, weights: usize },
    #[error("total weight is zero")]
    ZeroTotalWeight,
    #[error("ICC needs at least 2 complete rows, got {0}")]
    TooFewRows(usize),
    #[error("ICC is undefined: zero denominator with non-constant ratings")]
    UndefinedIcc,
}

/// Minimum number of unit-cost insertions, deletions and substitutions
/// turning `a` into `b`.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    if b.is_empty() {
        return a.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = diag + usize::from(x != y);
            diag = row[j + 1];
            row[j + 1] = sub.min(diag + 1).min(row[j] + 1);
        }
    }
    row[b.len()]
}

/// WER between token lists: LD over the reference length, or over the
/// hypothesis length when the reference has no words.
pub fn wer_tokens<T: PartialEq>(hyp: &[T], reference: &[T]) -> f64 {
    let ld = levenshtein(hyp, reference);
    let denom = if reference.is_empty() {
        hyp.len()
    } else {
        reference.len()
    };
    if denom == 0 {
        0.0
    } else {
        ld as f64 / denom as f64
    }
}

/// Per-utterance WER. A side missing from the alignment counts every word
/// on the other side as an error (1.0).
pub fn utterance_wer(
    hyp: Option<&Utterance>,
    reference: Option<&Utterance>,
) -> Result<f64, ReliabilityError> {
    match (hyp, reference) {
        (Some(h), Some(r)) => Ok(wer_tokens(&h.tokens, &r.tokens)),
        (None, Some(_)) | (Some(_), None) => Ok(1.0),
        (None, None) => Err(ReliabilityError::BothAbsent),
    }
}

/// Running sum of per-utterance WERs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WerAccumulator {
    pub sum: f64,
    pub count: u64,
}

impl WerAccumulator {
    pub fn push(&mut self, wer: f64) {
        self.sum += wer;
        self.count += 1;
    }

    pub fn merge(&mut self, other: &WerAccumulator) {
        self.sum += other.sum;
        self.count += other.count;
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Accumulates the WER of every utterance attributed to `role` in one
/// aligned recording: matched pairs by expert role, residues at 1.0 by
/// their own role. With `wearer_match`, recordings worn by another role
/// contribute nothing.
pub fn accumulate_wer(
    corpus: &AlignedCorpus,
    role: SpeakerRole,
    wearer_match: bool,
) -> WerAccumulator {
    let mut acc = WerAccumulator::default();
    if wearer_match && corpus.meta.wearer_role != role {
        return acc;
    }
    for p in corpus.pairs.iter().filter(|p| p.expert_utt.role == role) {
        acc.push(wer_tokens(&p.machine_utt.tokens, &p.expert_utt.tokens));
    }
    let residues = corpus.machine_only.iter().chain(&corpus.expert_only);
    for _ in residues.filter(|u| u.role == role) {
        acc.push(1.0);
    }
    acc
}

/// Mean utterance WER for `role` across recordings.
pub fn corpus_wer(
    corpora: &[AlignedCorpus],
    role: SpeakerRole,
    wearer_match: bool,
) -> Result<f64, ReliabilityError> {
    let mut acc = WerAccumulator::default();
    for c in corpora {
        acc.merge(&accumulate_wer(c, role, wearer_match));
    }
    acc.mean().ok_or(ReliabilityError::EmptySelection)
}

/// Teacher/child cross-classification. Rows are the expert (truth), columns
/// the machine, index 0 = teacher, 1 = child.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 2]; 2],
    /// Pairs where either side was labeled `Other`.
    pub excluded_other: u64,
    pub residue_machine: u64,
    pub residue_expert: u64,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; 2]; 2]) -> Self {
        Self {
            counts,
            ..Self::default()
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        self.counts[0][0] + self.counts[1][1]
    }

    pub fn row_total(&self, r: usize) -> u64 {
        self.counts[r].iter().sum()
    }

    pub fn col_total(&self, c: usize) -> u64 {
        self.counts[0][c] + self.counts[1][c]
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for r in 0..2 {
            for c in 0..2 {
                self.counts[r][c] += other.counts[r][c];
            }
        }
        self.excluded_other += other.excluded_other;
        self.residue_machine += other.residue_machine;
        self.residue_expert += other.residue_expert;
    }

    fn nonempty_total(&self) -> Result<f64, ReliabilityError> {
        match self.total() {
            0 => Err(ReliabilityError::EmptyMatrix),
            t => Ok(t as f64),
        }
    }
}

pub fn accuracy(m: &ConfusionMatrix) -> Result<f64, ReliabilityError> {
    Ok(m.trace() as f64 / m.nonempty_total()?)
}

/// Support-weighted mean of per-class F1, support being the expert row total.
pub fn weighted_f1(m: &ConfusionMatrix) -> Result<f64, ReliabilityError> {
    let total = m.nonempty_total()?;
    let mut f1 = 0.0;
    for k in 0..2 {
        let tp = m.counts[k][k] as f64;
        let fn_ = m.row_total(k) as f64 - tp;
        let fp = m.col_total(k) as f64 - tp;
        let denom = 2.0 * tp + fp + fn_;
        if denom > 0.0 {
            f1 += m.row_total(k) as f64 / total * (2.0 * tp / denom);
        }
    }
    Ok(f1)
}

/// Cohen's kappa; `None` when chance agreement is 1.
pub fn cohen_kappa(m: &ConfusionMatrix) -> Result<Option<f64>, ReliabilityError> {
    let total = m.nonempty_total()?;
    let po = m.trace() as f64 / total;
    let pe: f64 = (0..2)
        .map(|k| (m.row_total(k) as f64 / total) * (m.col_total(k) as f64 / total))
        .sum();
    if pe >= 1.0 {
        return Ok(None);
    }
    Ok(Some((po - pe) / (1.0 - pe)))
}

/// Σ vᵢdᵢ / Σ dᵢ over the entries with a value.
pub fn time_weighted_mean(
    values: &[Option<f64>],
    durations: &[f64],
) -> Result<f64, ReliabilityError> {
    if values.len() != durations.len() {
        return Err(ReliabilityError::LengthMismatch {
            values: values.len(),
            weights: durations.len(),
        });
    }
    let (num, den) = values
        .iter()
        .zip(durations)
        .filter_map(|(v, d)| v.map(|v| (v * d, *d)))
        .fold((0.0, 0.0), |(n, w), (vd, d)| (n + vd, w + d));
    if den <= 0.0 {
        return Err(ReliabilityError::ZeroTotalWeight);
    }
    Ok(num / den)
}

/// Two-way, absolute-agreement, single-measure ICC.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Icc {
    pub value: f64,
    /// Rows used after dropping incomplete ones.
    pub n: usize,
    pub dropped: usize,
    /// Every cell was equal; `value` is 1.0 by convention.
    pub zero_variance: bool,
}

/// ICC over rows of `K` raters. Rows with any `None` cell are dropped.
pub fn icc_absolute_pairwise<const K: usize>(
    rows: &[[Option<f64>; K]],
) -> Result<Icc, ReliabilityError> {
    let complete: Vec<[f64; K]> = rows
        .iter()
        .filter_map(|r| {
            let mut out = [0.0; K];
            for (o, v) in out.iter_mut().zip(r) {
                *o = (*v)?;
            }
            Some(out)
        })
        .collect();
    let mut icc = icc_absolute(&complete)?;
    icc.dropped = rows.len() - complete.len();
    Ok(icc)
}

/// ICC(A,1) from the two-way ANOVA mean squares:
/// `(MSR − MSE) / (MSR + (k−1)·MSE + (k/n)·(MSC − MSE))`.
pub fn icc_absolute<const K: usize>(ratings: &[[f64; K]]) -> Result<Icc, ReliabilityError> {
    let n = ratings.len();
    if n < 2 || K < 2 {
        return Err(ReliabilityError::TooFewRows(n));
    }
    let (nf, kf) = (n as f64, K as f64);
    let grand = ratings.iter().flatten().sum::<f64>() / (nf * kf);
    let row_means: Vec<f64> = ratings.iter().map(|r| r.iter().sum::<f64>() / kf).collect();
    let col_means: Vec<f64> = (0..K)
        .map(|j| ratings.iter().map(|r| r[j]).sum::<f64>() / nf)
        .collect();

    let zero_variance = ratings.iter().flatten().all(|&x| x == ratings[0][0]);
    if zero_variance {
        return Ok(Icc {
            value: 1.0,
            n,
            dropped: 0,
            zero_variance,
        });
    }

    let ss_rows = kf * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_cols = nf * col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_err: f64 = ratings
        .iter()
        .zip(&row_means)
        .map(|(r, rm)| {
            r.iter()
                .zip(&col_means)
                .map(|(x, cm)| (x - rm - cm + grand).powi(2))
                .sum::<f64>()
        })
        .sum();
    let msr = ss_rows / (nf - 1.0);
    let msc = ss_cols / (kf - 1.0);
    let mse = ss_err / ((nf - 1.0) * (kf - 1.0));

    let denom = msr + (kf - 1.0) * mse + (kf / nf) * (msc - mse);
    if denom.abs() <= f64::EPSILON * (msr + msc + mse) {
        return Err(ReliabilityError::UndefinedIcc);
    }
    Ok(Icc {
        value: (msr - mse) / denom,
        n,
        dropped: 0,
        zero_variance,
    })
}

/// Metrics reported for one recording or an aggregate row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub f1_weighted: Option<f64>,
    pub accuracy: Option<f64>,
    pub kappa: Option<f64>,
    pub wer_teacher: Option<f64>,
    pub wer_child: Option<f64>,
}

impl MetricSet {
    pub fn from_parts(
        m: &ConfusionMatrix,
        wer_teacher: Option<f64>,
        wer_child: Option<f64>,
    ) -> Self {
        Self {
            f1_weighted: weighted_f1(m).ok(),
            accuracy: accuracy(m).ok(),
            kappa: cohen_kappa(m).ok().flatten(),
            wer_teacher,
            wer_child,
        }
    }
}

/// Reliability inputs and results for one recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingReliability {
    pub recording_id: String,
    pub classroom_id: String,
    pub academic_year: String,
    pub wearer_role: SpeakerRole,
    pub duration_minutes: f64,
    pub confusion: ConfusionMatrix,
    pub wer_teacher: WerAccumulator,
    pub wer_child: WerAccumulator,
    pub metrics: MetricSet,
}

impl RecordingReliability {
    pub fn new(corpus: &AlignedCorpus, confusion: ConfusionMatrix, wearer_match: bool) -> Self {
        let wer_teacher = accumulate_wer(corpus, SpeakerRole::Teacher, wearer_match);
        let wer_child = accumulate_wer(corpus, SpeakerRole::Child, wearer_match);
        let meta = &corpus.meta;
        Self {
            recording_id: meta.recording_id.clone(),
            classroom_id: meta.classroom_id.clone(),
            academic_year: meta.academic_year.clone(),
            wearer_role: meta.wearer_role,
            duration_minutes: meta.duration_minutes,
            metrics: MetricSet::from_parts(&confusion, wer_teacher.mean(), wer_child.mean()),
            confusion,
            wer_teacher,
            wer_child,
        }
    }
}

/// Corpus-level reliability: per-recording rows, duration-weighted means,
/// pooled metrics and per-feature ICCs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub per_recording: BTreeMap<String, RecordingReliability>,
    pub time_weighted: MetricSet,
    pub overall: MetricSet,
    pub pooled_confusion: ConfusionMatrix,
    /// Keyed by `<feature>_<role>`.
    pub iccs: BTreeMap<String, Icc>,
    /// Features whose ICC could not be computed, with the reason.
    pub icc_failures: BTreeMap<String, String>,
}

impl ReliabilityReport {
    /// Assembles the per-recording, time-weighted and pooled rows. ICCs are
    /// filled in separately.
    pub fn from_recordings(recordings: impl IntoIterator<Item = RecordingReliability>) -> Self {
        let per_recording: BTreeMap<String, RecordingReliability> = recordings
            .into_iter()
            .map(|r| (r.recording_id.clone(), r))
            .collect();
        let mut pooled = ConfusionMatrix::default();
        let mut wer_t = WerAccumulator::default();
        let mut wer_c = WerAccumulator::default();
        for r in per_recording.values() {
            pooled.merge(&r.confusion);
            wer_t.merge(&r.wer_teacher);
            wer_c.merge(&r.wer_child);
        }
        let durations: Vec<f64> = per_recording.values().map(|r| r.duration_minutes).collect();
        let weighted = |f: fn(&MetricSet) -> Option<f64>| {
            let values: Vec<Option<f64>> = per_recording.values().map(|r| f(&r.metrics)).collect();
            time_weighted_mean(&values, &durations).ok()
        };
        Self {
            time_weighted: MetricSet {
                f1_weighted: weighted(|m| m.f1_weighted),
                accuracy: weighted(|m| m.accuracy),
                kappa: weighted(|m| m.kappa),
                wer_teacher: weighted(|m| m.wer_teacher),
                wer_child: weighted(|m| m.wer_child),
            },
            overall: MetricSet::from_parts(&pooled, wer_t.mean(), wer_c.mean()),
            pooled_confusion: pooled,
            per_recording,
            iccs: BTreeMap::new(),
            icc_failures: BTreeMap::new(),
        }
    }
}
