//! Pairing of machine and expert utterances within one recording.
//!
//! Expert files edited from a copy of the machine transcript carry the
//! machine line id on each row and are paired by id ([`align_by_index`]).
//! Everything else is paired by a monotone dynamic program over time
//! overlap and word-level text similarity ([`align_by_time`]).

use std::collections::HashMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reliability::{levenshtein, ConfusionMatrix};
use crate::transcript::{RecordingMeta, SpeakerRole, Transcript, UttId, Utterance};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AlignError {
    #[error("expert transcript for {0} is not linked to machine ids")]
    NotLinked(String),
}

/// Parameters of the time/text alignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    /// Cost of leaving one utterance unmatched.
    pub gap_penalty: f64,
    /// Weight of text similarity in the pair score; the rest goes to time IoU.
    pub similarity_weight: f64,
    /// Matched pairs below both `min_iou` and `min_similarity` are demoted
    /// to residues.
    pub min_iou: f64,
    pub min_similarity: f64,
    /// Pairs whose onsets differ by more than this many seconds may not be
    /// matched. `None` searches every pair.
    pub max_onset_gap: Option<f64>,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            gap_penalty: 0.05,
            similarity_weight: 0.5,
            min_iou: 0.10,
            min_similarity: 0.2,
            max_onset_gap: Some(60.0),
        }
    }
}

/// Intersection over union of two time intervals. Two identical
/// zero-length intervals have IoU 1.
pub fn time_iou(a: &Utterance, b: &Utterance) -> f64 {
    let inter = (a.offset.min(b.offset) - a.onset.max(b.onset)).max(0.0);
    let union = a.offset.max(b.offset) - a.onset.min(b.onset);
    if union <= 0.0 {
        return if a.onset == b.onset { 1.0 } else { 0.0 };
    }
    (inter / union).clamp(0.0, 1.0)
}

/// `1 − LD / max(word counts)`, clamped to [0, 1]; 1 when both are empty.
pub fn text_similarity<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    (1.0 - levenshtein(a, b) as f64 / longest as f64).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedPair {
    pub machine_utt: Utterance,
    pub expert_utt: Utterance,
    pub time_iou: f64,
    pub text_similarity: f64,
}

impl AlignedPair {
    pub fn new(machine_utt: Utterance, expert_utt: Utterance) -> Self {
        Self {
            time_iou: time_iou(&machine_utt, &expert_utt),
            text_similarity: text_similarity(&machine_utt.tokens, &expert_utt.tokens),
            machine_utt,
            expert_utt,
        }
    }
}

/// One recording's alignment: matched pairs in time order plus the
/// utterances on each side left without a partner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedCorpus {
    pub meta: RecordingMeta,
    pub pairs: Vec<AlignedPair>,
    pub machine_only: Vec<Utterance>,
    pub expert_only: Vec<Utterance>,
}

/// Pairs expert rows with the machine utterances they were edited from.
///
/// Links that would cross an earlier pair in time are dropped to residues;
/// the longest non-crossing set of links is kept.
pub fn align_by_index(
    machine: &Transcript,
    expert: &Transcript,
) -> Result<AlignedCorpus, AlignError> {
    if !expert.linked {
        return Err(AlignError::NotLinked(expert.meta.recording_id.clone()));
    }
    let position: HashMap<UttId, usize> = machine
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| (u.id, i))
        .collect();

    // (expert index, machine index) candidates in expert order, first
    // claim on a machine id wins.
    let mut claimed = vec![false; machine.len()];
    let mut candidates = Vec::new();
    for (e, u) in expert.utterances.iter().enumerate() {
        if let Some(&m) = u.link.as_ref().and_then(|id| position.get(id)) {
            if !claimed[m] {
                claimed[m] = true;
                candidates.push((e, m));
            }
        }
    }
    let kept = longest_increasing(&candidates);
    let matches: Vec<(usize, usize)> = kept
        .into_iter()
        .map(|k| (candidates[k].1, candidates[k].0))
        .collect();
    Ok(assemble(machine, expert, &matches))
}

/// Indices of a longest subsequence of `pairs` strictly increasing in `.1`
/// (`.0` is already increasing). Patience sorting, O(n log n).
fn longest_increasing(pairs: &[(usize, usize)]) -> Vec<usize> {
    let mut tails: Vec<usize> = Vec::new();
    let mut prev = vec![usize::MAX; pairs.len()];
    for (i, &(_, v)) in pairs.iter().enumerate() {
        let pos = tails.partition_point(|&t| pairs[t].1 < v);
        if pos > 0 {
            prev[i] = tails[pos - 1];
        }
        if pos == tails.len() {
            tails.push(i);
        } else {
            tails[pos] = i;
        }
    }
    let mut out = Vec::with_capacity(tails.len());
    let mut cur = tails.last().copied();
    while let Some(i) = cur {
        out.push(i);
        cur = (prev[i] != usize::MAX).then(|| prev[i]);
    }
    out.reverse();
    out
}

/// Builds the corpus from `(machine index, expert index)` matches given in
/// increasing order on both sides.
fn assemble(
    machine: &Transcript,
    expert: &Transcript,
    matches: &[(usize, usize)],
) -> AlignedCorpus {
    let mut m_used = vec![false; machine.len()];
    let mut e_used = vec![false; expert.len()];
    let pairs = matches
        .iter()
        .map(|&(m, e)| {
            m_used[m] = true;
            e_used[e] = true;
            AlignedPair::new(machine.utterances[m].clone(), expert.utterances[e].clone())
        })
        .collect();
    let residue = |t: &Transcript, used: &[bool]| {
        t.utterances
            .iter()
            .zip(used)
            .filter(|(_, &u)| !u)
            .map(|(u, _)| u.clone())
            .collect()
    };
    AlignedCorpus {
        meta: expert.meta.clone(),
        pairs,
        machine_only: residue(machine, &m_used),
        expert_only: residue(expert, &e_used),
    }
}

/// Result of the alignment dynamic program before demotion.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// `(machine index, expert index)`, increasing on both sides.
    pub pairs: Vec<(usize, usize)>,
    /// Σ pair scores − gap_penalty × unmatched utterances.
    pub score: f64,
}

/// Score of matching two utterances with the given similarity and IoU.
pub fn pair_score(text_similarity: f64, time_iou: f64, cfg: &AlignConfig) -> f64 {
    cfg.similarity_weight * text_similarity + (1.0 - cfg.similarity_weight) * time_iou
}

/// Maps each utterance's tokens to per-recording integer ids so the DP
/// compares integers instead of strings.
fn intern_tokens<'a>(
    machine: &'a [Utterance],
    expert: &'a [Utterance],
) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
    let mut table: HashMap<&'a str, u32> = HashMap::new();
    let mut ids = |u: &'a Utterance| -> Vec<u32> {
        u.tokens
            .iter()
            .map(|tok| {
                let next = table.len() as u32;
                *table.entry(tok.as_str()).or_insert(next)
            })
            .collect()
    };
    let m = machine.iter().map(&mut ids).collect();
    let e = expert.iter().map(&mut ids).collect();
    (m, e)
}

const FROM_MATCH: u8 = 0;
const FROM_SKIP_MACHINE: u8 = 1;
const FROM_SKIP_EXPERT: u8 = 2;

/// Highest-scoring monotone one-to-one matching between two utterance
/// sequences, both sorted by onset.
///
/// Moves are match (pair score), skip-machine and skip-expert (each
/// `−gap_penalty`). Ties prefer match, then skip-machine.
pub fn optimal_matching(
    machine: &[Utterance],
    expert: &[Utterance],
    cfg: &AlignConfig,
) -> Matching {
    let (n, m) = (machine.len(), expert.len());
    let gap = cfg.gap_penalty;
    let (m_tok, e_tok) = intern_tokens(machine, expert);
    let width = m + 1;
    let mut back = vec![FROM_SKIP_EXPERT; (n + 1) * width];
    let mut prev: Vec<f64> = (0..=m).map(|j| -gap * j as f64).collect();
    let mut cur = vec![0.0; width];

    for i in 1..=n {
        let mu = &machine[i - 1];
        // Expert utterances eligible for a match with `mu`.
        let (lo, hi) = match cfg.max_onset_gap {
            Some(w) => (
                expert.partition_point(|e| e.onset < mu.onset - w),
                expert.partition_point(|e| e.onset <= mu.onset + w),
            ),
            None => (0, m),
        };
        cur[0] = prev[0] - gap;
        back[i * width] = FROM_SKIP_MACHINE;
        for j in 1..=m {
            let mut best = prev[j] - gap;
            let mut from = FROM_SKIP_MACHINE;
            let left = cur[j - 1] - gap;
            if left > best {
                best = left;
                from = FROM_SKIP_EXPERT;
            }
            if (lo..hi).contains(&(j - 1)) {
                let eu = &expert[j - 1];
                let s = pair_score(
                    text_similarity(&m_tok[i - 1], &e_tok[j - 1]),
                    time_iou(mu, eu),
                    cfg,
                );
                let diag = prev[j - 1] + s;
                if diag >= best {
                    best = diag;
                    from = FROM_MATCH;
                }
            }
            cur[j] = best;
            back[i * width + j] = from;
        }
        std::mem::swap(&mut prev, &mut cur);
    }

    let score = prev[m];
    let mut pairs = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        match back[i * width + j] {
            FROM_MATCH => {
                pairs.push((i - 1, j - 1));
                i -= 1;
                j -= 1;
            }
            FROM_SKIP_MACHINE => i -= 1,
            _ => j -= 1,
        }
    }
    pairs.reverse();
    Matching { pairs, score }
}

/// Aligns two transcripts of the same recording by time and text.
pub fn align_by_time(
    machine: &Transcript,
    expert: &Transcript,
    cfg: &AlignConfig,
) -> AlignedCorpus {
    align_by_time_scored(machine, expert, cfg).0
}

/// [`align_by_time`] plus the raw DP matching before weak pairs are demoted.
pub fn align_by_time_scored(
    machine: &Transcript,
    expert: &Transcript,
    cfg: &AlignConfig,
) -> (AlignedCorpus, Matching) {
    let matching = optimal_matching(&machine.utterances, &expert.utterances, cfg);
    let kept: Vec<(usize, usize)> = matching
        .pairs
        .iter()
        .copied()
        .filter(|&(i, j)| {
            let (mu, eu) = (&machine.utterances[i], &expert.utterances[j]);
            time_iou(mu, eu) >= cfg.min_iou
                || text_similarity(&mu.tokens, &eu.tokens) >= cfg.min_similarity
        })
        .collect();
    (assemble(machine, expert, &kept), matching)
}

/// Index linkage for linked expert files, time/text DP otherwise.
pub fn align_recording(
    machine: &Transcript,
    expert: &Transcript,
    cfg: &AlignConfig,
) -> AlignedCorpus {
    if expert.linked {
        if let Ok(c) = align_by_index(machine, expert) {
            return c;
        }
    }
    align_by_time(machine, expert, cfg)
}

/// Teacher/child confusion counts over matched pairs; rows are the expert
/// label, columns the machine label.
pub fn cross_classify(corpus: &AlignedCorpus) -> ConfusionMatrix {
    let mut m = ConfusionMatrix {
        residue_machine: corpus.machine_only.len() as u64,
        residue_expert: corpus.expert_only.len() as u64,
        ..ConfusionMatrix::default()
    };
    for p in &corpus.pairs {
        match (
            p.expert_utt.role.speaker_index(),
            p.machine_utt.role.speaker_index(),
        ) {
            (Some(r), Some(c)) => m.counts[r][c] += 1,
            _ => m.excluded_other += 1,
        }
    }
    m
}

#[derive(Serialize)]
struct AuditLine {
    machine_id: Option<UttId>,
    expert_id: Option<UttId>,
    machine_role: Option<SpeakerRole>,
    expert_role: Option<SpeakerRole>,
    time_iou: Option<f64>,
    text_similarity: Option<f64>,
}

/// Writes one JSON line per pair, then one per residue utterance with the
/// missing side set to null.
pub fn write_alignment<W: Write>(corpus: &AlignedCorpus, mut writer: W) -> io::Result<()> {
    let pairs = corpus.pairs.iter().map(|p| AuditLine {
        machine_id: Some(p.machine_utt.id),
        expert_id: Some(p.expert_utt.id),
        machine_role: Some(p.machine_utt.role),
        expert_role: Some(p.expert_utt.role),
        time_iou: Some(p.time_iou),
        text_similarity: Some(p.text_similarity),
    });
    let machine_only = corpus.machine_only.iter().map(|u| AuditLine {
        machine_id: Some(u.id),
        expert_id: None,
        machine_role: Some(u.role),
        expert_role: None,
        time_iou: None,
        text_similarity: None,
    });
    let expert_only = corpus.expert_only.iter().map(|u| AuditLine {
        machine_id: None,
        expert_id: Some(u.id),
        machine_role: None,
        expert_role: Some(u.role),
        time_iou: None,
        text_similarity: None,
    });
    for line in pairs.chain(machine_only).chain(expert_only) {
        serde_json::to_writer(&mut writer, &line)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
