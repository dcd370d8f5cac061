#![allow(dead_code)]

//! Fixtures, a synthetic corpus generator and independent oracles shared
//! by the integration suites.

use std::fs;
use std::io::Write;
use std::path::Path;

use classtalk_core::transcript::{
    RecordingMeta, Source, SpeakerRole, Transcript, UttId, Utterance,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn meta(id: &str, wearer: SpeakerRole, minutes: f64) -> RecordingMeta {
    RecordingMeta {
        recording_id: id.into(),
        wearer_role: wearer,
        classroom_id: "C3".into(),
        academic_year: "2223".into(),
        duration_minutes: minutes,
    }
}

/// (machine text, expert text, role, word count, LD, WER) per row of the
/// ten-row transcription comparison fixture.
pub const COMPARISON_ROWS: [(&str, &str, SpeakerRole, usize, usize, f64); 10] = [
    (
        "How is the weather?",
        "How is the weather?",
        SpeakerRole::Teacher,
        4,
        0,
        0.0,
    ),
    ("Sunny.", "Sunny", SpeakerRole::Child, 1, 0, 0.0),
    ("Sunny.", "It's rainy?", SpeakerRole::Teacher, 2, 2, 1.0),
    (
        "It's sunny? I don't know if it's sunny.",
        "It's sunny? I don't know if it's sunny",
        SpeakerRole::Teacher,
        8,
        0,
        0.0,
    ),
    ("It is.", "It is", SpeakerRole::Child, 2, 0, 0.0),
    (
        "It is? I think it's sunny as well.",
        "It is? I think it's sunny as well.",
        SpeakerRole::Teacher,
        8,
        0,
        0.0,
    ),
    ("Me too.", "Me too.", SpeakerRole::Child, 2, 0, 0.0),
    (
        "Yeah, you too.",
        "Yeah, you too.",
        SpeakerRole::Teacher,
        3,
        0,
        0.0,
    ),
    (
        "Oh, raisins.",
        "Oh a raisin is in there",
        SpeakerRole::Child,
        6,
        5,
        0.83,
    ),
    (
        "I love the raisins.",
        "I love the raisins",
        SpeakerRole::Child,
        4,
        0,
        0.0,
    ),
];

/// Row `i` spans [3i, 3i + 2) seconds.
pub fn comparison_files() -> (String, String) {
    let mut machine = String::new();
    let mut expert = String::from("start\tend\tspeaker\ttext\tmachine_id\n");
    for (i, (m, e, role, ..)) in COMPARISON_ROWS.iter().enumerate() {
        let (on, off) = (3.0 * i as f64, 3.0 * i as f64 + 2.0);
        machine.push_str(&format!(
            "{{\"start\":{on:.1},\"end\":{off:.1},\"text\":{},\"speaker\":\"{role}\"}}\n",
            serde_json_string(m)
        ));
        expert.push_str(&format!("{on:.1}\t{off:.1}\t{role}\t{e}\t{}\n", i + 1));
    }
    (machine, expert)
}

fn serde_json_string(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

/// Plain exponential recursion.
pub fn naive_levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = naive_levenshtein(ra, rb) + usize::from(x != y);
            let del = naive_levenshtein(ra, b) + 1;
            let ins = naive_levenshtein(a, rb) + 1;
            sub.min(del).min(ins)
        }
    }
}

/// Full-matrix Wagner–Fischer.
pub fn matrix_levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = (d[i - 1][j] + 1)
                .min(d[i][j - 1] + 1)
                .min(d[i - 1][j - 1] + cost);
        }
    }
    d[a.len()][b.len()]
}

/// ICC(A,1) with the error sum of squares obtained by subtraction from the
/// total, rather than from residuals.
pub fn anova_icc(m: &[[f64; 2]]) -> f64 {
    let n = m.len() as f64;
    let k = 2.0;
    let cells: Vec<f64> = m.iter().flatten().copied().collect();
    let grand: f64 = cells.iter().sum::<f64>() / (n * k);
    let sst: f64 = cells.iter().map(|x| (x - grand) * (x - grand)).sum();
    let mut ssr = 0.0;
    for r in m {
        let mean = (r[0] + r[1]) / 2.0;
        ssr += k * (mean - grand) * (mean - grand);
    }
    let mut ssc = 0.0;
    for j in 0..2 {
        let mean: f64 = m.iter().map(|r| r[j]).sum::<f64>() / n;
        ssc += n * (mean - grand) * (mean - grand);
    }
    let sse = sst - ssr - ssc;
    let msr = ssr / (n - 1.0);
    let msc = ssc / (k - 1.0);
    let mse = sse / ((n - 1.0) * (k - 1.0));
    (msr - mse) / (msr + (k - 1.0) * mse + k / n * (msc - mse))
}

/// Every ordered (target, response) pair satisfying the response rule,
/// found by checking all pairs.
pub fn brute_force_links(t: &Transcript, window: f64) -> Vec<(UttId, UttId)> {
    let mut out = Vec::new();
    let eligible = |u: &Utterance| u.role != SpeakerRole::Other && !u.tokens.is_empty();
    for a in &t.utterances {
        for b in &t.utterances {
            if eligible(a)
                && eligible(b)
                && a.role != b.role
                && b.onset > a.onset
                && b.onset - a.offset <= window + 1e-9
            {
                out.push((a.id, b.id));
            }
        }
    }
    out.sort();
    out
}

fn oracle_iou(a: &Utterance, b: &Utterance) -> f64 {
    let lo = a.onset.max(b.onset);
    let hi = a.offset.min(b.offset);
    let union = a.offset.max(b.offset) - a.onset.min(b.onset);
    if union <= 0.0 {
        return if a.onset == b.onset { 1.0 } else { 0.0 };
    }
    if hi > lo {
        (hi - lo) / union
    } else {
        0.0
    }
}

fn oracle_similarity(a: &Utterance, b: &Utterance) -> f64 {
    let longest = a.tokens.len().max(b.tokens.len());
    if longest == 0 {
        1.0
    } else {
        (1.0 - matrix_levenshtein(&a.tokens, &b.tokens) as f64 / longest as f64).max(0.0)
    }
}

/// Maximum over every monotone one-to-one matching of
/// Σ score − gap × unmatched, by enumeration.
pub fn brute_force_alignment(
    machine: &[Utterance],
    expert: &[Utterance],
    gap: f64,
    similarity_weight: f64,
    max_onset_gap: Option<f64>,
) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn go(
        i: usize,
        j_min: usize,
        matched: usize,
        acc: f64,
        score: &dyn Fn(usize, usize) -> Option<f64>,
        n: usize,
        m: usize,
        gap: f64,
        best: &mut f64,
    ) {
        let total = acc - gap * ((n - matched) + (m - matched)) as f64;
        if i == n {
            if total > *best {
                *best = total;
            }
            return;
        }
        // machine i unmatched
        go(i + 1, j_min, matched, acc, score, n, m, gap, best);
        for j in j_min..m {
            if let Some(s) = score(i, j) {
                go(i + 1, j + 1, matched + 1, acc + s, score, n, m, gap, best);
            }
        }
    }
    let score = |i: usize, j: usize| -> Option<f64> {
        let (a, b) = (&machine[i], &expert[j]);
        if let Some(w) = max_onset_gap {
            if (a.onset - b.onset).abs() > w {
                return None;
            }
        }
        Some(
            similarity_weight * oracle_similarity(a, b)
                + (1.0 - similarity_weight) * oracle_iou(a, b),
        )
    };
    let mut best = f64::NEG_INFINITY;
    go(
        0,
        0,
        0,
        0.0,
        &score,
        machine.len(),
        expert.len(),
        gap,
        &mut best,
    );
    best
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

pub const VOCAB: &[&str] = &[
    "the", "a", "cat", "dog", "juice", "raisin", "raisins", "sunny", "rainy", "weather", "look",
    "what", "is", "it", "that", "you", "me", "too", "i", "want", "more", "play", "block", "tower",
    "red", "blue", "green", "big", "little", "outside", "snack", "time", "circle", "sit", "down",
    "please", "thank", "yes", "no", "okay", "where", "why", "how", "this", "there", "here", "go",
    "come", "let's", "don't", "can", "we", "they", "ball", "book", "read", "draw", "paint",
    "music", "song", "dance", "friend", "teacher", "mom", "dad", "home", "lunch", "apple",
    "banana", "water", "hands", "wash", "clean", "up", "car", "truck", "train", "bus", "fish",
    "bird",
];

pub fn random_text(rng: &mut impl Rng, max_words: usize, question_p: f64) -> String {
    let n = rng.gen_range(1..=max_words);
    let words: Vec<&str> = (0..n).map(|_| *VOCAB.choose(rng).unwrap()).collect();
    let mut text = words.join(" ");
    text.push(if rng.gen_bool(question_p) { '?' } else { '.' });
    text
}

/// Random teacher/child transcript with utterances roughly every
/// `spacing` seconds.
pub fn random_transcript(rng: &mut impl Rng, n: usize, spacing: f64, source: Source) -> Transcript {
    let mut t = 0.0;
    let mut us = Vec::with_capacity(n);
    for i in 0..n {
        t += rng.gen_range(0.0..spacing);
        let len = rng.gen_range(0.2..4.0);
        let role = match rng.gen_range(0..20) {
            0 => SpeakerRole::Other,
            1..=9 => SpeakerRole::Teacher,
            _ => SpeakerRole::Child,
        };
        let text = if rng.gen_bool(0.03) {
            "[laughs]".to_string()
        } else {
            random_text(rng, 6, 0.2)
        };
        us.push(Utterance::new(
            UttId(i as u64 + 1),
            t,
            t + len,
            text,
            role,
            source,
        ));
    }
    let minutes = (t + 5.0) / 60.0;
    Transcript::new(meta("synthetic", SpeakerRole::Teacher, minutes), us)
}

/// Knobs for [`write_synthetic_corpus`].
#[derive(Debug, Clone, Copy)]
pub struct SynthParams {
    pub recordings: usize,
    pub utterances_per_recording: usize,
    pub seed: u64,
}

/// Writes `<id>.machine.jsonl`, `<id>.expert.tsv` and `<id>.meta.json` for
/// each recording. The machine side is a perturbed copy of the expert side
/// (word substitutions, label flips, jitter, drops, insertions); every
/// other recording is linked by machine id. Returns the total number of
/// utterances written across both sides.
pub fn write_synthetic_corpus(dir: &Path, params: SynthParams) -> usize {
    fs::create_dir_all(dir).unwrap();
    let mut total = 0;
    for r in 0..params.recordings {
        let mut rng =
            ChaCha8Rng::seed_from_u64(params.seed.wrapping_mul(1_000_003).wrapping_add(r as u64));
        let id = format!("rec{r:05}");
        let wearer = if r % 3 == 0 {
            SpeakerRole::Teacher
        } else {
            SpeakerRole::Child
        };
        let mut expert = String::from("start\tend\tspeaker\ttext\tmachine_id\n");
        let mut machine = String::new();
        let linked = r % 2 == 0;
        let mut t = 0.0f64;
        let mut machine_line = 0u64;
        let mut n_machine = 0;
        let mut n_expert = 0;
        let half = params.utterances_per_recording / 2;
        while n_expert < half {
            t += rng.gen_range(0.5..4.5);
            let len = rng.gen_range(0.5..3.5);
            let role = if rng.gen_bool(0.55) {
                SpeakerRole::Teacher
            } else {
                SpeakerRole::Child
            };
            let text = random_text(&mut rng, 8, 0.18);

            let mut link = String::new();
            if !rng.gen_bool(0.03) {
                let mut words: Vec<String> = text
                    .trim_end_matches(['.', '?'])
                    .split(' ')
                    .map(str::to_owned)
                    .collect();
                for w in words.iter_mut() {
                    if rng.gen_bool(0.1) {
                        *w = VOCAB.choose(&mut rng).unwrap().to_string();
                    }
                }
                let mut mtext = words.join(" ");
                mtext.push(if text.ends_with('?') { '?' } else { '.' });
                let mrole = if rng.gen_bool(0.15) {
                    if role == SpeakerRole::Teacher {
                        SpeakerRole::Child
                    } else {
                        SpeakerRole::Teacher
                    }
                } else {
                    role
                };
                let j = rng.gen_range(-0.2..0.2);
                machine_line += 1;
                machine.push_str(&format!(
                    "{{\"start\":{:.3},\"end\":{:.3},\"text\":\"{mtext}\",\"speaker\":\"{mrole}\"}}\n",
                    (t + j).max(0.0),
                    t + j + len
                ));
                n_machine += 1;
                if linked {
                    link = machine_line.to_string();
                }
            }
            expert.push_str(&format!("{t:.3}\t{:.3}\t{role}\t{text}\t{link}\n", t + len));
            n_expert += 1;

            if rng.gen_bool(0.02) {
                machine_line += 1;
                machine.push_str(&format!(
                    "{{\"start\":{:.3},\"end\":{:.3},\"text\":\"{}\",\"speaker\":\"other\"}}\n",
                    t + len + 0.1,
                    t + len + 0.4,
                    random_text(&mut rng, 3, 0.0)
                ));
                n_machine += 1;
            }
        }
        let minutes = (t + 10.0) / 60.0;
        let meta_json = format!(
            "{{\"recording_id\":\"{id}\",\"wearer_role\":\"{wearer}\",\"classroom_id\":\"C{}\",\"academic_year\":\"{}\",\"duration_minutes\":{minutes:.4}}}",
            r % 6 + 1,
            if r % 2 == 0 { "2223" } else { "2324" }
        );
        fs::File::create(dir.join(format!("{id}.machine.jsonl")))
            .unwrap()
            .write_all(machine.as_bytes())
            .unwrap();
        fs::File::create(dir.join(format!("{id}.expert.tsv")))
            .unwrap()
            .write_all(expert.as_bytes())
            .unwrap();
        fs::write(dir.join(format!("{id}.meta.json")), meta_json).unwrap();
        total += n_machine + n_expert;
    }
    total
}

/// Every file under `dir`, relative path → bytes, sorted.
pub fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = walk(dir)
        .into_iter()
        .map(|p| {
            (
                p.strip_prefix(dir).unwrap().display().to_string(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut files = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files.extend(walk(&p));
        } else {
            files.push(p);
        }
    }
    files
}

/// Peak resident set size of this process in bytes (Linux only).
pub fn peak_rss_bytes() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}
