//! Post-recognition analysis of classroom speech.
//!
//! Machine transcripts (speech recognition plus teacher/child speaker
//! labels) are compared with expert annotations of the same recordings:
//!
//! * [`transcript`]: domain types, normalization, tokenization, questions
//! * [`ingest`]: machine JSONL, expert tables and metadata sidecars
//! * [`align`]: pairing machine and expert utterances
//! * [`features`]: MLU, speech rate, questions, responses, lexical diversity
//! * [`reliability`]: WER, confusion metrics, kappa, ICC
//! * [`batch`]: corpus discovery, parallel pipeline and report tables

pub mod align;
pub mod batch;
pub mod features;
pub mod ingest;
pub mod reliability;
pub mod transcript;

pub use align::{
    align_by_index, align_by_time, align_recording, cross_classify, AlignConfig, AlignedCorpus,
    AlignedPair,
};
pub use batch::{
    discover, emit_report, run_pipeline, CorpusManifest, PipelineResults, ReportFormat, RunConfig,
};
pub use features::{summarize, FeatureSummary, ResponseLink};
pub use ingest::{parse_expert, parse_machine, parse_meta, validate};
pub use reliability::{ConfusionMatrix, ReliabilityReport};
pub use transcript::{
    normalize, tokenize, RecordingMeta, Source, SpeakerRole, Transcript, UttId, Utterance,
};
