//! Translation quality and latency metrics.

mod bleu;
mod latency;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stream::TargetLanguage;

pub use bleu::{
    bleu_tokenize, corpus_bleu, corpus_bleu_detok, sentence_bleu_smoothed, BleuStats, MAX_ORDER, SENTENCE_SMOOTHING,
};
pub use latency::{average_lagging, average_proportion, differentiable_average_lagging, smoothed_delays, LatencyInput};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{references} references but {hypotheses} hypotheses")]
    LengthMismatch { references: usize, hypotheses: usize },
    #[error("latency undefined: {0}")]
    UndefinedLatency(String),
}

/// Scores for one target language, aggregated over a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageResult {
    pub k: usize,
    pub bleu: f64,
    /// Unweighted means over utterances with defined latency; `None` if no
    /// utterance had one.
    pub al: Option<f64>,
    pub ap: Option<f64>,
    pub dal: Option<f64>,
    pub utterances: usize,
    pub undefined_latency: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub languages: BTreeMap<TargetLanguage, LanguageResult>,
    pub utterances: usize,
}
