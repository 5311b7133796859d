//! Corpus BLEU-4 with clipped n-gram counts and the exponential brevity
//! penalty. No smoothing at corpus level: a corpus without any matching
//! 4-gram scores 0.

use std::collections::HashMap;
use std::ops::{Add, AddAssign};

use crate::scalar::Real;

use super::MetricError;

pub const MAX_ORDER: usize = 4;

/// Add-ε constant of the per-sentence diagnostic score.
pub const SENTENCE_SMOOTHING: f64 = 0.1;

const TRAILING_PUNCT: &[char] = &['.', ',', '!', '?', ';', ':'];

/// Sufficient statistics for BLEU; corpus statistics are plain sums.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            let key: Vec<&str> = w.iter().map(AsRef::as_ref).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

impl BleuStats {
    pub fn from_sentence<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Self {
        let mut stats = Self {
            hyp_len: hypothesis.len(),
            ref_len: reference.len(),
            ..Self::default()
        };
        for n in 1..=MAX_ORDER {
            let hyp = ngram_counts(hypothesis, n);
            let reference = ngram_counts(reference, n);
            stats.totals[n - 1] = hypothesis.len().saturating_sub(n - 1);
            stats.matches[n - 1] = hyp
                .iter()
                .map(|(gram, &c)| c.min(reference.get(gram).copied().unwrap_or(0)))
                .sum();
        }
        stats
    }

    fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        }
    }

    /// Unsmoothed BLEU in `[0, 100]`.
    pub fn score<T: Real>(&self) -> T {
        if self.matches.contains(&0) {
            return T::zero();
        }
        let log_precision: f64 = self
            .matches
            .iter()
            .zip(&self.totals)
            .map(|(&m, &t)| (m as f64 / t as f64).ln())
            .sum::<f64>()
            / MAX_ORDER as f64;
        T::from_f64_lossy(100.0 * self.brevity_penalty() * log_precision.exp())
    }

    /// BLEU with `eps` added to matches and totals of orders 2..=4.
    pub fn smoothed_score<T: Real>(&self, eps: f64) -> T {
        let mut log_precision = 0.0;
        for n in 0..MAX_ORDER {
            let (mut m, mut t) = (self.matches[n] as f64, self.totals[n] as f64);
            if n > 0 {
                m += eps;
                t += eps;
            }
            if m == 0.0 || t == 0.0 {
                return T::zero();
            }
            log_precision += (m / t).ln();
        }
        let bleu = self.brevity_penalty() * (log_precision / MAX_ORDER as f64).exp();
        T::from_f64_lossy(100.0 * bleu)
    }
}

impl Add for BleuStats {
    type Output = Self;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl AddAssign for BleuStats {
    fn add_assign(&mut self, rhs: Self) {
        for n in 0..MAX_ORDER {
            self.matches[n] += rhs.matches[n];
            self.totals[n] += rhs.totals[n];
        }
        self.hyp_len += rhs.hyp_len;
        self.ref_len += rhs.ref_len;
    }
}

/// Corpus BLEU over pre-tokenized sentences, one reference per hypothesis.
pub fn corpus_bleu<T: Real, S: AsRef<str>>(references: &[Vec<S>], hypotheses: &[Vec<S>]) -> Result<T, MetricError> {
    if references.len() != hypotheses.len() {
        return Err(MetricError::LengthMismatch {
            references: references.len(),
            hypotheses: hypotheses.len(),
        });
    }
    if references.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let stats = references
        .iter()
        .zip(hypotheses)
        .map(|(r, h)| BleuStats::from_sentence(r, h))
        .fold(BleuStats::default(), Add::add);
    Ok(stats.score())
}

/// Tokenization applied to detokenized text before scoring: whitespace split,
/// then trailing `. , ! ? ; :` characters become separate tokens.
pub fn bleu_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let stem = word.trim_end_matches(TRAILING_PUNCT);
        if !stem.is_empty() {
            out.push(stem.to_owned());
        }
        out.extend(word[stem.len()..].chars().map(String::from));
    }
    out
}

/// Corpus BLEU over raw (detokenized) strings.
pub fn corpus_bleu_detok<T: Real, S: AsRef<str>>(references: &[S], hypotheses: &[S]) -> Result<T, MetricError> {
    let refs: Vec<_> = references.iter().map(|s| bleu_tokenize(s.as_ref())).collect();
    let hyps: Vec<_> = hypotheses.iter().map(|s| bleu_tokenize(s.as_ref())).collect();
    corpus_bleu(&refs, &hyps)
}

/// Per-sentence diagnostic BLEU with add-ε smoothing. Not comparable with
/// corpus scores.
pub fn sentence_bleu_smoothed<T: Real, S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> T {
    BleuStats::from_sentence(reference, hypothesis).smoothed_score(SENTENCE_SMOOTHING)
}
