//! Evaluation reports: canonical JSON plus a BLEU pivot table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::metrics::LanguageResult;
use crate::policy::Mode;
use crate::stream::TargetLanguage;

/// The settings that determine a report's content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub agent: String,
    pub manifest: String,
    pub mode: Mode,
    pub k: BTreeMap<TargetLanguage, usize>,
    pub q: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceLanguage {
    pub hypothesis: String,
    /// Smoothed sentence-level diagnostic, not comparable with corpus BLEU.
    pub sentence_bleu: f64,
    pub al: Option<f64>,
    pub ap: Option<f64>,
    pub dal: Option<f64>,
    pub g: Vec<usize>,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceReport {
    pub id: String,
    pub src_len: usize,
    pub languages: BTreeMap<TargetLanguage, UtteranceLanguage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: ConfigEcho,
    pub languages: BTreeMap<TargetLanguage, LanguageResult>,
    pub utterances: Vec<UtteranceReport>,
    pub failures: Vec<Failure>,
    /// Seconds since the Unix epoch. Not part of the payload.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<u64>,
}

impl Report {
    /// Pretty JSON with keys sorted at every level.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("report serializes");
        serde_json::to_string_pretty(&value).expect("value serializes") + "\n"
    }

    /// The JSON without the timestamp.
    pub fn payload_json(&self) -> String {
        Report {
            generated_at: None,
            ..self.clone()
        }
        .to_json()
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

fn cell(bleu: Option<f64>) -> String {
    bleu.map_or_else(|| "-".to_owned(), |b| format!("{b:.2}"))
}

/// BLEU pivot. When every report is synchronous: one row per language, one
/// column per k. Otherwise one row per report with its k values and
/// per-language BLEU.
pub fn pivot_tsv(reports: &[Report]) -> String {
    let langs: BTreeSet<&TargetLanguage> = reports.iter().flat_map(|r| r.config.k.keys()).collect();
    let mut out = String::new();
    if reports.iter().all(|r| r.config.mode == Mode::Sync) {
        let ks: BTreeSet<usize> = reports.iter().flat_map(|r| r.config.k.values().copied()).collect();
        let mut table: BTreeMap<(&TargetLanguage, usize), f64> = BTreeMap::new();
        for r in reports {
            for (lang, res) in &r.languages {
                if table.insert((lang, res.k), res.bleu).is_some() {
                    log::warn!("several reports for {lang} at k={}; keeping the last", res.k);
                }
            }
        }
        out.push_str("lang");
        for k in &ks {
            write!(out, "\tk={k}").expect("string write");
        }
        out.push('\n');
        for lang in &langs {
            out.push_str(lang.tag());
            for &k in &ks {
                write!(out, "\t{}", cell(table.get(&(*lang, k)).copied())).expect("string write");
            }
            out.push('\n');
        }
    } else {
        out.push_str("mode");
        for lang in &langs {
            write!(out, "\tk_{lang}").expect("string write");
        }
        for lang in &langs {
            write!(out, "\tbleu_{lang}").expect("string write");
        }
        out.push('\n');
        for r in reports {
            out.push_str(&r.config.mode.to_string());
            for lang in &langs {
                let k = r.config.k.get(*lang).map_or_else(|| "-".to_owned(), usize::to_string);
                write!(out, "\t{k}").expect("string write");
            }
            for lang in &langs {
                write!(out, "\t{}", cell(r.languages.get(*lang).map(|l| l.bleu))).expect("string write");
            }
            out.push('\n');
        }
    }
    out
}
