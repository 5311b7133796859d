//! Corpus generation, training and evaluation runs.

mod report;
mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::protocol::RemoteFactory;
use crate::agent::{run_session, AgentFactory, ModelFactory, OracleFactory, SessionTrace, UniformFactory};
use crate::manifest::{load_manifest, LoadOptions, ManifestError};
use crate::metrics::{
    average_lagging, average_proportion, corpus_bleu_detok, differentiable_average_lagging, sentence_bleu_smoothed,
    LanguageResult, LatencyInput,
};
use crate::model::{
    language_loss, train_count_model, CountModelConfig, ModelError, Variant, Vocabulary, DEFAULT_VOCAB_CAP,
};
use crate::policy::Schedule;
use crate::stream::{TargetLanguage, Utterance};
use crate::{CountModel, TrainedModel};

pub use report::{pivot_tsv, ConfigEcho, Failure, Report, UtteranceLanguage, UtteranceReport};
pub use synthetic::{generate_synthetic, write_corpus, SyntheticConfig, SyntheticCorpus};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("agent failure: {0}")]
    Agent(String),
}

impl HarnessError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Data(_) => 2,
            HarnessError::Agent(_) => 3,
        }
    }
}

impl From<ManifestError> for HarnessError {
    fn from(e: ManifestError) -> Self {
        HarnessError::Data(e.to_string())
    }
}

impl From<ModelError> for HarnessError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::EmptyCorpus => HarnessError::Data(e.to_string()),
            _ => HarnessError::Config(e.to_string()),
        }
    }
}

/// Which agent answers write grants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AgentSpec {
    Oracle,
    /// Random tokens; without an explicit seed the run seed is used.
    Uniform(Option<u64>),
    Model(PathBuf),
    Remote(String),
}

impl FromStr for AgentSpec {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || HarnessError::Config(format!("unknown agent {s:?}"));
        if s == "oracle" {
            Ok(AgentSpec::Oracle)
        } else if s == "uniform" {
            Ok(AgentSpec::Uniform(None))
        } else if let Some(seed) = s.strip_prefix("uniform:") {
            seed.parse().map(|v| AgentSpec::Uniform(Some(v))).map_err(|_| bad())
        } else if let Some(path) = s.strip_prefix("model:").filter(|p| !p.is_empty()) {
            Ok(AgentSpec::Model(PathBuf::from(path)))
        } else if s.starts_with("tcp://") {
            match s.parse::<crate::agent::protocol::Endpoint>() {
                Ok(crate::agent::protocol::Endpoint::Tcp(addr)) => Ok(AgentSpec::Remote(addr)),
                _ => Err(bad()),
            }
        } else {
            Err(bad())
        }
    }
}

impl fmt::Display for AgentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentSpec::Oracle => f.write_str("oracle"),
            AgentSpec::Uniform(None) => f.write_str("uniform"),
            AgentSpec::Uniform(Some(seed)) => write!(f, "uniform:{seed}"),
            AgentSpec::Model(path) => write!(f, "model:{}", path.display()),
            AgentSpec::Remote(addr) => write!(f, "tcp://{addr}"),
        }
    }
}

/// Resolve an agent spec. `corpus` supplies references for the oracle and
/// word lists for the uniform agent.
pub fn build_factory(spec: &AgentSpec, corpus: &[Utterance], seed: u64) -> Result<Arc<dyn AgentFactory>, HarnessError> {
    Ok(match spec {
        AgentSpec::Oracle => Arc::new(OracleFactory::new(corpus)),
        AgentSpec::Uniform(s) => Arc::new(UniformFactory::new(s.unwrap_or(seed), corpus)),
        AgentSpec::Model(path) => {
            let model = TrainedModel::load(path)?;
            Arc::new(ModelFactory::<f64, CountModel>::new(Arc::new(model)))
        }
        AgentSpec::Remote(addr) => {
            let remote = RemoteFactory::new(addr.clone());
            remote
                .probe()
                .map_err(|e| HarnessError::Agent(format!("cannot reach tcp://{addr}: {e}")))?;
            Arc::new(remote)
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub schedule: Schedule,
    pub agent: AgentSpec,
    pub workers: usize,
    pub out: Option<PathBuf>,
    pub q: usize,
    pub dim: usize,
    pub seed: u64,
}

impl RunConfig {
    pub fn languages(&self) -> Vec<TargetLanguage> {
        self.schedule.languages().cloned().collect()
    }

    fn echo(&self) -> ConfigEcho {
        ConfigEcho {
            agent: self.agent.to_string(),
            manifest: self.manifest.display().to_string(),
            mode: self.schedule.mode(),
            k: self.schedule.k_map().clone(),
            q: self.q,
            seed: self.seed,
        }
    }
}

/// Run every utterance through its own session on a pool of `workers`
/// threads. Traces come back in corpus order.
pub fn evaluate(
    corpus: &[Utterance],
    schedule: &Schedule,
    factory: &dyn AgentFactory,
    workers: usize,
) -> Result<Vec<SessionTrace>, HarnessError> {
    if workers == 0 {
        return Err(HarnessError::Config("workers must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(pool.install(|| corpus.par_iter().map(|u| run_session(u, schedule, factory)).collect()))
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Score traces against their utterances. Failed sessions are listed and
/// left out of the metrics.
pub fn build_report(echo: ConfigEcho, corpus: &[Utterance], traces: &[SessionTrace]) -> Result<Report, HarnessError> {
    let mut pairs: Vec<(&Utterance, &SessionTrace)> = corpus.iter().zip(traces).collect();
    pairs.sort_by(|a, b| a.0.id.cmp(&b.0.id));

    let mut failures = Vec::new();
    let mut utterances = Vec::new();
    let mut refs: BTreeMap<&TargetLanguage, (Vec<String>, Vec<String>)> = BTreeMap::new();
    let mut lat: BTreeMap<&TargetLanguage, [Vec<f64>; 3]> = BTreeMap::new();
    let mut undefined: BTreeMap<&TargetLanguage, usize> = BTreeMap::new();
    for (utt, trace) in pairs {
        if let Some(reason) = &trace.failure {
            failures.push(Failure {
                id: utt.id.clone(),
                reason: reason.clone(),
            });
            continue;
        }
        let mut languages = BTreeMap::new();
        for (lang, lt) in &trace.languages {
            let reference = utt.reference(lang).map_err(|e| HarnessError::Data(e.to_string()))?;
            let entry = refs.entry(lang).or_default();
            entry.0.push(reference.join(" "));
            entry.1.push(lt.hypothesis.join(" "));
            let (al, ap, dal) = match LatencyInput::new(lt.g.clone(), trace.src_len) {
                Ok(inp) => {
                    let v = [
                        average_lagging::<f64>(&inp),
                        average_proportion::<f64>(&inp),
                        differentiable_average_lagging::<f64>(&inp),
                    ];
                    let acc = lat.entry(lang).or_default();
                    for (a, x) in acc.iter_mut().zip(v) {
                        a.push(x);
                    }
                    (Some(v[0]), Some(v[1]), Some(v[2]))
                }
                Err(_) => {
                    *undefined.entry(lang).or_default() += 1;
                    (None, None, None)
                }
            };
            languages.insert(
                lang.clone(),
                UtteranceLanguage {
                    hypothesis: lt.hypothesis.join(" "),
                    sentence_bleu: sentence_bleu_smoothed(reference, &lt.hypothesis),
                    al,
                    ap,
                    dal,
                    g: lt.g.clone(),
                    truncated: lt.truncated,
                },
            );
        }
        utterances.push(UtteranceReport {
            id: utt.id.clone(),
            src_len: trace.src_len,
            languages,
        });
    }
    if utterances.is_empty() {
        let reason = failures
            .first()
            .map_or_else(|| "empty corpus".to_owned(), |f| f.reason.clone());
        return Err(if corpus.is_empty() {
            HarnessError::Data(reason)
        } else {
            HarnessError::Agent(format!("all {} sessions failed; first: {reason}", failures.len()))
        });
    }

    let mut languages = BTreeMap::new();
    for (lang, &k) in &echo.k {
        let (r, h) = refs.remove(lang).unwrap_or_default();
        let bleu = corpus_bleu_detok::<f64, _>(&r, &h).map_err(|e| HarnessError::Data(e.to_string()))?;
        let [al, ap, dal] = lat.remove(lang).unwrap_or_default();
        languages.insert(
            lang.clone(),
            LanguageResult {
                k,
                bleu,
                al: mean(&al),
                ap: mean(&ap),
                dal: mean(&dal),
                utterances: r.len(),
                undefined_latency: undefined.get(lang).copied().unwrap_or(0),
            },
        );
    }
    Ok(Report {
        config: echo,
        languages,
        utterances,
        failures,
        generated_at: None,
    })
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Path of the TSV written next to a JSON report.
pub fn tsv_path(json_path: &Path) -> PathBuf {
    json_path.with_extension("tsv")
}

pub fn write_report(report: &Report, path: &Path) -> Result<(), HarnessError> {
    let io = |p: &Path, e: std::io::Error| HarnessError::Data(format!("{}: {e}", p.display()));
    fs::write(path, report.to_json()).map_err(|e| io(path, e))?;
    let tsv = tsv_path(path);
    fs::write(&tsv, pivot_tsv(std::slice::from_ref(report))).map_err(|e| io(&tsv, e))
}

/// Load the manifest, resolve the agent, evaluate and (optionally) write
/// `out` plus its TSV pivot.
pub fn run_eval(cfg: &RunConfig) -> Result<Report, HarnessError> {
    let options = LoadOptions { q: cfg.q, dim: cfg.dim };
    let corpus = load_manifest(&cfg.manifest, &cfg.languages(), options)?;
    if corpus.is_empty() {
        return Err(HarnessError::Data(format!(
            "{} has no utterances",
            cfg.manifest.display()
        )));
    }
    let factory = build_factory(&cfg.agent, &corpus, cfg.seed)?;
    let traces = evaluate(&corpus, &cfg.schedule, &*factory, cfg.workers)?;
    let mut report = build_report(cfg.echo(), &corpus, &traces)?;
    report.generated_at = Some(unix_now());
    for f in &report.failures {
        log::warn!("{}: {}", f.id, f.reason);
    }
    if let Some(out) = &cfg.out {
        write_report(&report, out)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub manifest: PathBuf,
    pub k: BTreeMap<TargetLanguage, usize>,
    pub variant: Variant,
    pub model: CountModelConfig,
    pub vocab_cap: usize,
    pub q: usize,
    pub dim: usize,
    pub out: PathBuf,
}

impl TrainConfig {
    pub fn new(manifest: PathBuf, k: BTreeMap<TargetLanguage, usize>, out: PathBuf) -> Self {
        Self {
            manifest,
            k,
            variant: Variant::Unified,
            model: CountModelConfig::default(),
            vocab_cap: DEFAULT_VOCAB_CAP,
            q: crate::stream::DEFAULT_PACKET_FRAMES,
            dim: crate::stream::DEFAULT_FEATURE_DIM,
            out,
        }
    }
}

/// Training-set negative log-likelihood before and after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub variant: Variant,
    pub k: BTreeMap<TargetLanguage, usize>,
    pub epsilon: f64,
    pub vocab_size: usize,
    pub tokens: usize,
    pub initial_nll: f64,
    pub final_nll: f64,
    pub initial_nll_per_token: f64,
    pub final_nll_per_token: f64,
}

/// Build a vocabulary from `corpus`, train, and measure training NLL.
pub fn train_on(
    corpus: &[Utterance],
    variant: Variant,
    k: &BTreeMap<TargetLanguage, usize>,
    config: CountModelConfig,
    vocab_cap: usize,
) -> Result<(TrainedModel, TrainLog), HarnessError> {
    let languages: Vec<TargetLanguage> = k.keys().cloned().collect();
    let vocab = Arc::new(Vocabulary::build(corpus, &languages, vocab_cap)?);
    let model = train_count_model::<f64>(corpus, vocab.clone(), variant, k, config)?;
    let mut tokens = 0;
    let mut final_nll = 0.0;
    for utt in corpus {
        for (lang, &k) in k {
            let y = utt.reference(lang).map_err(|e| HarnessError::Data(e.to_string()))?;
            tokens += y.len();
            final_nll += language_loss::<f64, _, _>(&model, &utt.stream, lang, y, k)?;
        }
    }
    // A uniform model scores every token at ln |V|.
    let initial_nll = tokens as f64 * (vocab.len() as f64).ln();
    let log = TrainLog {
        variant,
        k: k.clone(),
        epsilon: config.epsilon,
        vocab_size: vocab.len(),
        tokens,
        initial_nll,
        final_nll,
        initial_nll_per_token: initial_nll / tokens as f64,
        final_nll_per_token: final_nll / tokens as f64,
    };
    Ok((model, log))
}

/// Path of the NLL log written next to a model file.
pub fn train_log_path(model_path: &Path) -> PathBuf {
    let mut name = model_path.as_os_str().to_owned();
    name.push(".log.json");
    PathBuf::from(name)
}

pub fn train_cmd(cfg: &TrainConfig) -> Result<TrainLog, HarnessError> {
    let languages: Vec<TargetLanguage> = cfg.k.keys().cloned().collect();
    let options = LoadOptions { q: cfg.q, dim: cfg.dim };
    let corpus = load_manifest(&cfg.manifest, &languages, options)?;
    let (model, log) = train_on(&corpus, cfg.variant, &cfg.k, cfg.model, cfg.vocab_cap)?;
    log::info!(
        "training NLL per token: {:.4} -> {:.4} over {} tokens",
        log.initial_nll_per_token,
        log.final_nll_per_token,
        log.tokens
    );
    model.save(&cfg.out).map_err(|e| HarnessError::Data(e.to_string()))?;
    let path = train_log_path(&cfg.out);
    let text =
        serde_json::to_string_pretty(&serde_json::to_value(&log).expect("log serializes")).expect("value serializes");
    fs::write(&path, text + "\n").map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
    Ok(log)
}
