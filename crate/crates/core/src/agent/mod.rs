//! Translation agents and the session runner that drives them.
//!
//! The scheduler decides when to read and when to write; an agent only turns
//! delivered packets into target tokens. An [`AgentFactory`] creates one
//! agent per session so concurrent sessions never share mutable state.

pub mod protocol;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::marker::PhantomData;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::model::{greedy_decode_next, DecodeContext, MultilingualModel, PrefixModel, TokenId, EOS};
use crate::policy::{Action, Schedule, SessionState};
use crate::scalar::Real;
use crate::stream::{Packet, TargetLanguage, Utterance};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("agent does not support language {0}")]
    UnsupportedLanguage(TargetLanguage),
    #[error("unknown utterance {0:?}")]
    UnknownUtterance(String),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("remote agent error: {0}")]
    Remote(String),
    #[error("timed out waiting for the agent")]
    Timeout,
    #[error("connection error: {0}")]
    Io(#[from] std::io::Error),
}

/// What an agent produces for one write grant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Emission {
    Token(String),
    Eos,
}

/// What an agent is told when a session starts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionInfo {
    pub utterance_id: String,
    pub schedule: Schedule,
}

pub trait Agent: Send {
    /// Receive the next source packet. `is_final` marks the last one.
    fn accept_packet(&mut self, packet: &Packet, is_final: bool) -> Result<(), AgentError>;

    /// Produce target token `slot` (1-based) of `lang`.
    fn write(&mut self, lang: &TargetLanguage, slot: usize) -> Result<Emission, AgentError>;

    fn end(&mut self) -> Result<(), AgentError> {
        Ok(())
    }
}

pub trait AgentFactory: Send + Sync {
    fn start(&self, info: &SessionInfo) -> Result<Box<dyn Agent>, AgentError>;
}

impl<F: AgentFactory + ?Sized> AgentFactory for Arc<F> {
    fn start(&self, info: &SessionInfo) -> Result<Box<dyn Agent>, AgentError> {
        (**self).start(info)
    }
}

/// Emits reference token `t` at slot `t`, then EOS.
pub struct OracleAgent {
    references: BTreeMap<TargetLanguage, Vec<String>>,
}

impl OracleAgent {
    pub fn new(references: BTreeMap<TargetLanguage, Vec<String>>) -> Self {
        Self { references }
    }
}

impl Agent for OracleAgent {
    fn accept_packet(&mut self, _packet: &Packet, _is_final: bool) -> Result<(), AgentError> {
        Ok(())
    }

    fn write(&mut self, lang: &TargetLanguage, slot: usize) -> Result<Emission, AgentError> {
        let reference = self
            .references
            .get(lang)
            .ok_or_else(|| AgentError::UnsupportedLanguage(lang.clone()))?;
        Ok(match reference.get(slot.wrapping_sub(1)) {
            Some(tok) => Emission::Token(tok.clone()),
            None => Emission::Eos,
        })
    }
}

/// Looks up references by utterance id.
#[derive(Debug, Clone, Default)]
pub struct OracleFactory {
    references: HashMap<String, BTreeMap<TargetLanguage, Vec<String>>>,
}

impl OracleFactory {
    pub fn new<'a>(corpus: impl IntoIterator<Item = &'a Utterance>) -> Self {
        Self {
            references: corpus
                .into_iter()
                .map(|u| (u.id.clone(), u.references.clone()))
                .collect(),
        }
    }
}

impl AgentFactory for OracleFactory {
    fn start(&self, info: &SessionInfo) -> Result<Box<dyn Agent>, AgentError> {
        let refs = self
            .references
            .get(&info.utterance_id)
            .ok_or_else(|| AgentError::UnknownUtterance(info.utterance_id.clone()))?;
        let mut selected = BTreeMap::new();
        for lang in info.schedule.languages() {
            let r = refs
                .get(lang)
                .ok_or_else(|| AgentError::UnsupportedLanguage(lang.clone()))?;
            selected.insert(lang.clone(), r.clone());
        }
        Ok(Box::new(OracleAgent::new(selected)))
    }
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub(crate) fn stable_hash(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Random baseline: every grant draws uniformly from the language's
/// vocabulary plus EOS.
pub struct UniformAgent {
    rng: ChaCha8Rng,
    vocab: Arc<BTreeMap<TargetLanguage, Vec<String>>>,
}

impl Agent for UniformAgent {
    fn accept_packet(&mut self, _packet: &Packet, _is_final: bool) -> Result<(), AgentError> {
        Ok(())
    }

    fn write(&mut self, lang: &TargetLanguage, _slot: usize) -> Result<Emission, AgentError> {
        let words = self
            .vocab
            .get(lang)
            .ok_or_else(|| AgentError::UnsupportedLanguage(lang.clone()))?;
        let i = self.rng.gen_range(0..=words.len());
        Ok(words.get(i).map_or(Emission::Eos, |w| Emission::Token(w.clone())))
    }
}

/// Seeds each session from `(seed, utterance id)`, so results do not depend
/// on session order.
#[derive(Debug, Clone)]
pub struct UniformFactory {
    seed: u64,
    vocab: Arc<BTreeMap<TargetLanguage, Vec<String>>>,
}

impl UniformFactory {
    /// The per-language word list is collected from the corpus references.
    pub fn new<'a>(seed: u64, corpus: impl IntoIterator<Item = &'a Utterance>) -> Self {
        let mut sets: BTreeMap<TargetLanguage, BTreeSet<String>> = BTreeMap::new();
        for utt in corpus {
            for (lang, reference) in &utt.references {
                sets.entry(lang.clone()).or_default().extend(reference.iter().cloned());
            }
        }
        Self {
            seed,
            vocab: Arc::new(sets.into_iter().map(|(l, s)| (l, s.into_iter().collect())).collect()),
        }
    }
}

impl AgentFactory for UniformFactory {
    fn start(&self, info: &SessionInfo) -> Result<Box<dyn Agent>, AgentError> {
        if let Some(lang) = info.schedule.languages().find(|l| !self.vocab.contains_key(*l)) {
            return Err(AgentError::UnsupportedLanguage(lang.clone()));
        }
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&self.seed.to_le_bytes());
        seed[8..16].copy_from_slice(&stable_hash(info.utterance_id.as_bytes()).to_le_bytes());
        Ok(Box::new(UniformAgent {
            rng: ChaCha8Rng::from_seed(seed),
            vocab: self.vocab.clone(),
        }))
    }
}

/// Greedy decoding with a prefix model over the packets delivered so far.
pub struct ModelAgent<T, M> {
    model: Arc<MultilingualModel<M>>,
    packets: Vec<Packet>,
    complete: bool,
    prefixes: BTreeMap<TargetLanguage, Vec<TokenId>>,
    _scalar: PhantomData<fn() -> T>,
}

impl<T: Real, M: PrefixModel<T> + Send + Sync> Agent for ModelAgent<T, M> {
    fn accept_packet(&mut self, packet: &Packet, is_final: bool) -> Result<(), AgentError> {
        self.packets.push(packet.clone());
        self.complete = is_final;
        Ok(())
    }

    fn write(&mut self, lang: &TargetLanguage, _slot: usize) -> Result<Emission, AgentError> {
        let decoder = self
            .model
            .decoder(lang)
            .ok_or_else(|| AgentError::UnsupportedLanguage(lang.clone()))?;
        let prefix = self
            .prefixes
            .get_mut(lang)
            .ok_or_else(|| AgentError::UnsupportedLanguage(lang.clone()))?;
        let ctx = DecodeContext {
            prefix,
            packets: &self.packets,
            source_complete: self.complete,
        };
        let next = greedy_decode_next(decoder, &ctx);
        if next == EOS {
            return Ok(Emission::Eos);
        }
        prefix.push(next);
        Ok(Emission::Token(decoder.vocab().token(next).to_owned()))
    }
}

pub struct ModelFactory<T, M> {
    model: Arc<MultilingualModel<M>>,
    _scalar: PhantomData<fn() -> T>,
}

impl<T, M> ModelFactory<T, M> {
    pub fn new(model: Arc<MultilingualModel<M>>) -> Self {
        Self {
            model,
            _scalar: PhantomData,
        }
    }
}

impl<T: Real, M: PrefixModel<T> + Send + Sync + 'static> AgentFactory for ModelFactory<T, M> {
    fn start(&self, info: &SessionInfo) -> Result<Box<dyn Agent>, AgentError> {
        let mut prefixes = BTreeMap::new();
        for lang in info.schedule.languages() {
            let initial = self
                .model
                .initial_prefix::<T>(lang)
                .map_err(|_| AgentError::UnsupportedLanguage(lang.clone()))?;
            prefixes.insert(lang.clone(), initial);
        }
        Ok(Box::new(ModelAgent::<T, M> {
            model: self.model.clone(),
            packets: Vec::new(),
            complete: false,
            prefixes,
            _scalar: PhantomData,
        }))
    }
}

/// One scheduler action with its logical step number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEntry {
    pub step: usize,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct LanguageTrace {
    pub hypothesis: Vec<String>,
    /// Packets read before each emitted token.
    pub g: Vec<usize>,
    pub finished: bool,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SessionTrace {
    pub utterance_id: String,
    pub src_len: usize,
    pub actions: Vec<TraceEntry>,
    pub languages: BTreeMap<TargetLanguage, LanguageTrace>,
    /// Why the session was aborted, if it was.
    pub failure: Option<String>,
}

impl SessionTrace {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

fn valid_token(token: &str) -> bool {
    !token.is_empty() && !token.chars().any(char::is_whitespace)
}

/// Run one utterance through a fresh agent under `schedule`. Agent failures
/// are recorded in the trace rather than returned.
pub fn run_session(utt: &Utterance, schedule: &Schedule, factory: &dyn AgentFactory) -> SessionTrace {
    let info = SessionInfo {
        utterance_id: utt.id.clone(),
        schedule: schedule.clone(),
    };
    let mut trace = SessionTrace {
        utterance_id: utt.id.clone(),
        src_len: utt.stream.len(),
        actions: Vec::new(),
        languages: schedule
            .languages()
            .map(|l| (l.clone(), LanguageTrace::default()))
            .collect(),
        failure: None,
    };
    let mut agent = match factory.start(&info) {
        Ok(agent) => agent,
        Err(e) => {
            trace.failure = Some(e.to_string());
            return trace;
        }
    };
    let outcome = drive(utt, schedule, agent.as_mut(), &mut trace).and_then(|()| agent.end());
    if let Err(e) = outcome {
        log::warn!("session {} failed: {e}", utt.id);
        trace.failure = Some(e.to_string());
    }
    trace
}

fn drive(
    utt: &Utterance,
    schedule: &Schedule,
    agent: &mut dyn Agent,
    trace: &mut SessionTrace,
) -> Result<(), AgentError> {
    let packets = utt.stream.packets();
    let mut state = SessionState::new(schedule, packets.len());
    let violation = |e: crate::policy::PolicyError| AgentError::Protocol(e.to_string());
    let mut step = 0;
    loop {
        let actions = state.next_actions();
        if actions.is_empty() {
            return Ok(());
        }
        step += 1;
        for action in actions {
            let recorded = match &action {
                Action::Read => {
                    let m = state.packets_read();
                    agent.accept_packet(&packets[m], m + 1 == packets.len())?;
                    action
                }
                Action::Write { lang, slot } => match agent.write(lang, *slot)? {
                    Emission::Token(tok) => {
                        if !valid_token(&tok) {
                            return Err(AgentError::Protocol(format!("invalid token {tok:?}")));
                        }
                        trace.languages.get_mut(lang).expect("scheduled").hypothesis.push(tok);
                        action
                    }
                    Emission::Eos => Action::Finish {
                        lang: lang.clone(),
                        truncated: false,
                    },
                },
                Action::Finish { .. } => action,
            };
            state.advance(&recorded).map_err(violation)?;
            if let Action::Write { lang, .. } | Action::Finish { lang, .. } = &recorded {
                let st = state.language(lang).expect("scheduled");
                let lt = trace.languages.get_mut(lang).expect("scheduled");
                lt.g.clone_from(&st.g);
                lt.finished = st.finished;
                lt.truncated = st.truncated;
            }
            trace.actions.push(TraceEntry { step, action: recorded });
        }
    }
}
