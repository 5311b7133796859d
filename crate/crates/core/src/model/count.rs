//! Count-based prefix-to-prefix model.
//!
//! The source side is summarized per packet by [`packet_code`]: the packet's
//! mean frame, quantized to 8 levels per dimension and hashed. A decoder looks
//! at one source packet per target slot: packet `t + offset`, provided it has
//! been read (`t + offset <= g(t)`). The offset is learned at training time
//! per conditioning key (the language token for the unified layout).
//!
//! Prediction uses add-ε smoothed relative frequencies from the first level
//! whose context was seen in training:
//!
//! 1. `(previous target token, source view)`
//! 2. `(language token, source view)`
//! 3. uniform over the vocabulary

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::policy::g_of_t;
use crate::scalar::Real;
use crate::stream::{Packet, TargetLanguage, Utterance};

use super::{DecodeContext, Decoders, ModelError, MultilingualModel, PrefixModel, TokenId, Variant, Vocabulary, EOS};

const FORMAT: &str = "simulstream-count-model";
const VERSION: u32 = 1;
const QUANT_LEVELS: f32 = 8.0;

/// Quantized-mean hash of a packet. Each dimension of the mean frame is
/// clamped to `[0, 1]` and mapped to one of 8 buckets; the bucket vector is
/// hashed with 64-bit FNV-1a.
pub fn packet_code(packet: &Packet) -> u64 {
    const OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    packet.mean_frame().iter().fold(OFFSET_BASIS, |h, &v| {
        let bucket = (v.clamp(0.0, 1.0) * QUANT_LEVELS).floor().min(QUANT_LEVELS - 1.0) as u8;
        (h ^ u64::from(bucket)).wrapping_mul(PRIME)
    })
}

/// What a decoder sees of the source for one target slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum View {
    /// The aligned packet has not been read yet.
    Pending,
    /// The aligned position lies beyond the end of a fully read source.
    End,
    Packet(u64),
}

impl View {
    fn resolve(slot: usize, offset: usize, read: usize, complete: bool, code: impl Fn(usize) -> u64) -> Self {
        let pos = slot + offset;
        if pos <= read {
            View::Packet(code(pos - 1))
        } else if complete {
            View::End
        } else {
            View::Pending
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            View::Pending => f.write_str("pending"),
            View::End => f.write_str("end"),
            View::Packet(code) => write!(f, "p:{code:016x}"),
        }
    }
}

impl FromStr for View {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pending" => Ok(View::Pending),
            "end" => Ok(View::End),
            _ => s
                .strip_prefix("p:")
                .and_then(|h| u64::from_str_radix(h, 16).ok())
                .map(View::Packet)
                .ok_or_else(|| ModelError::Format(format!("bad view {s:?}"))),
        }
    }
}

impl Serialize for View {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for View {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Counts {
    total: u64,
    by_token: BTreeMap<TokenId, u64>,
}

impl Counts {
    fn add(&mut self, token: TokenId) {
        self.total += 1;
        *self.by_token.entry(token).or_insert(0) += 1;
    }

    fn from_pairs(pairs: Vec<(TokenId, u64)>) -> Self {
        let by_token: BTreeMap<_, _> = pairs.into_iter().collect();
        Self {
            total: by_token.values().sum(),
            by_token,
        }
    }

    fn pairs(&self) -> Vec<(TokenId, u64)> {
        self.by_token.iter().map(|(&t, &c)| (t, c)).collect()
    }

    /// Σ_v c_v · −ln((c_v + ε) / (C + ε·V)).
    fn nll<T: Real>(&self, eps: T, vocab_len: usize) -> T {
        let denom = T::from_count(self.total as usize) + eps * T::from_count(vocab_len);
        self.by_token
            .values()
            .map(|&c| {
                let c = T::from_count(c as usize);
                -c * ((c + eps) / denom).ln()
            })
            .sum()
    }
}

/// Conditioning key: the language token for the unified layout, `None` for a
/// per-language decoder.
type Cond = Option<TokenId>;
/// Counts keyed by (context, view).
type Table<K> = BTreeMap<(K, View), Counts>;
/// One serialized table entry.
type TableRow = (Option<TokenId>, View, Vec<(TokenId, u64)>);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountModelConfig {
    /// Add-ε smoothing mass.
    pub epsilon: f64,
    /// Largest source alignment offset considered during training.
    pub max_offset: usize,
}

impl Default for CountModelConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            max_offset: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountPrefixModel<T> {
    vocab: Arc<Vocabulary>,
    epsilon: T,
    offsets: BTreeMap<Cond, usize>,
    full: Table<Option<TokenId>>,
    backoff: Table<Cond>,
}

struct ContextKey {
    cond: Cond,
    prev: Option<TokenId>,
    slot: usize,
}

impl ContextKey {
    fn of(vocab: &Vocabulary, prefix: &[TokenId]) -> Self {
        let cond = prefix.first().copied().filter(|&id| vocab.is_lang_id(id));
        Self {
            cond,
            prev: prefix.last().copied(),
            slot: prefix.len() - usize::from(cond.is_some()) + 1,
        }
    }
}

impl<T: Real> CountPrefixModel<T> {
    pub fn epsilon(&self) -> T {
        self.epsilon
    }

    /// Learned source alignment offset for a conditioning key.
    pub fn offset(&self, cond: Option<TokenId>) -> Option<usize> {
        self.offsets.get(&cond).copied()
    }

    pub fn view(&self, ctx: &DecodeContext<'_>) -> View {
        let key = ContextKey::of(&self.vocab, ctx.prefix);
        let offset = self.offsets.get(&key.cond).copied().unwrap_or(0);
        View::resolve(key.slot, offset, ctx.packets.len(), ctx.source_complete, |i| {
            packet_code(&ctx.packets[i])
        })
    }

    fn lookup(&self, ctx: &DecodeContext<'_>) -> Option<&Counts> {
        let key = ContextKey::of(&self.vocab, ctx.prefix);
        let view = self.view(ctx);
        self.full
            .get(&(key.prev, view))
            .or_else(|| self.backoff.get(&(key.cond, view)))
            .filter(|c| c.total > 0)
    }
}

impl<T: Real> PrefixModel<T> for CountPrefixModel<T> {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn distribution(&self, ctx: &DecodeContext<'_>) -> Vec<T> {
        let v = self.vocab.len();
        let Some(counts) = self.lookup(ctx) else {
            return vec![T::one() / T::from_count(v); v];
        };
        let denom = T::from_count(counts.total as usize) + self.epsilon * T::from_count(v);
        let mut dist = vec![self.epsilon / denom; v];
        for (&tok, &c) in &counts.by_token {
            dist[tok as usize] = (T::from_count(c as usize) + self.epsilon) / denom;
        }
        dist
    }

    fn log_prob(&self, ctx: &DecodeContext<'_>, token: TokenId) -> T {
        let v = T::from_count(self.vocab.len());
        match self.lookup(ctx) {
            None => -v.ln(),
            Some(counts) => {
                let c = T::from_count(counts.by_token.get(&token).copied().unwrap_or(0) as usize);
                let denom = T::from_count(counts.total as usize) + self.epsilon * v;
                ((c + self.epsilon) / denom).ln()
            }
        }
    }
}

/// One supervised prediction: the target at a slot with the source view under
/// every candidate offset.
struct Event {
    cond: Cond,
    prev: Option<TokenId>,
    views: Vec<View>,
    target: TokenId,
}

fn collect_events(
    utt: &Utterance,
    lang: &TargetLanguage,
    k: usize,
    cond: Cond,
    vocab: &Vocabulary,
    max_offset: usize,
    out: &mut Vec<Event>,
) -> Result<(), ModelError> {
    let reference = utt.reference(lang).map_err(|e| ModelError::Config(e.to_string()))?;
    let codes: Vec<u64> = utt.stream.packets().iter().map(packet_code).collect();
    let n = codes.len();
    let mut targets = vocab.encode(reference);
    targets.push(EOS);
    let mut prev = cond;
    for (i, &target) in targets.iter().enumerate() {
        let slot = i + 1;
        let read = g_of_t(k, slot, n);
        let views = (0..=max_offset)
            .map(|a| View::resolve(slot, a, read, read == n, |p| codes[p]))
            .collect();
        out.push(Event {
            cond,
            prev,
            views,
            target,
        });
        prev = Some(target);
    }
    Ok(())
}

fn fit<T: Real>(events: &[Event], vocab: Arc<Vocabulary>, epsilon: T, max_offset: usize) -> CountPrefixModel<T> {
    // Pick, per conditioning key, the offset with the lowest training NLL.
    // Every training context is seen, so that NLL is the first-level one.
    let mut per_offset: BTreeMap<(Cond, usize), Table<Option<TokenId>>> = BTreeMap::new();
    for e in events {
        for (a, view) in e.views.iter().enumerate() {
            per_offset
                .entry((e.cond, a))
                .or_default()
                .entry((e.prev, *view))
                .or_default()
                .add(e.target);
        }
    }
    let mut offsets: BTreeMap<Cond, (usize, T)> = BTreeMap::new();
    for ((cond, a), table) in &per_offset {
        let nll: T = table.values().map(|c| c.nll(epsilon, vocab.len())).sum();
        match offsets.get(cond) {
            Some(&(_, best)) if best <= nll => {}
            _ => {
                offsets.insert(*cond, (*a, nll));
            }
        }
    }
    let offsets: BTreeMap<Cond, usize> = offsets.into_iter().map(|(c, (a, _))| (c, a)).collect();
    debug_assert!(offsets.values().all(|&a| a <= max_offset));

    let mut full: Table<Option<TokenId>> = BTreeMap::new();
    let mut backoff: Table<Cond> = BTreeMap::new();
    for e in events {
        let view = e.views[offsets[&e.cond]];
        full.entry((e.prev, view)).or_default().add(e.target);
        backoff.entry((e.cond, view)).or_default().add(e.target);
    }
    CountPrefixModel {
        vocab,
        epsilon,
        offsets,
        full,
        backoff,
    }
}

/// Maximum-likelihood counting with add-ε smoothing. Language `j` is trained
/// with its own wait-`k_j` conditioning.
pub fn train_count_model<T: Real>(
    corpus: &[Utterance],
    vocab: Arc<Vocabulary>,
    variant: Variant,
    k_map: &BTreeMap<TargetLanguage, usize>,
    config: CountModelConfig,
) -> Result<MultilingualModel<CountPrefixModel<T>>, ModelError> {
    if corpus.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    if k_map.is_empty() {
        return Err(ModelError::Config("no target languages".into()));
    }
    if let Some((lang, _)) = k_map.iter().find(|(_, &k)| k == 0) {
        return Err(ModelError::Config(format!("k must be >= 1 (language {lang})")));
    }
    if !(config.epsilon >= 0.0 && config.epsilon.is_finite()) {
        return Err(ModelError::Config(format!("invalid epsilon {}", config.epsilon)));
    }
    let epsilon = T::from_f64_lossy(config.epsilon);

    match variant {
        Variant::Separate => {
            let mut decoders = BTreeMap::new();
            for (lang, &k) in k_map {
                let mut events = Vec::new();
                for utt in corpus {
                    collect_events(utt, lang, k, None, &vocab, config.max_offset, &mut events)?;
                }
                let model = fit(&events, vocab.clone(), epsilon, config.max_offset);
                decoders.insert(lang.clone(), model);
            }
            Ok(MultilingualModel::separate(decoders))
        }
        Variant::Unified => {
            let mut events = Vec::new();
            for utt in corpus {
                for (lang, &k) in k_map {
                    let lang_id = vocab
                        .lang_id(lang)
                        .ok_or_else(|| ModelError::Config(format!("{} not in vocabulary", lang.lang_token())))?;
                    collect_events(utt, lang, k, Some(lang_id), &vocab, config.max_offset, &mut events)?;
                }
            }
            Ok(MultilingualModel::unified(fit(
                &events,
                vocab,
                epsilon,
                config.max_offset,
            )))
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    variant: Variant,
    epsilon: f64,
    vocab: Vocabulary,
    decoders: Vec<DecoderFile>,
}

#[derive(Serialize, Deserialize)]
struct DecoderFile {
    language: Option<TargetLanguage>,
    offsets: Vec<(Option<TokenId>, usize)>,
    full: Vec<TableRow>,
    backoff: Vec<TableRow>,
}

impl<T: Real> CountPrefixModel<T> {
    fn to_file(&self, language: Option<TargetLanguage>) -> DecoderFile {
        DecoderFile {
            language,
            offsets: self.offsets.iter().map(|(&c, &a)| (c, a)).collect(),
            full: self.full.iter().map(|(&(p, v), c)| (p, v, c.pairs())).collect(),
            backoff: self.backoff.iter().map(|(&(p, v), c)| (p, v, c.pairs())).collect(),
        }
    }

    fn from_file(file: DecoderFile, vocab: Arc<Vocabulary>, epsilon: T) -> Result<Self, ModelError> {
        let v = vocab.len() as TokenId;
        let check = |pairs: &[(TokenId, u64)]| {
            if pairs.iter().any(|&(t, _)| t >= v) {
                Err(ModelError::Format("token id outside the vocabulary".into()))
            } else {
                Ok(())
            }
        };
        let mut full = BTreeMap::new();
        for (prev, view, pairs) in file.full {
            check(&pairs)?;
            full.insert((prev, view), Counts::from_pairs(pairs));
        }
        let mut backoff = BTreeMap::new();
        for (cond, view, pairs) in file.backoff {
            check(&pairs)?;
            backoff.insert((cond, view), Counts::from_pairs(pairs));
        }
        Ok(Self {
            vocab,
            epsilon,
            offsets: file.offsets.into_iter().collect(),
            full,
            backoff,
        })
    }
}

impl<T: Real> MultilingualModel<CountPrefixModel<T>> {
    pub fn vocab(&self) -> &Arc<Vocabulary> {
        match self.decoders() {
            Decoders::Separate(map) => &map.values().next().expect("at least one decoder").vocab,
            Decoders::Unified(m) => &m.vocab,
        }
    }

    /// Deterministic JSON dump (sorted tables).
    pub fn to_json(&self) -> String {
        let (epsilon, decoders) = match self.decoders() {
            Decoders::Separate(map) => (
                map.values().next().expect("at least one decoder").epsilon,
                map.iter().map(|(lang, m)| m.to_file(Some(lang.clone()))).collect(),
            ),
            Decoders::Unified(m) => (m.epsilon, vec![m.to_file(None)]),
        };
        let file = ModelFile {
            format: FORMAT.to_owned(),
            version: VERSION,
            variant: self.variant(),
            epsilon: epsilon.as_f64(),
            vocab: (**self.vocab()).clone(),
            decoders,
        };
        serde_json::to_string(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(ModelError::Format(format!(
                "unsupported model format {} v{}",
                file.format, file.version
            )));
        }
        let vocab = Arc::new(file.vocab);
        let epsilon = T::from_f64_lossy(file.epsilon);
        match file.variant {
            Variant::Separate => {
                let mut map = BTreeMap::new();
                for d in file.decoders {
                    let lang = d
                        .language
                        .clone()
                        .ok_or_else(|| ModelError::Format("separate decoder without a language".into()))?;
                    map.insert(lang, CountPrefixModel::from_file(d, vocab.clone(), epsilon)?);
                }
                if map.is_empty() {
                    return Err(ModelError::Format("no decoders".into()));
                }
                Ok(Self::separate(map))
            }
            Variant::Unified => {
                let mut decoders = file.decoders.into_iter();
                match (decoders.next(), decoders.next()) {
                    (Some(d), None) => Ok(Self::unified(CountPrefixModel::from_file(d, vocab, epsilon)?)),
                    _ => Err(ModelError::Format("unified model needs exactly one decoder".into())),
                }
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_json()).map_err(|source| ModelError::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_json(&text)
    }
}
