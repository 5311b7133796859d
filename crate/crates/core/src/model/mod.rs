//! Prefix-to-prefix conditional models `p(y_t | y_<t, x_≤g(t))` and their
//! training losses.
//!
//! Two parameter-sharing layouts are supported. The separate-decoder layout
//! keeps one decoder per target language. The unified layout has a single
//! decoder and prepends the language token `<2xx>` to every target prefix.
//! The source-side summary ([`packet_code`]) is shared by both.

mod count;
mod loss;
mod vocab;

use std::collections::BTreeMap;
use std::fmt;
use std::marker::PhantomData;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;
use crate::stream::{Packet, TargetLanguage};

pub use count::{packet_code, train_count_model, CountModelConfig, CountPrefixModel, View};
pub use loss::{joint_async_loss, joint_sync_loss, language_loss, prefix_nll, unified_nll};
pub use vocab::{TokenId, Vocabulary, DEFAULT_VOCAB_CAP, EOS, EOS_TOKEN, PAD, PAD_TOKEN, UNK, UNK_TOKEN};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("model format error: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Everything a decoder may condition on when predicting target token `t`.
#[derive(Debug, Clone, Copy)]
pub struct DecodeContext<'a> {
    /// Target prefix. For the unified layout it starts with the language token.
    pub prefix: &'a [TokenId],
    /// Source packets `1..=g(t)`.
    pub packets: &'a [Packet],
    /// Whether `packets` is the whole source.
    pub source_complete: bool,
}

pub trait PrefixModel<T: Real> {
    fn vocab(&self) -> &Vocabulary;

    /// Probability of every vocabulary entry, indexed by token id.
    fn distribution(&self, ctx: &DecodeContext<'_>) -> Vec<T>;

    fn log_prob(&self, ctx: &DecodeContext<'_>, token: TokenId) -> T {
        self.distribution(ctx)[token as usize].ln()
    }
}

impl<T: Real, M: PrefixModel<T> + ?Sized> PrefixModel<T> for &M {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }

    fn distribution(&self, ctx: &DecodeContext<'_>) -> Vec<T> {
        (**self).distribution(ctx)
    }

    fn log_prob(&self, ctx: &DecodeContext<'_>, token: TokenId) -> T {
        (**self).log_prob(ctx, token)
    }
}

/// Argmax of the next-token distribution; ties go to the lowest id.
pub fn greedy_decode_next<T: Real, M: PrefixModel<T> + ?Sized>(model: &M, ctx: &DecodeContext<'_>) -> TokenId {
    let dist = model.distribution(ctx);
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Assigns `1 / |V|` to every token regardless of context.
#[derive(Debug, Clone)]
pub struct UniformModel<T> {
    vocab: Arc<Vocabulary>,
    _scalar: PhantomData<T>,
}

impl<T: Real> UniformModel<T> {
    pub fn new(vocab: Arc<Vocabulary>) -> Self {
        Self {
            vocab,
            _scalar: PhantomData,
        }
    }
}

impl<T: Real> PrefixModel<T> for UniformModel<T> {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn distribution(&self, _ctx: &DecodeContext<'_>) -> Vec<T> {
        vec![T::one() / T::from_count(self.vocab.len()); self.vocab.len()]
    }

    fn log_prob(&self, _ctx: &DecodeContext<'_>, _token: TokenId) -> T {
        -T::from_count(self.vocab.len()).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Separate,
    Unified,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Separate => "separate",
            Variant::Unified => "unified",
        })
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "separate" => Ok(Variant::Separate),
            "unified" => Ok(Variant::Unified),
            other => Err(ModelError::Config(format!("unknown model variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Decoders<M> {
    Separate(BTreeMap<TargetLanguage, M>),
    Unified(M),
}

/// A one-to-many model: per-language decoders or one language-tagged decoder.
#[derive(Debug, Clone)]
pub struct MultilingualModel<M> {
    decoders: Decoders<M>,
}

impl<M> MultilingualModel<M> {
    pub fn separate(decoders: BTreeMap<TargetLanguage, M>) -> Self {
        Self {
            decoders: Decoders::Separate(decoders),
        }
    }

    pub fn unified(decoder: M) -> Self {
        Self {
            decoders: Decoders::Unified(decoder),
        }
    }

    pub fn variant(&self) -> Variant {
        match self.decoders {
            Decoders::Separate(_) => Variant::Separate,
            Decoders::Unified(_) => Variant::Unified,
        }
    }

    pub fn decoders(&self) -> &Decoders<M> {
        &self.decoders
    }

    /// The decoder used for `lang`.
    pub fn decoder(&self, lang: &TargetLanguage) -> Option<&M> {
        match &self.decoders {
            Decoders::Separate(map) => map.get(lang),
            Decoders::Unified(m) => Some(m),
        }
    }

    /// Languages with a dedicated decoder; `None` for the unified layout.
    pub fn separate_languages(&self) -> Option<Vec<&TargetLanguage>> {
        match &self.decoders {
            Decoders::Separate(map) => Some(map.keys().collect()),
            Decoders::Unified(_) => None,
        }
    }
}

impl<M> MultilingualModel<M> {
    /// The prefix a decoder sees before the first target token of `lang`.
    pub fn initial_prefix<T: Real>(&self, lang: &TargetLanguage) -> Result<Vec<TokenId>, ModelError>
    where
        M: PrefixModel<T>,
    {
        let decoder = self
            .decoder(lang)
            .ok_or_else(|| ModelError::Config(format!("no decoder for language {lang}")))?;
        match self.variant() {
            Variant::Separate => Ok(Vec::new()),
            Variant::Unified => decoder
                .vocab()
                .lang_id(lang)
                .map(|id| vec![id])
                .ok_or_else(|| ModelError::Config(format!("{} not in vocabulary", lang.lang_token()))),
        }
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// Puts all probability mass on the reference token of the current slot,
    /// and on EOS once the reference is used up.
    pub(crate) struct OracleModel {
        pub vocab: Arc<Vocabulary>,
        pub reference: Vec<TokenId>,
    }

    impl PrefixModel<f64> for OracleModel {
        fn vocab(&self) -> &Vocabulary {
            &self.vocab
        }

        fn distribution(&self, ctx: &DecodeContext<'_>) -> Vec<f64> {
            let skip = usize::from(ctx.prefix.first().is_some_and(|&id| self.vocab.is_lang_id(id)));
            let t = ctx.prefix.len() - skip;
            let next = self.reference.get(t).copied().unwrap_or(EOS);
            let mut dist = vec![0.0; self.vocab.len()];
            dist[next as usize] = 1.0;
            dist
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testing::OracleModel;
    use super::*;

    fn vocab(n: usize) -> Arc<Vocabulary> {
        let mut tokens: Vec<String> = vec![PAD_TOKEN.into(), UNK_TOKEN.into(), EOS_TOKEN.into()];
        tokens.extend((3..n).map(|i| format!("w{i}")));
        Arc::new(Vocabulary::from_tokens(tokens).unwrap())
    }

    #[test]
    fn uniform_greedy_picks_lowest_id() {
        let m = UniformModel::<f64>::new(vocab(8));
        let ctx = DecodeContext {
            prefix: &[],
            packets: &[],
            source_complete: false,
        };
        assert_eq!(greedy_decode_next(&m, &ctx), PAD);
        let total: f64 = m.distribution(&ctx).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_greedy_follows_reference() {
        let v = vocab(8);
        let m = OracleModel {
            vocab: v.clone(),
            reference: vec![5, 4, 7],
        };
        let mut prefix = Vec::new();
        loop {
            let ctx = DecodeContext {
                prefix: &prefix,
                packets: &[],
                source_complete: true,
            };
            let next = greedy_decode_next(&m, &ctx);
            if next == EOS {
                break;
            }
            prefix.push(next);
        }
        assert_eq!(prefix, vec![5, 4, 7]);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("unified".parse::<Variant>().unwrap(), Variant::Unified);
        assert!("shared".parse::<Variant>().is_err());
    }
}
