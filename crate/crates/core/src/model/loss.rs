use std::collections::BTreeMap;

use crate::policy::g_of_t;
use crate::scalar::Real;
use crate::stream::{SourceStream, TargetLanguage};

use super::{DecodeContext, ModelError, MultilingualModel, PrefixModel, TokenId, Variant};

fn check_inputs(len: usize, k: usize) -> Result<(), ModelError> {
    if k == 0 {
        return Err(ModelError::Config("k must be >= 1".into()));
    }
    if len == 0 {
        return Err(ModelError::Config("target sequence is empty".into()));
    }
    Ok(())
}

/// Σ_t −log p(y_t | initial ++ y_<t, packets 1..=g(t)).
fn sequence_nll<T: Real, M: PrefixModel<T> + ?Sized>(
    model: &M,
    x: &SourceStream,
    initial: &[TokenId],
    y: &[TokenId],
    k: usize,
) -> T {
    let n = x.len();
    let mut prefix: Vec<TokenId> = Vec::with_capacity(initial.len() + y.len());
    prefix.extend_from_slice(initial);
    let mut total = T::zero();
    for (i, &token) in y.iter().enumerate() {
        let g = g_of_t(k, i + 1, n);
        let ctx = DecodeContext {
            prefix: &prefix,
            packets: x.prefix(g),
            source_complete: g == n,
        };
        total = total - model.log_prob(&ctx, token);
        prefix.push(token);
    }
    total
}

/// Prefix-to-prefix negative log-likelihood of `y` for one decoder under
/// wait-`k`. Out-of-vocabulary tokens are scored as `<unk>`.
pub fn prefix_nll<T: Real, M: PrefixModel<T> + ?Sized, S: AsRef<str>>(
    model: &M,
    x: &SourceStream,
    y: &[S],
    k: usize,
) -> Result<T, ModelError> {
    check_inputs(y.len(), k)?;
    let ids = model.vocab().encode(y);
    Ok(sequence_nll(model, x, &[], &ids, k))
}

/// Like [`prefix_nll`] with the language token of `lang` prepended as
/// conditioning. The language token itself is not scored.
pub fn unified_nll<T: Real, M: PrefixModel<T> + ?Sized, S: AsRef<str>>(
    model: &M,
    x: &SourceStream,
    y: &[S],
    k: usize,
    lang: &TargetLanguage,
) -> Result<T, ModelError> {
    check_inputs(y.len(), k)?;
    let lang_id = model
        .vocab()
        .lang_id(lang)
        .ok_or_else(|| ModelError::Config(format!("{} not in vocabulary", lang.lang_token())))?;
    let ids = model.vocab().encode(y);
    Ok(sequence_nll(model, x, &[lang_id], &ids, k))
}

/// Loss of one language under either parameter-sharing layout.
pub fn language_loss<T: Real, M: PrefixModel<T>, S: AsRef<str>>(
    model: &MultilingualModel<M>,
    x: &SourceStream,
    lang: &TargetLanguage,
    y: &[S],
    k: usize,
) -> Result<T, ModelError> {
    let decoder = model
        .decoder(lang)
        .ok_or_else(|| ModelError::Config(format!("no decoder for language {lang}")))?;
    match model.variant() {
        Variant::Separate => prefix_nll(decoder, x, y, k),
        Variant::Unified => unified_nll(decoder, x, y, k, lang),
    }
}

fn check_languages<M, V>(model: &MultilingualModel<M>, y_map: &BTreeMap<TargetLanguage, V>) -> Result<(), ModelError> {
    if y_map.is_empty() {
        return Err(ModelError::Config("no target languages".into()));
    }
    if let Some(langs) = model.separate_languages() {
        if !langs.into_iter().eq(y_map.keys()) {
            return Err(ModelError::Config(
                "target languages do not match the model's decoders".into(),
            ));
        }
    }
    Ok(())
}

/// Joint objective with one shared `k`: the sum of per-language losses.
pub fn joint_sync_loss<T: Real, M: PrefixModel<T>, S: AsRef<str>>(
    model: &MultilingualModel<M>,
    x: &SourceStream,
    y_map: &BTreeMap<TargetLanguage, Vec<S>>,
    k: usize,
) -> Result<T, ModelError> {
    check_languages(model, y_map)?;
    y_map.iter().try_fold(T::zero(), |acc, (lang, y)| {
        Ok(acc + language_loss(model, x, lang, y, k)?)
    })
}

/// Joint objective where language `j` is conditioned under its own `k_j`.
pub fn joint_async_loss<T: Real, M: PrefixModel<T>, S: AsRef<str>>(
    model: &MultilingualModel<M>,
    x: &SourceStream,
    y_map: &BTreeMap<TargetLanguage, Vec<S>>,
    k_map: &BTreeMap<TargetLanguage, usize>,
) -> Result<T, ModelError> {
    check_languages(model, y_map)?;
    if !k_map.keys().eq(y_map.keys()) {
        return Err(ModelError::Config(
            "k values and references cover different languages".into(),
        ));
    }
    y_map.iter().try_fold(T::zero(), |acc, (lang, y)| {
        Ok(acc + language_loss(model, x, lang, y, k_map[lang])?)
    })
}
