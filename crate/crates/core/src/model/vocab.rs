use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::stream::{is_lang_token, TargetLanguage, Utterance};

use super::ModelError;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const EOS: TokenId = 2;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "</s>";

/// Default cap on the shared vocabulary, reserved entries included.
pub const DEFAULT_VOCAB_CAP: usize = 8000;

/// Shared target vocabulary. Ids: `<pad>`, `<unk>`, `</s>`, then one `<2xx>`
/// token per language in tag order, then regular tokens by descending corpus
/// frequency (ties by token text).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a Utterance>,
        languages: &[TargetLanguage],
        cap: usize,
    ) -> Result<Self, ModelError> {
        let mut langs: Vec<&TargetLanguage> = languages.iter().collect();
        langs.sort();
        langs.dedup();
        let mut tokens: Vec<String> = [PAD_TOKEN, UNK_TOKEN, EOS_TOKEN]
            .iter()
            .map(|s| (*s).to_owned())
            .collect();
        tokens.extend(langs.iter().map(|l| l.lang_token()));
        if tokens.len() > cap {
            return Err(ModelError::Config(format!(
                "vocabulary cap {cap} is smaller than the {} reserved tokens",
                tokens.len()
            )));
        }

        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for utt in corpus {
            for lang in &langs {
                if let Some(reference) = utt.references.get(*lang) {
                    for tok in reference {
                        *freq.entry(tok.as_str()).or_insert(0) += 1;
                    }
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let room = cap - tokens.len();
        if ranked.len() > room {
            log::warn!(
                "vocabulary cap {cap} drops {} rare tokens to <unk>",
                ranked.len() - room
            );
        }
        tokens.extend(ranked.into_iter().take(room).map(|(t, _)| t.to_owned()));
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, ModelError> {
        let reserved_ok = tokens.len() >= 3
            && tokens[PAD as usize] == PAD_TOKEN
            && tokens[UNK as usize] == UNK_TOKEN
            && tokens[EOS as usize] == EOS_TOKEN;
        if !reserved_ok {
            return Err(ModelError::Format("vocabulary must start with <pad> <unk> </s>".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if ids.insert(tok.clone(), i as TokenId).is_some() {
                return Err(ModelError::Format(format!("duplicate vocabulary entry {tok:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or `UNK` when it is not in the vocabulary.
    pub fn id(&self, token: &str) -> TokenId {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn lang_id(&self, lang: &TargetLanguage) -> Option<TokenId> {
        self.get(&lang.lang_token())
    }

    pub fn is_lang_id(&self, id: TokenId) -> bool {
        self.tokens.get(id as usize).is_some_and(|t| is_lang_token(t))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = ModelError;

    fn try_from(value: Vec<String>) -> Result<Self, Self::Error> {
        Self::from_tokens(value)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(value: Vocabulary) -> Self {
        value.tokens
    }
}
