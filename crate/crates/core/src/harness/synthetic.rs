//! Synthetic multi-way aligned corpora with a known source/target alignment.
//!
//! A sentence is `L` random content tokens followed by end markers. Target
//! token `t` of language `j` is `dict_j(src[t + s_j])`, so it can only be
//! produced once source token `t + s_j` has been read; the target has
//! `L - s_j` tokens and its EOS lines up with the first end marker. Each
//! source token becomes `frames_per_token` frames whose leading dimensions
//! spell the token id in base 8, `(digit + 0.5) / 8` plus bounded noise.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::agent::stable_hash;
use crate::manifest::{write_features, Manifest, ManifestRecord, Split};
use crate::stream::{FrameVector, SourceStream, TargetLanguage, Utterance, DEFAULT_FEATURE_DIM, DEFAULT_PACKET_FRAMES};

const LEVELS: usize = 8;
/// Keeps every frame inside its quantization bucket.
const MAX_NOISE: f32 = 0.5 / LEVELS as f32;
const END_MARKER: &str = "<end>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Number of distinct content tokens on each side.
    pub vocab_size: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Content tokens per sentence, inclusive range.
    pub min_len: usize,
    pub max_len: usize,
    /// Target token `t` translates source token `t + shift`.
    pub shifts: BTreeMap<TargetLanguage, usize>,
    pub frames_per_token: usize,
    pub dim: usize,
    /// Prefix target words with their language tag so no word is shared.
    pub disjoint_vocab: bool,
    /// Seeds the per-language dictionaries.
    pub dict_seed: u64,
    /// Seeds sentence content and frame noise.
    pub seed: u64,
    /// Half-width of the uniform noise added to each frame value.
    pub noise: f32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            train: 2000,
            dev: 100,
            test: 200,
            min_len: 6,
            max_len: 14,
            shifts: [
                (TargetLanguage::new("es").expect("valid tag"), 1),
                (TargetLanguage::new("fr").expect("valid tag"), 3),
            ]
            .into(),
            frames_per_token: DEFAULT_PACKET_FRAMES,
            dim: DEFAULT_FEATURE_DIM,
            disjoint_vocab: true,
            dict_seed: 11,
            seed: 1,
            noise: 0.02,
        }
    }
}

impl SyntheticConfig {
    fn digits(&self) -> usize {
        // Ids 0..vocab_size are content, vocab_size is the end marker.
        let mut n = 1;
        let mut cap = LEVELS;
        while cap < self.vocab_size + 1 {
            cap *= LEVELS;
            n += 1;
        }
        n
    }

    fn max_shift(&self) -> usize {
        self.shifts.values().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: String| Err(HarnessError::Config(m));
        if self.vocab_size < 2 {
            return fail(format!(
                "vocabulary of {} tokens is too small for a dictionary",
                self.vocab_size
            ));
        }
        if self.shifts.is_empty() {
            return fail("no target languages".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail(format!("bad length range {}..={}", self.min_len, self.max_len));
        }
        if self.min_len <= self.max_shift() {
            return fail(format!(
                "sentences of {} tokens leave no target tokens at shift {}",
                self.min_len,
                self.max_shift()
            ));
        }
        if self.frames_per_token == 0 {
            return fail("frames_per_token must be >= 1".into());
        }
        if self.digits() > self.dim {
            return fail(format!(
                "{} dimensions cannot encode {} token ids",
                self.dim, self.vocab_size
            ));
        }
        if !(0.0..MAX_NOISE).contains(&self.noise) {
            return fail(format!("noise must lie in [0, {MAX_NOISE})"));
        }
        Ok(())
    }

    fn word(&self, lang: &TargetLanguage, id: usize) -> String {
        if self.disjoint_vocab {
            format!("{}{id:03}", lang.tag())
        } else {
            format!("w{id:03}")
        }
    }

    fn dictionary(&self, lang: &TargetLanguage) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.dict_seed ^ stable_hash(lang.tag().as_bytes()));
        let mut perm: Vec<usize> = (0..self.vocab_size).collect();
        perm.shuffle(&mut rng);
        perm
    }

    fn frames(&self, id: usize, rng: &mut ChaCha8Rng) -> Vec<FrameVector> {
        let digits = self.digits();
        (0..self.frames_per_token)
            .map(|_| {
                let mut v = vec![0.5f32; self.dim];
                let mut rest = id;
                for slot in v.iter_mut().take(digits) {
                    let digit = rest % LEVELS;
                    rest /= LEVELS;
                    let jitter = if self.noise > 0.0 {
                        rng.gen_range(-self.noise..self.noise)
                    } else {
                        0.0
                    };
                    *slot = (digit as f32 + 0.5) / LEVELS as f32 + jitter;
                }
                FrameVector::new(v).expect("finite")
            })
            .collect()
    }
}

/// A generated corpus, held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub config: SyntheticConfig,
    pub splits: BTreeMap<Split, Vec<Utterance>>,
}

impl SyntheticCorpus {
    pub fn split(&self, split: Split) -> &[Utterance] {
        self.splits.get(&split).map_or(&[], Vec::as_slice)
    }

    pub fn languages(&self) -> Vec<TargetLanguage> {
        self.config.shifts.keys().cloned().collect()
    }
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticCorpus, HarnessError> {
    cfg.validate()?;
    let dictionaries: BTreeMap<&TargetLanguage, Vec<usize>> =
        cfg.shifts.keys().map(|l| (l, cfg.dictionary(l))).collect();
    let markers = cfg.max_shift().max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut splits = BTreeMap::new();
    for (split, count) in [
        (Split::Train, cfg.train),
        (Split::Dev, cfg.dev),
        (Split::Test, cfg.test),
    ] {
        let mut utts = Vec::with_capacity(count);
        for i in 0..count {
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            let mut src: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
            src.extend(std::iter::repeat_n(cfg.vocab_size, markers));
            let frames: Vec<FrameVector> = src.iter().flat_map(|&id| cfg.frames(id, &mut rng)).collect();
            let transcript = src
                .iter()
                .map(|&id| {
                    if id == cfg.vocab_size {
                        END_MARKER.to_owned()
                    } else {
                        format!("s{id:03}")
                    }
                })
                .collect();
            let references = cfg
                .shifts
                .iter()
                .map(|(lang, &shift)| {
                    let dict = &dictionaries[lang];
                    let words = src[shift..len].iter().map(|&id| cfg.word(lang, dict[id])).collect();
                    (lang.clone(), words)
                })
                .collect();
            let stream = SourceStream::from_frames(frames, cfg.frames_per_token)
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            let id = format!("{}-{:06}", split.as_str(), i + 1);
            utts.push(
                Utterance::new(id, stream, Some(transcript), references)
                    .map_err(|e| HarnessError::Config(e.to_string()))?,
            );
        }
        splits.insert(split, utts);
    }
    Ok(SyntheticCorpus {
        config: cfg.clone(),
        splits,
    })
}

#[derive(Serialize)]
struct Meta<'a> {
    generator: &'static str,
    split_rule: &'static str,
    config: &'a SyntheticConfig,
    counts: BTreeMap<&'static str, usize>,
}

/// Write `<split>.tsv`, `feats/<id>.f32` and `meta.json` under `dir`.
pub fn write_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<(), HarnessError> {
    let io = |p: &Path, e: std::io::Error| HarnessError::Data(format!("{}: {e}", p.display()));
    let feats = dir.join("feats");
    fs::create_dir_all(&feats).map_err(|e| io(&feats, e))?;
    let languages = corpus.languages();
    for (split, utts) in &corpus.splits {
        let mut manifest = Manifest::new(Some(*split), languages.clone());
        for u in utts {
            let rel = format!("feats/{}.f32", u.id);
            write_features(&dir.join(&rel), u.stream.frames()).map_err(|e| HarnessError::Data(e.to_string()))?;
            manifest.push(ManifestRecord {
                id: u.id.clone(),
                features: rel,
                n_frames: u.stream.frame_count(),
                transcript: u.transcript.as_deref().unwrap_or_default().join(" "),
                references: languages.iter().map(|l| u.references[l].join(" ")).collect(),
            });
        }
        manifest
            .write(&dir.join(format!("{}.tsv", split.as_str())))
            .map_err(|e| HarnessError::Data(e.to_string()))?;
    }
    let meta = Meta {
        generator: "synthetic",
        split_rule: "by sentence index: train, then dev, then test",
        config: &corpus.config,
        counts: corpus.splits.iter().map(|(s, u)| (s.as_str(), u.len())).collect(),
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&path, text + "\n").map_err(|e| io(&path, e))
}
