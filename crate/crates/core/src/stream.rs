//! Packetized speech streams, target languages and utterances.
//!
//! A source utterance is a sequence of acoustic feature frames. The fixed
//! pre-decision step groups them into packets of `q` frames; the read/write
//! policy only ever counts packets.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default feature dimension (filterbank channels).
pub const DEFAULT_FEATURE_DIM: usize = 80;
/// Default number of frames per packet.
pub const DEFAULT_PACKET_FRAMES: usize = 7;

#[derive(Debug, Error, PartialEq)]
pub enum StreamError {
    #[error("packet size must be at least 1 frame, got {0}")]
    InvalidPacketSize(usize),
    #[error("frame {index} has a non-finite value")]
    NonFinite { index: usize },
    #[error("frame {index} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("invalid language tag {0:?}")]
    InvalidTag(String),
    #[error("invalid token {token:?} in {context}")]
    InvalidToken { token: String, context: String },
    #[error("utterance {id}: missing reference for language {lang}")]
    MissingReference { id: String, lang: String },
}

/// One acoustic feature frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrameVector {
    values: Vec<f32>,
}

impl FrameVector {
    pub fn new(values: Vec<f32>) -> Result<Self, StreamError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StreamError::NonFinite { index: 0 });
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// A group of at most `q` consecutive frames. `index` is 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub index: usize,
    pub frames: Vec<FrameVector>,
}

impl Packet {
    /// Per-dimension mean of the packet's frames.
    pub fn mean_frame(&self) -> Vec<f32> {
        let dim = self.frames.first().map_or(0, FrameVector::dim);
        let mut acc = vec![0f64; dim];
        for frame in &self.frames {
            for (a, v) in acc.iter_mut().zip(frame.values()) {
                *a += f64::from(*v);
            }
        }
        let n = self.frames.len().max(1) as f64;
        acc.into_iter().map(|a| (a / n) as f32).collect()
    }
}

/// Split `frames` into packets of `q` frames; the last packet may be short.
pub fn packetize(frames: Vec<FrameVector>, q: usize) -> Result<Vec<Packet>, StreamError> {
    if q == 0 {
        return Err(StreamError::InvalidPacketSize(q));
    }
    if let Some(first) = frames.first() {
        let expected = first.dim();
        if let Some((index, f)) = frames.iter().enumerate().find(|(_, f)| f.dim() != expected) {
            return Err(StreamError::DimensionMismatch {
                index,
                expected,
                found: f.dim(),
            });
        }
    }
    let mut packets = Vec::with_capacity(frames.len().div_ceil(q));
    let mut iter = frames.into_iter().peekable();
    while iter.peek().is_some() {
        let chunk: Vec<FrameVector> = iter.by_ref().take(q).collect();
        packets.push(Packet {
            index: packets.len() + 1,
            frames: chunk,
        });
    }
    Ok(packets)
}

/// The packetized source side of one utterance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SourceStream {
    packets: Vec<Packet>,
}

impl SourceStream {
    pub fn from_frames(frames: Vec<FrameVector>, q: usize) -> Result<Self, StreamError> {
        Ok(Self {
            packets: packetize(frames, q)?,
        })
    }

    /// Packets must be indexed `1..=n` in order.
    pub fn from_packets(packets: Vec<Packet>) -> Self {
        debug_assert!(packets.iter().enumerate().all(|(i, p)| p.index == i + 1));
        Self { packets }
    }

    pub fn packets(&self) -> &[Packet] {
        &self.packets
    }

    /// Total packet count |x|.
    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    /// Packets `1..=n`, clamped to the stream length.
    pub fn prefix(&self, n: usize) -> &[Packet] {
        &self.packets[..n.min(self.packets.len())]
    }

    pub fn frame_count(&self) -> usize {
        self.packets.iter().map(|p| p.frames.len()).sum()
    }

    pub fn frames(&self) -> impl Iterator<Item = &FrameVector> {
        self.packets.iter().flat_map(|p| p.frames.iter())
    }
}

/// Target language tag such as `es`. Ordered by tag, which fixes the write
/// order of simultaneous grants.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TargetLanguage(String);

impl TargetLanguage {
    pub fn new(tag: impl Into<String>) -> Result<Self, StreamError> {
        let tag = tag.into();
        let ok = !tag.is_empty() && tag.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if ok {
            Ok(Self(tag))
        } else {
            Err(StreamError::InvalidTag(tag))
        }
    }

    pub fn tag(&self) -> &str {
        &self.0
    }

    /// Reserved vocabulary token prepended for the unified decoder, e.g. `<2es>`.
    pub fn lang_token(&self) -> String {
        format!("<2{}>", self.0)
    }
}

impl fmt::Display for TargetLanguage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for TargetLanguage {
    type Error = StreamError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<TargetLanguage> for String {
    fn from(value: TargetLanguage) -> Self {
        value.0
    }
}

/// Parse a comma separated tag list such as `es,fr`.
pub fn parse_languages(list: &str) -> Result<Vec<TargetLanguage>, StreamError> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(TargetLanguage::new)
        .collect()
}

/// Whitespace tokenization used for transcripts and references.
pub fn split_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

/// True for the reserved `<2xx>` language-token spelling.
pub fn is_lang_token(token: &str) -> bool {
    token.len() > 3 && token.starts_with("<2") && token.ends_with('>')
}

/// One source utterance with its multi-way aligned references.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub stream: SourceStream,
    pub transcript: Option<Vec<String>>,
    pub references: BTreeMap<TargetLanguage, Vec<String>>,
}

impl Utterance {
    pub fn new(
        id: impl Into<String>,
        stream: SourceStream,
        transcript: Option<Vec<String>>,
        references: BTreeMap<TargetLanguage, Vec<String>>,
    ) -> Result<Self, StreamError> {
        let id = id.into();
        for (lang, tokens) in &references {
            for token in tokens {
                if token.is_empty() || token.chars().any(char::is_whitespace) || is_lang_token(token) {
                    return Err(StreamError::InvalidToken {
                        token: token.clone(),
                        context: format!("{id} reference {lang}"),
                    });
                }
            }
        }
        Ok(Self {
            id,
            stream,
            transcript,
            references,
        })
    }

    pub fn reference(&self, lang: &TargetLanguage) -> Result<&[String], StreamError> {
        match self.references.get(lang) {
            Some(r) if !r.is_empty() => Ok(r),
            _ => Err(StreamError::MissingReference {
                id: self.id.clone(),
                lang: lang.to_string(),
            }),
        }
    }
}
