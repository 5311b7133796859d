//! Dataset manifests (TSV) and per-utterance feature files.
//!
//! Manifest layout, one header row then one row per utterance:
//!
//! ```text
//! id  features  n_frames  transcript  ref_es  ref_fr
//! ```
//!
//! Language columns extend to the right. `features` is a path relative to the
//! manifest's directory pointing at a file of little-endian `f32` values,
//! row-major `n_frames x dim`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stream::{
    split_tokens, FrameVector, SourceStream, StreamError, TargetLanguage, Utterance, DEFAULT_FEATURE_DIM,
    DEFAULT_PACKET_FRAMES,
};

const FIXED_COLUMNS: [&str; 4] = ["id", "features", "n_frames", "transcript"];
const REF_PREFIX: &str = "ref_";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("schema error: missing column {0}")]
    MissingColumn(String),
    #[error("line {line}: {detail}")]
    Format { line: usize, detail: String },
    #[error("integrity error in record {id}: {detail}")]
    Integrity { id: String, detail: String },
    #[error("record {id}: {source}")]
    Stream {
        id: String,
        #[source]
        source: StreamError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = ManifestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(ManifestError::Schema(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub features: String,
    pub n_frames: usize,
    pub transcript: String,
    /// Raw reference text, one entry per language column in header order.
    pub references: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub split: Option<Split>,
    languages: Vec<TargetLanguage>,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(split: Option<Split>, languages: Vec<TargetLanguage>) -> Self {
        Self {
            split,
            languages,
            records: Vec::new(),
        }
    }

    /// Language columns in header order.
    pub fn languages(&self) -> &[TargetLanguage] {
        &self.languages
    }

    pub fn push(&mut self, record: ManifestRecord) {
        assert_eq!(record.references.len(), self.languages.len());
        self.records.push(record);
    }

    pub fn parse(text: &str, split: Option<Split>) -> Result<Self, ManifestError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| ManifestError::Schema("empty manifest".into()))?;
        let columns: Vec<&str> = header.split('\t').collect();
        for (i, name) in FIXED_COLUMNS.iter().enumerate() {
            if columns.get(i) != Some(name) {
                return Err(ManifestError::MissingColumn((*name).to_owned()));
            }
        }
        let mut languages = Vec::new();
        for col in &columns[FIXED_COLUMNS.len()..] {
            let tag = col
                .strip_prefix(REF_PREFIX)
                .ok_or_else(|| ManifestError::Schema(format!("unexpected column {col:?}")))?;
            let lang = TargetLanguage::new(tag).map_err(|e| ManifestError::Schema(format!("column {col:?}: {e}")))?;
            if languages.contains(&lang) {
                return Err(ManifestError::Schema(format!("duplicate column {col:?}")));
            }
            languages.push(lang);
        }

        let mut manifest = Self::new(split, languages);
        for (lineno, line) in lines {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != columns.len() {
                return Err(ManifestError::Format {
                    line: lineno + 1,
                    detail: format!("expected {} fields, found {}", columns.len(), fields.len()),
                });
            }
            let n_frames = fields[2].parse().map_err(|_| ManifestError::Format {
                line: lineno + 1,
                detail: format!("bad n_frames {:?}", fields[2]),
            })?;
            manifest.records.push(ManifestRecord {
                id: fields[0].to_owned(),
                features: fields[1].to_owned(),
                n_frames,
                transcript: fields[3].to_owned(),
                references: fields[4..].iter().map(|s| (*s).to_owned()).collect(),
            });
        }
        Ok(manifest)
    }

    /// Read a manifest; the split is taken from the file stem when it is one of
    /// `train`, `dev` or `test`.
    pub fn read(path: &Path) -> Result<Self, ManifestError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let split = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok());
        Self::parse(&text, split)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = FIXED_COLUMNS.join("\t");
        for lang in &self.languages {
            out.push('\t');
            out.push_str(REF_PREFIX);
            out.push_str(lang.tag());
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.id);
            out.push('\t');
            out.push_str(&r.features);
            out.push('\t');
            out.push_str(&r.n_frames.to_string());
            out.push('\t');
            out.push_str(&r.transcript);
            for reference in &r.references {
                out.push('\t');
                out.push_str(reference);
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), ManifestError> {
        fs::write(path, self.to_tsv()).map_err(io_err(path))
    }

    fn column_index(&self, lang: &TargetLanguage) -> Result<usize, ManifestError> {
        self.languages
            .iter()
            .position(|l| l == lang)
            .ok_or_else(|| ManifestError::MissingColumn(format!("{REF_PREFIX}{lang}")))
    }

    /// Lazily materialize utterances in file order. Feature files are read one
    /// record at a time.
    pub fn utterances<'a>(
        &'a self,
        base_dir: &'a Path,
        languages: &[TargetLanguage],
        options: LoadOptions,
    ) -> Result<impl Iterator<Item = Result<Utterance, ManifestError>> + 'a, ManifestError> {
        let columns: Vec<(TargetLanguage, usize)> = languages
            .iter()
            .map(|l| Ok((l.clone(), self.column_index(l)?)))
            .collect::<Result<_, ManifestError>>()?;
        if options.q == 0 {
            return Err(ManifestError::Schema("packet size q must be >= 1".into()));
        }
        Ok(self
            .records
            .iter()
            .map(move |r| load_record(r, base_dir, &columns, options)))
    }
}

fn load_record(
    record: &ManifestRecord,
    base_dir: &Path,
    columns: &[(TargetLanguage, usize)],
    options: LoadOptions,
) -> Result<Utterance, ManifestError> {
    let path = base_dir.join(&record.features);
    let frames = read_features(&path, options.dim)?;
    if frames.len() != record.n_frames {
        return Err(ManifestError::Integrity {
            id: record.id.clone(),
            detail: format!(
                "manifest says {} frames, {} holds {}",
                record.n_frames,
                path.display(),
                frames.len()
            ),
        });
    }
    let stream_err = |source| ManifestError::Stream {
        id: record.id.clone(),
        source,
    };
    let stream = SourceStream::from_frames(frames, options.q).map_err(stream_err)?;
    let mut references = BTreeMap::new();
    for (lang, col) in columns {
        let tokens = split_tokens(&record.references[*col]);
        if tokens.is_empty() {
            return Err(ManifestError::Integrity {
                id: record.id.clone(),
                detail: format!("empty reference for {lang}"),
            });
        }
        references.insert(lang.clone(), tokens);
    }
    let transcript = Some(split_tokens(&record.transcript)).filter(|t| !t.is_empty());
    Utterance::new(record.id.clone(), stream, transcript, references).map_err(stream_err)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// Frames per packet.
    pub q: usize,
    /// Feature dimension of every frame.
    pub dim: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            q: DEFAULT_PACKET_FRAMES,
            dim: DEFAULT_FEATURE_DIM,
        }
    }
}

/// Load every utterance of the manifest at `path`, in file order.
pub fn load_manifest(
    path: &Path,
    languages: &[TargetLanguage],
    options: LoadOptions,
) -> Result<Vec<Utterance>, ManifestError> {
    let manifest = Manifest::read(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let utterances = manifest.utterances(base, languages, options)?.collect();
    utterances
}

pub fn read_features(path: &Path, dim: usize) -> Result<Vec<FrameVector>, ManifestError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let row = dim * 4;
    if dim == 0 || bytes.len() % row != 0 {
        return Err(ManifestError::Integrity {
            id: path.display().to_string(),
            detail: format!("{} bytes is not a whole number of {dim}-dim frames", bytes.len()),
        });
    }
    bytes
        .chunks_exact(row)
        .enumerate()
        .map(|(index, chunk)| {
            let values = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            FrameVector::new(values).map_err(|_| ManifestError::Integrity {
                id: path.display().to_string(),
                detail: format!("non-finite value in frame {index}"),
            })
        })
        .collect()
}

pub fn write_features<'a>(path: &Path, frames: impl IntoIterator<Item = &'a FrameVector>) -> Result<(), ManifestError> {
    let mut buf = Vec::new();
    for frame in frames {
        for v in frame.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&buf).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_corpus(dir: &Path, rows: &[(&str, usize, &str, &str)]) -> PathBuf {
        let mut m = Manifest::new(
            Some(Split::Test),
            vec![TargetLanguage::new("es").unwrap(), TargetLanguage::new("fr").unwrap()],
        );
        fs::create_dir_all(dir.join("feats")).unwrap();
        for (id, n, es, fr) in rows {
            let frames: Vec<_> = (0..*n).map(|i| FrameVector::new(vec![i as f32; 4]).unwrap()).collect();
            let rel = format!("feats/{id}.f32");
            write_features(&dir.join(&rel), &frames).unwrap();
            m.push(ManifestRecord {
                id: (*id).to_owned(),
                features: rel,
                n_frames: *n,
                transcript: "hello world".into(),
                references: vec![(*es).to_owned(), (*fr).to_owned()],
            });
        }
        let path = dir.join("test.tsv");
        m.write(&path).unwrap();
        path
    }

    fn opts() -> LoadOptions {
        LoadOptions { q: 2, dim: 4 }
    }

    #[test]
    fn loads_three_rows_with_two_references() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_corpus(
            dir.path(),
            &[
                ("a", 3, "hola", "salut"),
                ("b", 4, "uno dos", "un deux"),
                ("c", 1, "x", "y"),
            ],
        );
        let langs = crate::stream::parse_languages("es,fr").unwrap();
        let utts = load_manifest(&path, &langs, opts()).unwrap();
        assert_eq!(utts.len(), 3);
        assert_eq!(utts[1].id, "b");
        assert_eq!(utts[1].references.len(), 2);
        assert_eq!(utts[1].references[&langs[1]], vec!["un", "deux"]);
        assert_eq!(utts[0].stream.len(), 2);
        assert_eq!(Manifest::read(&path).unwrap().split, Some(Split::Test));
    }

    #[test]
    fn missing_language_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_corpus(dir.path(), &[("a", 3, "hola", "salut")]);
        let langs = crate::stream::parse_languages("es,de").unwrap();
        let err = load_manifest(&path, &langs, opts()).unwrap_err();
        assert!(
            matches!(&err, ManifestError::MissingColumn(c) if c == "ref_de"),
            "{err}"
        );
    }

    #[test]
    fn frame_count_mismatch_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_corpus(dir.path(), &[("a", 3, "hola", "salut"), ("b", 2, "x", "y")]);
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("b\tfeats/b.f32\t2", "b\tfeats/b.f32\t5");
        fs::write(&path, text).unwrap();
        let langs = crate::stream::parse_languages("es").unwrap();
        let err = load_manifest(&path, &langs, opts()).unwrap_err();
        assert!(
            matches!(&err, ManifestError::Integrity { id, .. } if id == "b"),
            "{err}"
        );
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let text = "id\tfeatures\tn_frames\ttranscript\tref_es\tref_fr\n\
                    u1\tf/u1.f32\t14\tthe cat\tel gato .\tle chat .\n\
                    u2\tf/u2.f32\t0\t\tx\ty\n";
        let m = Manifest::parse(text, None).unwrap();
        assert_eq!(m.to_tsv(), text);
    }

    #[test]
    fn rejects_bad_header() {
        let err = Manifest::parse("id\tfeats\tn_frames\ttranscript\n", None).unwrap_err();
        assert!(matches!(err, ManifestError::MissingColumn(c) if c == "features"));
        assert!(Manifest::parse("id\tfeatures\tn_frames\ttranscript\tes\n", None).is_err());
    }

    #[test]
    fn truncated_feature_file_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.f32");
        fs::write(&p, [0u8; 10]).unwrap();
        assert!(matches!(read_features(&p, 2), Err(ManifestError::Integrity { .. })));
    }
}
