//! Loading, normalizing, language-tagging and chunking raw source documents.
//!
//! Input is pre-extracted UTF-8 text. A `.txt` file is one document unless it
//! contains a line consisting of exactly [`RECORD_SEPARATOR`], in which case
//! every separated record becomes its own document with id `<file>#<ordinal>`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::text::{approx_token_count, is_cjk, is_latin_letter, unit_spans};

pub const RECORD_SEPARATOR: &str = "---RECORD---";

/// Fraction of (letters + CJK codepoints) that must be CJK for a text to be tagged `zh`.
pub const CJK_THRESHOLD: f64 = 0.30;

pub const DEFAULT_MAX_UNITS: usize = 2000;
pub const DEFAULT_OVERLAP: usize = 200;

/// Share of undecodable bytes above which a file is rejected.
const MAX_INVALID_BYTE_FRACTION: f64 = 0.01;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("unreadable path {path}: {reason}")]
    UnreadablePath { path: PathBuf, reason: String },
    #[error("{path}: {invalid} of {total} bytes are not valid UTF-8")]
    UndecodableText { path: PathBuf, invalid: usize, total: usize },
    #[error("language detection needs non-empty text")]
    EmptyText,
    #[error("invalid window: overlap {overlap} must be smaller than max_units {max_units}")]
    InvalidWindow { max_units: usize, overlap: usize },
}

/// The five corpus source kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    #[serde(alias = "CommonCrawl")]
    Commoncrawl,
    #[serde(alias = "CNKI")]
    Cnki,
    #[serde(alias = "ebooks", alias = "eBooks")]
    Ebook,
    #[serde(alias = "arXiv")]
    Arxiv,
    #[serde(alias = "dissertations")]
    Dissertation,
}

impl SourceKind {
    pub const ALL: [SourceKind; 5] = [
        SourceKind::Commoncrawl,
        SourceKind::Cnki,
        SourceKind::Ebook,
        SourceKind::Arxiv,
        SourceKind::Dissertation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SourceKind::Commoncrawl => "commoncrawl",
            SourceKind::Cnki => "cnki",
            SourceKind::Ebook => "ebook",
            SourceKind::Arxiv => "arxiv",
            SourceKind::Dissertation => "dissertation",
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SourceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "commoncrawl" => Ok(SourceKind::Commoncrawl),
            "cnki" => Ok(SourceKind::Cnki),
            "ebook" | "ebooks" => Ok(SourceKind::Ebook),
            "arxiv" => Ok(SourceKind::Arxiv),
            "dissertation" | "dissertations" => Ok(SourceKind::Dissertation),
            other => Err(format!("unknown source kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    Zh,
    En,
    Other,
}

impl Lang {
    pub fn name(self) -> &'static str {
        match self {
            Lang::Zh => "zh",
            Lang::En => "en",
            Lang::Other => "other",
        }
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Lang {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zh" => Ok(Lang::Zh),
            "en" => Ok(Lang::En),
            "other" => Ok(Lang::Other),
            other => Err(format!("unknown language `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub id: String,
    pub source: SourceKind,
    pub lang: Lang,
    pub text: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

/// A window of a normalized document.
///
/// `span` is the byte range of `text` inside the document; consecutive chunks
/// overlap by `prev.span.1 - next.span.0` bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub doc_id: String,
    pub index: usize,
    pub text: String,
    pub unit_count: usize,
    pub source: SourceKind,
    pub lang: Lang,
    pub span: (usize, usize),
}

/// Unicode NFC, whitespace runs collapsed to one space, other control
/// characters dropped, ends trimmed.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.nfc() {
        if c.is_whitespace() {
            pending_space = true;
        } else if c.is_control() {
            continue;
        } else {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        }
    }
    out
}

pub fn detect_language(text: &str) -> Result<Lang, IngestError> {
    if text.is_empty() {
        return Err(IngestError::EmptyText);
    }
    let mut cjk = 0usize;
    let mut letters = 0usize;
    let mut latin = false;
    for c in text.chars() {
        if is_cjk(c) {
            cjk += 1;
        } else if c.is_alphabetic() {
            letters += 1;
            latin |= is_latin_letter(c);
        }
    }
    let total = cjk + letters;
    if total > 0 && cjk as f64 >= CJK_THRESHOLD * total as f64 {
        Ok(Lang::Zh)
    } else if latin {
        Ok(Lang::En)
    } else {
        Ok(Lang::Other)
    }
}

/// Cuts a document into windows of at most `max_units` counting units, each
/// starting `overlap` units before the previous window ended.
///
/// Windows begin at a unit boundary, so no CJK character or Latin word is ever
/// split. A document that fits yields itself as the only chunk; a document
/// with no countable units yields none.
pub fn chunk_document(
    doc: &SourceDocument,
    max_units: usize,
    overlap: usize,
) -> Result<Vec<Chunk>, IngestError> {
    if max_units == 0 || overlap >= max_units {
        return Err(IngestError::InvalidWindow { max_units, overlap });
    }
    let text = doc.text.as_str();
    let units = unit_spans(text);
    let n = units.len();
    if n == 0 {
        return Ok(Vec::new());
    }

    let byte_at = |unit: usize| if unit >= n { text.len() } else { units[unit].start };
    let mut chunks = Vec::new();
    let mut start = 0usize;
    loop {
        let end = (start + max_units).min(n);
        let lo = if start == 0 { 0 } else { byte_at(start) };
        let hi = byte_at(end);
        let slice = &text[lo..hi];
        chunks.push(Chunk {
            doc_id: doc.id.clone(),
            index: chunks.len(),
            text: slice.to_string(),
            unit_count: approx_token_count(slice),
            source: doc.source,
            lang: doc.lang,
            span: (lo, hi),
        });
        if end == n {
            break;
        }
        start = end - overlap;
    }
    Ok(chunks)
}

/// Rebuilds the document text from its chunks by dropping each overlap.
pub fn reassemble_chunks(chunks: &[Chunk]) -> String {
    let mut out = String::new();
    let mut covered = 0usize;
    for chunk in chunks {
        let skip = covered.saturating_sub(chunk.span.0);
        out.push_str(&chunk.text[skip..]);
        covered = chunk.span.1;
    }
    out
}

/// Pull-based reader over a file or directory of `.txt` sources.
///
/// Files are visited in sorted path order; ids are `<kind>/<relative path>`,
/// suffixed `#<ordinal>` for records of record-oriented files.
#[derive(Debug)]
pub struct SourceLoader {
    kind: SourceKind,
    root: PathBuf,
    files: std::vec::IntoIter<PathBuf>,
    pending: std::vec::IntoIter<SourceDocument>,
}

pub fn load_source(path: impl AsRef<Path>, kind: SourceKind) -> Result<SourceLoader, IngestError> {
    let path = path.as_ref();
    let unreadable = |reason: String| IngestError::UnreadablePath { path: path.to_path_buf(), reason };
    let meta = std::fs::metadata(path).map_err(|e| unreadable(e.to_string()))?;
    let (root, files) = if meta.is_dir() {
        let mut files = Vec::new();
        for entry in walkdir::WalkDir::new(path).sort_by_file_name() {
            let entry = entry.map_err(|e| unreadable(e.to_string()))?;
            let is_txt = entry.path().extension().is_some_and(|ext| ext == "txt");
            if entry.file_type().is_file() && is_txt {
                files.push(entry.into_path());
            }
        }
        (path.to_path_buf(), files)
    } else {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (root, vec![path.to_path_buf()])
    };
    Ok(SourceLoader {
        kind,
        root,
        files: files.into_iter(),
        pending: Vec::new().into_iter(),
    })
}

impl SourceLoader {
    fn read_file(&self, path: &Path) -> Result<Vec<SourceDocument>, IngestError> {
        let bytes = std::fs::read(path).map_err(|e| IngestError::UnreadablePath {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let invalid: usize = bytes.utf8_chunks().map(|c| c.invalid().len()).sum();
        if invalid as f64 > MAX_INVALID_BYTE_FRACTION * bytes.len() as f64 {
            return Err(IngestError::UndecodableText {
                path: path.to_path_buf(),
                invalid,
                total: bytes.len(),
            });
        }
        let raw = String::from_utf8_lossy(&bytes);

        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        let rel = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        let base_id = format!("{}/{}", self.kind, rel);

        let records = split_records(&raw);
        let record_oriented = records.is_some();
        let records = records.unwrap_or_else(|| vec![raw.as_ref()]);
        let mut docs = Vec::new();
        for (ordinal, record) in records.into_iter().enumerate() {
            let text = normalize_text(record);
            if text.is_empty() {
                continue;
            }
            let (id, record_meta) = if record_oriented {
                (format!("{base_id}#{ordinal}"), Some(ordinal.to_string()))
            } else {
                (base_id.clone(), None)
            };
            let mut meta = BTreeMap::new();
            meta.insert("origin".to_string(), rel.clone());
            if let Some(r) = record_meta {
                meta.insert("record".to_string(), r);
            }
            let lang = detect_language(&text)?;
            docs.push(SourceDocument { id, source: self.kind, lang, text, meta });
        }
        Ok(docs)
    }
}

impl Iterator for SourceLoader {
    type Item = Result<SourceDocument, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(doc) = self.pending.next() {
                return Some(Ok(doc));
            }
            let file = self.files.next()?;
            match self.read_file(&file) {
                Ok(docs) => self.pending = docs.into_iter(),
                Err(e) => return Some(Err(e)),
            }
        }
    }
}

/// Splits on separator lines; `None` when the text has no separator.
fn split_records(raw: &str) -> Option<Vec<&str>> {
    let mut records = Vec::new();
    let mut start = 0usize;
    let mut found = false;
    let mut offset = 0usize;
    for line in raw.split_inclusive('\n') {
        if line.trim_end_matches(['\n', '\r']) == RECORD_SEPARATOR {
            records.push(&raw[start..offset]);
            start = offset + line.len();
            found = true;
        }
        offset += line.len();
    }
    if !found {
        return None;
    }
    records.push(&raw[start..]);
    // a leading separator opens the first record rather than closing an empty one
    if records.first().is_some_and(|r| r.trim().is_empty()) {
        records.remove(0);
    }
    Some(records)
}
