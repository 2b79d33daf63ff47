//! Question-answer synthesis from document chunks.
//!
//! A chunk is sent to a chat backend under a fixed instruction; the reply is
//! parsed into Q/A pairs and each pair becomes a five-field [`TrainingRecord`]
//! with the question as `instruction` and the answer as `output`.

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{detect_language, normalize_text, Chunk, Lang, SourceKind};
use crate::llm_client::{ChatClient, ChatMessage, ChatParams, ClientError};
use crate::text::approx_token_count;

/// System instruction for QA synthesis. The text itself tells the model to
/// answer in the language of the input, so it is the same for every chunk.
pub const GENERATION_INSTRUCTION: &str = "You are a helpful assistant. According to the language of the input text, generate highly professional and technical question-answer pairs about nuclear fusion for advanced educational purposes. Ensure that the questions are specific, research-oriented, and cover critical aspects or challenges of nuclear fusion, such as plasma confinement, energy efficiency, or tokamak design. If the text is in Chinese, generate Q&A pairs in Chinese; if the text is in English, generate Q&A pairs in English. Ensure the format is consistent: Q: <question> A: <answer>.";

/// Optional polishing pass applied to back-translated instructions.
pub const REFINE_INSTRUCTION: &str = "Rewrite the following question so that it is fluent, precise and keeps exactly the same meaning and language. Reply with the rewritten question only.";

#[derive(Debug, Error)]
pub enum QaError {
    #[error("chunk text is empty")]
    EmptyChunk,
    #[error("no well-formed Q/A pairs in completion")]
    NoPairsFound,
    #[error("pivot language {pivot} must differ from the record language {record}")]
    SamePivot { pivot: Lang, record: Lang },
    #[error("unsupported language {0} for translation")]
    UnsupportedLanguage(Lang),
    #[error(transparent)]
    Client(#[from] ClientError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub doc_id: String,
    pub chunk_index: usize,
}

impl Provenance {
    pub fn of(chunk: &Chunk) -> Self {
        Self { doc_id: chunk.doc_id.clone(), chunk_index: chunk.index }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    pub lang: Lang,
    pub source: SourceKind,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub source: SourceKind,
    pub unit_count: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub augmented: bool,
}

/// Five-field supervised fine-tuning row; `input`, `system` and `history`
/// may be empty but are always present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub system: String,
    pub history: Vec<(String, String)>,
    pub meta: RecordMeta,
}

impl TrainingRecord {
    pub fn is_valid(&self) -> bool {
        !self.instruction.trim().is_empty() && !self.output.trim().is_empty()
    }

    fn count_units(&self) -> usize {
        approx_token_count(&self.instruction)
            + approx_token_count(&self.input)
            + approx_token_count(&self.output)
            + approx_token_count(&self.system)
            + self
                .history
                .iter()
                .map(|(q, a)| approx_token_count(q) + approx_token_count(a))
                .sum::<usize>()
    }
}

pub fn build_generation_prompt(chunk: &Chunk) -> Result<Vec<ChatMessage>, QaError> {
    if chunk.text.trim().is_empty() {
        return Err(QaError::EmptyChunk);
    }
    Ok(vec![ChatMessage::system(GENERATION_INSTRUCTION), ChatMessage::user(chunk.text.clone())])
}

/// Pairs recovered from one completion plus what was thrown away.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedPairs {
    pub pairs: Vec<QaPair>,
    /// Well-formed pairs whose language differed from the expected one.
    pub dropped_language: usize,
    /// Questions without exactly one answer, or empty sides.
    pub malformed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Marker {
    Q,
    A,
}

/// Matches `Q:`, `Q：`, `Q12:` and the `A` equivalents at the start of `s`;
/// returns the marker and the byte length it occupies.
fn marker_at(s: &str) -> Option<(Marker, usize)> {
    let mut chars = s.char_indices();
    let marker = match chars.next()?.1 {
        'Q' => Marker::Q,
        'A' => Marker::A,
        _ => return None,
    };
    for (i, c) in chars {
        if c.is_ascii_digit() {
            continue;
        }
        return matches!(c, ':' | '：').then_some((marker, i + c.len_utf8()));
    }
    None
}

/// Finds an `A:` marker preceded by whitespace inside a question line.
fn inline_answer(line: &str) -> Option<(usize, usize)> {
    let mut prev_space = false;
    for (i, c) in line.char_indices() {
        if prev_space && c == 'A' {
            if let Some((Marker::A, len)) = marker_at(&line[i..]) {
                return Some((i, i + len));
            }
        }
        prev_space = c.is_whitespace();
    }
    None
}

enum ParseState {
    Outside,
    Question(String),
    Answer { question: String, answer: String, repeated: bool },
}

/// Splits a completion into Q/A pairs.
///
/// A question starts at a `Q` marker at the beginning of a line (after
/// optional whitespace). Its answer starts at the next `A` marker, either at a
/// line start or inline after whitespace, and runs until the next question.
/// A question with no answer, or with a second line-start `A` marker, is
/// malformed and skipped.
pub fn parse_qa_pairs(
    completion: &str,
    expected: Lang,
    source: SourceKind,
    provenance: &Provenance,
) -> Result<ParsedPairs, QaError> {
    let mut parsed = ParsedPairs::default();
    let mut raw: Vec<(String, String)> = Vec::new();
    let mut state = ParseState::Outside;

    let finish = |state: ParseState, raw: &mut Vec<(String, String)>, malformed: &mut usize| match state {
        ParseState::Outside => {}
        ParseState::Question(_) => *malformed += 1,
        ParseState::Answer { question, answer, repeated } => {
            let (q, a) = (question.trim(), answer.trim());
            if repeated || q.is_empty() || a.is_empty() {
                *malformed += 1;
            } else {
                raw.push((q.to_string(), a.to_string()));
            }
        }
    };

    for line in completion.lines() {
        let trimmed = line.trim_start();
        match marker_at(trimmed) {
            Some((Marker::Q, len)) => {
                let prev = std::mem::replace(&mut state, ParseState::Outside);
                finish(prev, &mut raw, &mut parsed.malformed);
                let rest = &trimmed[len..];
                state = match inline_answer(rest) {
                    Some((at, after)) => ParseState::Answer {
                        question: rest[..at].to_string(),
                        answer: rest[after..].to_string(),
                        repeated: false,
                    },
                    None => ParseState::Question(rest.to_string()),
                };
            }
            Some((Marker::A, len)) => {
                let rest = &trimmed[len..];
                state = match std::mem::replace(&mut state, ParseState::Outside) {
                    ParseState::Outside => {
                        parsed.malformed += 1;
                        ParseState::Outside
                    }
                    ParseState::Question(question) => {
                        ParseState::Answer { question, answer: rest.to_string(), repeated: false }
                    }
                    ParseState::Answer { question, answer, .. } => {
                        ParseState::Answer { question, answer, repeated: true }
                    }
                };
            }
            None => match &mut state {
                ParseState::Outside => {}
                ParseState::Question(q) => match inline_answer(line) {
                    Some((at, after)) => {
                        let question = format!("{q}\n{}", &line[..at]);
                        state = ParseState::Answer {
                            question,
                            answer: line[after..].to_string(),
                            repeated: false,
                        };
                    }
                    None => {
                        q.push('\n');
                        q.push_str(line);
                    }
                },
                ParseState::Answer { answer, .. } => {
                    answer.push('\n');
                    answer.push_str(line);
                }
            },
        }
    }
    finish(state, &mut raw, &mut parsed.malformed);

    if raw.is_empty() && !completion.trim().is_empty() {
        return Err(QaError::NoPairsFound);
    }
    for (question, answer) in raw {
        let q_lang = detect_language(&question).unwrap_or(Lang::Other);
        let a_lang = detect_language(&answer).unwrap_or(Lang::Other);
        if q_lang != expected || a_lang != expected {
            parsed.dropped_language += 1;
            continue;
        }
        parsed.pairs.push(QaPair {
            question,
            answer,
            lang: expected,
            source,
            provenance: provenance.clone(),
        });
    }
    Ok(parsed)
}

/// Result of running QA synthesis over one chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkOutcome {
    pub pairs: Vec<QaPair>,
    pub dropped_language: usize,
    pub malformed: usize,
    /// True when the completion held no usable Q/A markup.
    pub skipped: bool,
}

pub async fn generate_qa(chunk: &Chunk, client: &ChatClient, params: &ChatParams) -> Result<ChunkOutcome, QaError> {
    let messages = build_generation_prompt(chunk)?;
    let completion = client.chat(&messages, params).await?;
    match parse_qa_pairs(&completion.text, chunk.lang, chunk.source, &Provenance::of(chunk)) {
        Ok(parsed) => Ok(ChunkOutcome {
            pairs: parsed.pairs,
            dropped_language: parsed.dropped_language,
            malformed: parsed.malformed,
            skipped: false,
        }),
        Err(QaError::NoPairsFound) => {
            Ok(ChunkOutcome { pairs: Vec::new(), dropped_language: 0, malformed: 0, skipped: true })
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub chunks: usize,
    pub pairs: usize,
    pub skipped_chunks: usize,
    /// Chunks whose document language is neither zh nor en.
    pub unsupported_language_chunks: usize,
    pub dropped_language: usize,
    pub malformed: usize,
    pub failed_chunks: usize,
    pub failures: Vec<String>,
}

/// Runs [`generate_qa`] over all chunks with at most `concurrency` chunks in
/// flight. Pairs come back in chunk order regardless of completion order.
/// A chunk whose backend call fails is counted and skipped.
pub async fn generate_all(
    chunks: &[Chunk],
    client: &ChatClient,
    params: &ChatParams,
    concurrency: usize,
) -> (Vec<QaPair>, GenerationStats) {
    let mut stats = GenerationStats { chunks: chunks.len(), ..Default::default() };
    let results: Vec<_> = stream::iter(chunks.iter())
        .map(|chunk| async move {
            if !matches!(chunk.lang, Lang::Zh | Lang::En) {
                return (chunk, None);
            }
            (chunk, Some(generate_qa(chunk, client, params).await))
        })
        .buffered(concurrency.max(1))
        .collect()
        .await;

    let mut pairs = Vec::new();
    for (chunk, result) in results {
        match result {
            None => stats.unsupported_language_chunks += 1,
            Some(Ok(outcome)) => {
                stats.skipped_chunks += usize::from(outcome.skipped);
                stats.dropped_language += outcome.dropped_language;
                stats.malformed += outcome.malformed;
                pairs.extend(outcome.pairs);
            }
            Some(Err(e)) => {
                stats.failed_chunks += 1;
                stats.failures.push(format!("{}#{}: {e}", chunk.doc_id, chunk.index));
            }
        }
    }
    stats.pairs = pairs.len();
    (pairs, stats)
}

pub fn make_training_record(qa: &QaPair) -> TrainingRecord {
    let mut record = TrainingRecord {
        instruction: qa.question.clone(),
        input: String::new(),
        output: qa.answer.clone(),
        system: String::new(),
        history: Vec::new(),
        meta: RecordMeta { source: qa.source, unit_count: 0, augmented: false },
    };
    record.meta.unit_count = record.count_units();
    record
}

fn language_name(lang: Lang) -> Result<&'static str, QaError> {
    match lang {
        Lang::Zh => Ok("Chinese"),
        Lang::En => Ok("English"),
        Lang::Other => Err(QaError::UnsupportedLanguage(lang)),
    }
}

fn translation_prompt(text: &str, target: Lang) -> Result<Vec<ChatMessage>, QaError> {
    let name = language_name(target)?;
    Ok(vec![
        ChatMessage::system(format!(
            "Translate the user's text into {name}. Preserve technical terms and reply with the translation only."
        )),
        ChatMessage::user(text),
    ])
}

/// Translates `text` into `target` with one backend call.
pub async fn translate(text: &str, target: Lang, client: &ChatClient, params: &ChatParams) -> Result<String, QaError> {
    let messages = translation_prompt(text, target)?;
    Ok(client.chat(&messages, params).await?.text.trim().to_string())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentOptions {
    /// Adds one call that polishes the back-translated instruction.
    pub refine: bool,
}

/// Paraphrases the instruction by translating it to `pivot` and back.
///
/// Either every call succeeds and a new record (same output, `augmented`
/// set) is returned, or the first error is returned.
pub async fn back_translate_augment(
    record: &TrainingRecord,
    pivot: Lang,
    client: &ChatClient,
    params: &ChatParams,
    options: AugmentOptions,
) -> Result<TrainingRecord, QaError> {
    let original = detect_language(&record.instruction).unwrap_or(Lang::Other);
    language_name(original)?;
    language_name(pivot)?;
    if pivot == original {
        return Err(QaError::SamePivot { pivot, record: original });
    }
    let pivoted = translate(&record.instruction, pivot, client, params).await?;
    let mut paraphrase = translate(&pivoted, original, client, params).await?;
    if options.refine {
        let messages = [ChatMessage::system(REFINE_INSTRUCTION), ChatMessage::user(paraphrase.clone())];
        paraphrase = client.chat(&messages, params).await?.text.trim().to_string();
    }
    let mut augmented = record.clone();
    augmented.instruction = paraphrase;
    augmented.meta.augmented = true;
    augmented.meta.unit_count = augmented.count_units();
    Ok(augmented)
}

/// True when the paraphrase adds nothing over the original instruction.
pub fn is_trivial_paraphrase(original: &TrainingRecord, paraphrase: &TrainingRecord) -> bool {
    let p = normalize_text(&paraphrase.instruction);
    p.is_empty() || p == normalize_text(&original.instruction)
}

/// Back-translates every record, keeping only non-trivial paraphrases.
/// Records whose language cannot pivot are passed over.
pub async fn augment_records(
    records: &[TrainingRecord],
    client: &ChatClient,
    params: &ChatParams,
    options: AugmentOptions,
    concurrency: usize,
) -> Result<Vec<TrainingRecord>, QaError> {
    let results: Vec<_> = stream::iter(records.iter())
        .map(|record| async move {
            let pivot = match detect_language(&record.instruction) {
                Ok(Lang::Zh) => Lang::En,
                Ok(Lang::En) => Lang::Zh,
                _ => return Ok(None),
            };
            back_translate_augment(record, pivot, client, params, options)
                .await
                .map(|aug| (!is_trivial_paraphrase(record, &aug)).then_some(aug))
        })
        .buffered(concurrency.max(1))
        .collect()
        .await;
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prov() -> Provenance {
        Provenance { doc_id: "d".into(), chunk_index: 0 }
    }

    fn parse(text: &str, lang: Lang) -> Result<ParsedPairs, QaError> {
        parse_qa_pairs(text, lang, SourceKind::Arxiv, &prov())
    }

    #[test]
    fn single_inline_pair() {
        let p = parse("Q: What is a tokamak? A: A toroidal magnetic-confinement device.", Lang::En).unwrap();
        assert_eq!(p.pairs.len(), 1);
        assert_eq!(p.pairs[0].question, "What is a tokamak?");
        assert_eq!(p.pairs[0].answer, "A toroidal magnetic-confinement device.");
    }

    #[test]
    fn numbered_blocks_in_order() {
        let text = "Here are the pairs:\n\nQ1: What heats the plasma in EAST?\nA1: Neutral beams and RF waves.\n\n  Q2: Why is tritium bred?\nA2: Because natural supplies are scarce,\nso blankets breed it from lithium.\n";
        let p = parse(text, Lang::En).unwrap();
        assert_eq!(p.pairs.len(), 2);
        assert_eq!(p.pairs[0].question, "What heats the plasma in EAST?");
        assert_eq!(p.pairs[0].answer, "Neutral beams and RF waves.");
        assert_eq!(p.pairs[1].question, "Why is tritium bred?");
        assert_eq!(p.pairs[1].answer, "Because natural supplies are scarce,\nso blankets breed it from lithium.");
    }

    #[test]
    fn fullwidth_colon_markers() {
        let p = parse("Q：什么是托卡马克？\nA：一种环形磁约束装置。", Lang::Zh).unwrap();
        assert_eq!(p.pairs.len(), 1);
        assert_eq!(p.pairs[0].question, "什么是托卡马克？");
    }

    #[test]
    fn prose_has_no_pairs() {
        assert!(matches!(parse("The plasma is hot.", Lang::En), Err(QaError::NoPairsFound)));
        assert_eq!(parse("", Lang::En).unwrap(), ParsedPairs::default());
    }

    #[test]
    fn malformed_blocks_are_counted() {
        let text = "Q: orphan question?\nQ: good one?\nA: good answer.\nQ: twice answered?\nA: one.\nA: two.";
        let p = parse(text, Lang::En).unwrap();
        assert_eq!(p.pairs.len(), 1);
        assert_eq!(p.malformed, 2);
    }

    #[test]
    fn wrong_language_pairs_dropped() {
        let text = "Q: What is EAST?\nA: A tokamak.\nQ: 什么是EAST？\nA: 一个托卡马克装置。";
        let p = parse(text, Lang::En).unwrap();
        assert_eq!(p.pairs.len(), 1);
        assert_eq!(p.dropped_language, 1);
    }

    #[test]
    fn record_fields() {
        let qa = QaPair {
            question: "什么是托卡马克？".into(),
            answer: "一种环形磁约束装置。".into(),
            lang: Lang::Zh,
            source: SourceKind::Cnki,
            provenance: prov(),
        };
        let r = make_training_record(&qa);
        assert_eq!(r.instruction.as_bytes(), "什么是托卡马克？".as_bytes());
        assert_eq!(r.output, qa.answer);
        assert!(r.input.is_empty() && r.system.is_empty() && r.history.is_empty());
        assert!(r.is_valid());
        assert_eq!(r.meta.unit_count, 7 + 9);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["meta"]["source"], "cnki");
        assert!(json["meta"].get("augmented").is_none());
        assert_eq!(json["history"], serde_json::json!([]));
    }

    #[test]
    fn generation_prompt_shape() {
        let chunk = Chunk {
            doc_id: "d".into(),
            index: 0,
            text: "Tokamaks confine plasma.".into(),
            unit_count: 3,
            source: SourceKind::Arxiv,
            lang: Lang::En,
            span: (0, 24),
        };
        let m = build_generation_prompt(&chunk).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].content, GENERATION_INSTRUCTION);
        assert_eq!(m[1].content, chunk.text);
        let empty = Chunk { text: "  ".into(), ..chunk };
        assert!(matches!(build_generation_prompt(&empty), Err(QaError::EmptyChunk)));
    }
}
