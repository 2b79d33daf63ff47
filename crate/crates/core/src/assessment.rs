//! Questionnaire-based assessment of chat backends.
//!
//! Items are answered by a backend with or without the CoT scaffold, each run
//! leaving one [`Transcript`] per item in a run directory. Transcripts can be
//! scored 0-5 by a judge model and summarized into grouped reports. Judge
//! scores are a machine proxy for answer quality, not a human grade.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cot_prompting::{assemble_cot_prompt, CotError, ValidCotConfig};
use crate::ingest::Lang;
use crate::jsonl::{self, JsonlError};
use crate::llm_client::{last_user_content, ChatClient, ChatMessage, ChatParams, ClientError};
use crate::qagen::{translate, QaError};

pub const DEFAULT_RUBRIC: &str = "You grade answers to nuclear-fusion science questions for accuracy, completeness, clarity and structure. 5 means accurate, complete and well organised; 3 means mostly correct with gaps; 0 means wrong or off-topic.";

pub const CONSISTENCY_RUBRIC: &str = "You compare a Chinese and an English answer to the same nuclear-fusion question. Rate how well they agree in meaning, facts and conclusions. 5 means fully consistent; 0 means contradictory.";

const SCORE_INSTRUCTION: &str = "Reply with a first line of the form `Score: <0-5>` followed by a short rationale.";

pub const JUDGMENTS_FILE: &str = "judgments.jsonl";
pub const REPORT_MD: &str = "report.md";
pub const REPORT_JSON: &str = "report.json";

#[derive(Debug, Error)]
pub enum AssessmentError {
    #[error("line {line}: unknown topic `{topic}`")]
    UnknownTopic { line: usize, topic: String },
    #[error("duplicate item id `{0}`")]
    DuplicateId(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("judge reply has no `Score: <n>` line: {0}")]
    UnparsableJudgment(String),
    #[error("judge score {0} is outside 0..=5")]
    ScoreOutOfRange(i64),
    #[error("transcript for item `{0}` did not complete")]
    NotCompleted(String),
    #[error("inputs mix runs `{0}` and `{1}`")]
    MixedRuns(String, String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Cot(#[from] CotError),
    #[error(transparent)]
    Translation(#[from] QaError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl From<JsonlError> for AssessmentError {
    fn from(e: JsonlError) -> Self {
        match e {
            JsonlError::Io { path, source } => AssessmentError::Io { path, source },
            schema => AssessmentError::SchemaViolation(schema.to_string()),
        }
    }
}

/// The ten questionnaire topics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Topic {
    #[serde(rename = "RMP and heat flux")]
    RmpHeatFlux,
    #[serde(rename = "MHD theoretical foundations and phenomena")]
    MhdFoundations,
    #[serde(rename = "tokamak fuelling")]
    TokamakFuelling,
    #[serde(rename = "tokamak high-density operation")]
    HighDensityOperation,
    #[serde(rename = "tokamak vacuum system")]
    VacuumSystem,
    #[serde(rename = "plasma discharge simulation methods")]
    DischargeSimulation,
    #[serde(rename = "wave heating")]
    WaveHeating,
    #[serde(rename = "impurity research")]
    ImpurityResearch,
    #[serde(rename = "plasma boundary")]
    PlasmaBoundary,
    #[serde(rename = "other generalized questions")]
    OtherGeneral,
}

impl Topic {
    pub const ALL: [Topic; 10] = [
        Topic::RmpHeatFlux,
        Topic::MhdFoundations,
        Topic::TokamakFuelling,
        Topic::HighDensityOperation,
        Topic::VacuumSystem,
        Topic::DischargeSimulation,
        Topic::WaveHeating,
        Topic::ImpurityResearch,
        Topic::PlasmaBoundary,
        Topic::OtherGeneral,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Topic::RmpHeatFlux => "RMP and heat flux",
            Topic::MhdFoundations => "MHD theoretical foundations and phenomena",
            Topic::TokamakFuelling => "tokamak fuelling",
            Topic::HighDensityOperation => "tokamak high-density operation",
            Topic::VacuumSystem => "tokamak vacuum system",
            Topic::DischargeSimulation => "plasma discharge simulation methods",
            Topic::WaveHeating => "wave heating",
            Topic::ImpurityResearch => "impurity research",
            Topic::PlasmaBoundary => "plasma boundary",
            Topic::OtherGeneral => "other generalized questions",
        }
    }

    /// Accepts the label in any case, or its snake_case form.
    pub fn parse(s: &str) -> Option<Topic> {
        let wanted = s.trim().to_lowercase().replace(['_', '-'], " ");
        Topic::ALL
            .into_iter()
            .find(|t| t.label().to_lowercase().replace('-', " ") == wanted)
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssessmentItem {
    pub id: String,
    pub topic: Topic,
    pub question: String,
    pub lang: Lang,
    /// The question in the other language, when the questionnaire pairs them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub placeholder: bool,
}

#[derive(Deserialize)]
struct RawItem {
    id: String,
    topic: String,
    question: String,
    lang: Lang,
    #[serde(default)]
    translation: Option<String>,
    #[serde(default)]
    placeholder: bool,
}

/// Reads a JSON Lines questionnaire, preserving file order.
pub fn load_questionnaire(path: &Path) -> Result<Vec<AssessmentItem>, AssessmentError> {
    let text = fs::read_to_string(path).map_err(|source| AssessmentError::Io { path: path.to_path_buf(), source })?;
    let mut items = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let raw: RawItem = serde_json::from_str(line)
            .map_err(|e| AssessmentError::SchemaViolation(format!("line {line_no}: {e}")))?;
        let topic = Topic::parse(&raw.topic).ok_or(AssessmentError::UnknownTopic { line: line_no, topic: raw.topic })?;
        if raw.id.trim().is_empty() || raw.question.trim().is_empty() {
            return Err(AssessmentError::SchemaViolation(format!("line {line_no}: empty id or question")));
        }
        if raw.lang == Lang::Other {
            return Err(AssessmentError::SchemaViolation(format!("line {line_no}: lang must be zh or en")));
        }
        if !ids.insert(raw.id.clone()) {
            return Err(AssessmentError::DuplicateId(raw.id));
        }
        items.push(AssessmentItem {
            id: raw.id,
            topic,
            question: raw.question,
            lang: raw.lang,
            translation: raw.translation,
            placeholder: raw.placeholder,
        });
    }
    Ok(items)
}

/// A named chat backend under test.
#[derive(Debug, Clone)]
pub struct Backend {
    pub id: String,
    pub client: ChatClient,
    pub params: ChatParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TranscriptStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub run_id: String,
    pub item_id: String,
    pub backend_id: String,
    pub cot_enabled: bool,
    pub messages: Vec<ChatMessage>,
    pub answer: String,
    pub status: TranscriptStatus,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgedResult {
    pub run_id: String,
    pub item_id: String,
    pub backend_id: String,
    pub cot_enabled: bool,
    pub score: u8,
    pub rationale: String,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub run_id: String,
    pub cot_enabled: bool,
    /// Directory holding transcripts; completed items found there are reused.
    pub resume_dir: Option<PathBuf>,
    pub concurrency: usize,
}

/// File holding the transcripts of one backend/CoT combination.
pub fn transcript_file_name(backend_id: &str, cot_enabled: bool) -> String {
    let safe: String = backend_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect();
    format!("transcripts.{safe}.{}.jsonl", if cot_enabled { "cot" } else { "plain" })
}

/// Reads a transcript log, ignoring a torn final line left by a crash.
fn read_transcript_log(path: &Path) -> Result<Vec<Transcript>, AssessmentError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => return Err(AssessmentError::Io { path: path.to_path_buf(), source }),
    };
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str(line) {
            Ok(t) => out.push(t),
            Err(_) if i + 1 == lines.len() => tracing::warn!(path = %path.display(), "dropping torn final transcript line"),
            Err(e) => return Err(AssessmentError::SchemaViolation(format!("{}:{}: {e}", path.display(), i + 1))),
        }
    }
    Ok(out)
}

struct TranscriptLog {
    path: PathBuf,
    file: fs::File,
}

impl TranscriptLog {
    fn open(path: PathBuf) -> Result<Self, AssessmentError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|source| AssessmentError::Io { path: parent.to_path_buf(), source })?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| AssessmentError::Io { path: path.clone(), source })?;
        Ok(Self { path, file })
    }

    fn append(&mut self, t: &Transcript) -> Result<(), AssessmentError> {
        let mut line = serde_json::to_vec(t).expect("serializable transcript");
        line.push(b'\n');
        self.file
            .write_all(&line)
            .and_then(|_| self.file.sync_data())
            .map_err(|source| AssessmentError::Io { path: self.path.clone(), source })
    }
}

async fn answer_item(item: &AssessmentItem, backend: &Backend, cot: &ValidCotConfig, opts: &RunOptions) -> Transcript {
    let started = Instant::now();
    let mut transcript = Transcript {
        run_id: opts.run_id.clone(),
        item_id: item.id.clone(),
        backend_id: backend.id.clone(),
        cot_enabled: opts.cot_enabled,
        messages: Vec::new(),
        answer: String::new(),
        status: TranscriptStatus::Failed,
        latency_ms: 0,
        error: None,
    };
    let result = match assemble_cot_prompt(&item.question, item.lang, cot, opts.cot_enabled) {
        Ok(messages) => {
            transcript.messages = messages;
            backend.client.chat(&transcript.messages, &backend.params).await.map_err(|e| e.to_string())
        }
        Err(e) => Err(e.to_string()),
    };
    match result {
        Ok(c) if !c.text.trim().is_empty() => {
            transcript.answer = c.text;
            transcript.status = TranscriptStatus::Ok;
        }
        Ok(_) => transcript.error = Some("empty answer".into()),
        Err(e) => transcript.error = Some(e),
    }
    transcript.latency_ms = started.elapsed().as_millis() as u64;
    transcript
}

/// Answers every item once, in order, with at most `concurrency` requests
/// in flight.
///
/// A failing item yields a `failed` transcript and does not stop the run;
/// failed items get one more attempt after the pass. With `resume_dir`, each
/// transcript is appended to the run log as it completes, items that already
/// hold an `ok` transcript there are not asked again, and the log is finally
/// rewritten to exactly one transcript per item.
pub async fn run_assessment(
    items: &[AssessmentItem],
    backend: &Backend,
    cot: &ValidCotConfig,
    opts: &RunOptions,
) -> Result<Vec<Transcript>, AssessmentError> {
    let log_path = opts
        .resume_dir
        .as_ref()
        .map(|dir| dir.join(transcript_file_name(&backend.id, opts.cot_enabled)));
    let mut done: HashMap<String, Transcript> = HashMap::new();
    if let Some(path) = &log_path {
        for t in read_transcript_log(path)? {
            if t.status == TranscriptStatus::Ok && t.backend_id == backend.id && t.cot_enabled == opts.cot_enabled {
                done.insert(t.item_id.clone(), t);
            }
        }
    }
    let mut log = log_path.clone().map(TranscriptLog::open).transpose()?;

    let mut slots: Vec<Option<Transcript>> = items.iter().map(|i| done.remove(&i.id)).collect();
    let pending: Vec<usize> = (0..items.len()).filter(|&i| slots[i].is_none()).collect();

    let mut results = stream::iter(pending.iter().copied())
        .map(|i| async move { (i, answer_item(&items[i], backend, cot, opts).await) })
        .buffered(opts.concurrency.max(1));
    while let Some((i, t)) = results.next().await {
        if let Some(log) = log.as_mut() {
            log.append(&t)?;
        }
        slots[i] = Some(t);
    }
    drop(results);

    let failed: Vec<usize> =
        (0..items.len()).filter(|&i| slots[i].as_ref().is_some_and(|t| t.status == TranscriptStatus::Failed)).collect();
    for i in failed {
        let retry = answer_item(&items[i], backend, cot, opts).await;
        if let Some(log) = log.as_mut() {
            log.append(&retry)?;
        }
        slots[i] = Some(retry);
    }

    let transcripts: Vec<Transcript> = slots.into_iter().map(|t| t.expect("every item answered")).collect();
    if let Some(path) = &log_path {
        jsonl::write_jsonl(path, &transcripts)?;
    }
    Ok(transcripts)
}

/// Extracts the score from the first `Score: <n>` line; the remaining
/// lines form the rationale.
pub fn parse_judgment(text: &str) -> Result<(u8, String), AssessmentError> {
    let mut score = None;
    let mut rest = Vec::new();
    for line in text.lines() {
        if score.is_none() {
            let trimmed = line.trim().trim_start_matches(['*', '#', ' ']);
            let value = trimmed
                .strip_prefix("Score")
                .or_else(|| trimmed.strip_prefix("score"))
                .map(str::trim_start)
                .and_then(|s| s.strip_prefix(':').or_else(|| s.strip_prefix('：')));
            if let Some(value) = value {
                let value = value.trim().trim_start_matches('*').trim();
                let digits: String = value
                    .char_indices()
                    .take_while(|&(i, c)| c.is_ascii_digit() || (i == 0 && (c == '-' || c == '+')))
                    .map(|(_, c)| c)
                    .collect();
                if let Ok(n) = digits.parse::<i64>() {
                    score = Some(n);
                    continue;
                }
            }
        }
        rest.push(line);
    }
    let score = score.ok_or_else(|| AssessmentError::UnparsableJudgment(text.chars().take(80).collect()))?;
    if !(0..=5).contains(&score) {
        return Err(AssessmentError::ScoreOutOfRange(score));
    }
    Ok((score as u8, rest.join("\n").trim().to_string()))
}

pub async fn judge_transcript(t: &Transcript, rubric: &str, judge: &Backend) -> Result<JudgedResult, AssessmentError> {
    if t.status != TranscriptStatus::Ok {
        return Err(AssessmentError::NotCompleted(t.item_id.clone()));
    }
    let question = last_user_content(&t.messages).unwrap_or_default();
    let messages = [
        ChatMessage::system(format!("{rubric}\n\n{SCORE_INSTRUCTION}")),
        ChatMessage::user(format!("Question:\n{question}\n\nAnswer:\n{}", t.answer)),
    ];
    let completion = judge.client.chat(&messages, &judge.params).await?;
    let (score, rationale) = parse_judgment(&completion.text)?;
    Ok(JudgedResult {
        run_id: t.run_id.clone(),
        item_id: t.item_id.clone(),
        backend_id: t.backend_id.clone(),
        cot_enabled: t.cot_enabled,
        score,
        rationale,
    })
}

/// Judges every `ok` transcript, in order; one outcome per judged transcript.
pub async fn judge_each(
    transcripts: &[Transcript],
    rubric: &str,
    judge: &Backend,
    concurrency: usize,
) -> Vec<Result<JudgedResult, AssessmentError>> {
    stream::iter(transcripts.iter().filter(|t| t.status == TranscriptStatus::Ok))
        .map(|t| judge_transcript(t, rubric, judge))
        .buffered(concurrency.max(1))
        .collect()
        .await
}

/// Like [`judge_each`] but fails on the first error.
pub async fn judge_all(
    transcripts: &[Transcript],
    rubric: &str,
    judge: &Backend,
    concurrency: usize,
) -> Result<Vec<JudgedResult>, AssessmentError> {
    judge_each(transcripts, rubric, judge, concurrency).await.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BilingualAnswers {
    pub zh: String,
    pub en: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyResult {
    pub item_id: String,
    pub score: u8,
    pub rationale: String,
    pub questions: BilingualAnswers,
    pub answers: BilingualAnswers,
}

/// Asks the item in Chinese and English and has the judge rate whether the
/// two answers agree. The missing rendering comes from `translation` or, when
/// absent, from a translation call to the backend. Any failed call fails the
/// whole check.
pub async fn consistency_check(
    item: &AssessmentItem,
    backend: &Backend,
    cot: &ValidCotConfig,
    judge: &Backend,
) -> Result<ConsistencyResult, AssessmentError> {
    let other = if item.lang == Lang::Zh { Lang::En } else { Lang::Zh };
    let translated = match &item.translation {
        Some(t) if !t.trim().is_empty() => t.clone(),
        _ => translate(&item.question, other, &backend.client, &backend.params).await?,
    };
    let (zh_q, en_q) = if item.lang == Lang::Zh {
        (item.question.clone(), translated)
    } else {
        (translated, item.question.clone())
    };
    let mut answers = Vec::with_capacity(2);
    for (q, lang) in [(&zh_q, Lang::Zh), (&en_q, Lang::En)] {
        let messages = assemble_cot_prompt(q, lang, cot, true)?;
        answers.push(backend.client.chat(&messages, &backend.params).await?.text);
    }
    let en_a = answers.pop().expect("two answers");
    let zh_a = answers.pop().expect("two answers");
    let messages = [
        ChatMessage::system(format!("{CONSISTENCY_RUBRIC}\n\n{SCORE_INSTRUCTION}")),
        ChatMessage::user(format!("Chinese answer:\n{zh_a}\n\nEnglish answer:\n{en_a}")),
    ];
    let verdict = judge.client.chat(&messages, &judge.params).await?;
    let (score, rationale) = parse_judgment(&verdict.text)?;
    Ok(ConsistencyResult {
        item_id: item.id.clone(),
        score,
        rationale,
        questions: BilingualAnswers { zh: zh_q, en: en_q },
        answers: BilingualAnswers { zh: zh_a, en: en_a },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Backend,
    Cot,
    Topic,
}

#[derive(Debug, Clone)]
pub struct ReportOptions {
    pub group_by: Vec<GroupBy>,
    /// Items whose answers are shown side by side across backend/CoT runs.
    pub excerpt_items: Vec<String>,
    pub excerpt_chars: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { group_by: vec![GroupBy::Backend, GroupBy::Cot], excerpt_items: Vec::new(), excerpt_chars: 400 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub key: BTreeMap<String, String>,
    pub transcripts: usize,
    pub ok: usize,
    pub failed: usize,
    pub judged: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcerptAnswer {
    pub backend_id: String,
    pub cot_enabled: bool,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Excerpt {
    pub item_id: String,
    pub question: String,
    pub answers: Vec<ExcerptAnswer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub run_id: String,
    pub transcript_total: usize,
    pub failed_total: usize,
    pub topic_counts: BTreeMap<String, usize>,
    pub group_by: Vec<GroupBy>,
    pub groups: Vec<GroupRow>,
    pub scores_included: bool,
    pub excerpts: Vec<Excerpt>,
    pub note: String,
}

fn shared_run_id<'a>(ids: impl Iterator<Item = &'a str>) -> Result<String, AssessmentError> {
    let mut run: Option<&str> = None;
    for id in ids {
        match run {
            None => run = Some(id),
            Some(r) if r != id => return Err(AssessmentError::MixedRuns(r.to_string(), id.to_string())),
            Some(_) => {}
        }
    }
    Ok(run.unwrap_or_default().to_string())
}

fn median(sorted: &[u8]) -> Option<f64> {
    let n = sorted.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(f64::from(sorted[n / 2])),
        _ => Some((f64::from(sorted[n / 2 - 1]) + f64::from(sorted[n / 2])) / 2.0),
    }
}

/// Summarizes transcripts (and judgments, when given) by the requested
/// dimensions. Every grouping partitions the transcripts, so group counts
/// always sum to `transcript_total`; `topic_counts` partitions them by topic.
pub fn build_report(
    items: &[AssessmentItem],
    transcripts: &[Transcript],
    judged: &[JudgedResult],
    opts: &ReportOptions,
) -> Result<Report, AssessmentError> {
    let run_id = shared_run_id(
        transcripts.iter().map(|t| t.run_id.as_str()).chain(judged.iter().map(|j| j.run_id.as_str())),
    )?;
    let topics: HashMap<&str, Topic> = items.iter().map(|i| (i.id.as_str(), i.topic)).collect();
    let topic_of = |item_id: &str| topics.get(item_id).map_or("unknown", |t| t.label());
    let scores: HashMap<(&str, bool, &str), u8> = judged
        .iter()
        .map(|j| ((j.backend_id.as_str(), j.cot_enabled, j.item_id.as_str()), j.score))
        .collect();

    let mut topic_counts: BTreeMap<String, usize> = BTreeMap::new();
    for t in transcripts {
        *topic_counts.entry(topic_of(&t.item_id).to_string()).or_default() += 1;
    }

    let mut group_by = opts.group_by.clone();
    group_by.sort();
    group_by.dedup();
    let mut groups: BTreeMap<Vec<(String, String)>, (GroupRow, Vec<u8>)> = BTreeMap::new();
    for t in transcripts {
        let key: Vec<(String, String)> = group_by
            .iter()
            .map(|g| match g {
                GroupBy::Backend => ("backend".to_string(), t.backend_id.clone()),
                GroupBy::Cot => ("cot".to_string(), if t.cot_enabled { "on" } else { "off" }.to_string()),
                GroupBy::Topic => ("topic".to_string(), topic_of(&t.item_id).to_string()),
            })
            .collect();
        let (row, group_scores) = groups.entry(key.clone()).or_insert_with(|| {
            (
                GroupRow {
                    key: key.into_iter().collect(),
                    transcripts: 0,
                    ok: 0,
                    failed: 0,
                    judged: 0,
                    mean_score: None,
                    median_score: None,
                },
                Vec::new(),
            )
        });
        row.transcripts += 1;
        match t.status {
            TranscriptStatus::Ok => row.ok += 1,
            TranscriptStatus::Failed => row.failed += 1,
        }
        if let Some(&s) = scores.get(&(t.backend_id.as_str(), t.cot_enabled, t.item_id.as_str())) {
            group_scores.push(s);
        }
    }
    let scores_included = !judged.is_empty();
    let groups = groups
        .into_values()
        .map(|(mut row, mut s)| {
            row.judged = s.len();
            if scores_included && !s.is_empty() {
                s.sort_unstable();
                row.mean_score = Some(s.iter().map(|&v| f64::from(v)).sum::<f64>() / s.len() as f64);
                row.median_score = median(&s);
            }
            row
        })
        .collect();

    let questions: HashMap<&str, &str> = items.iter().map(|i| (i.id.as_str(), i.question.as_str())).collect();
    let excerpts = opts
        .excerpt_items
        .iter()
        .filter_map(|id| {
            let question = questions.get(id.as_str())?;
            let mut answers: Vec<ExcerptAnswer> = transcripts
                .iter()
                .filter(|t| &t.item_id == id)
                .map(|t| ExcerptAnswer {
                    backend_id: t.backend_id.clone(),
                    cot_enabled: t.cot_enabled,
                    answer: t.answer.chars().take(opts.excerpt_chars).collect(),
                })
                .collect();
            answers.sort_by(|a, b| (&a.backend_id, a.cot_enabled).cmp(&(&b.backend_id, b.cot_enabled)));
            Some(Excerpt { item_id: id.clone(), question: question.to_string(), answers })
        })
        .collect();

    Ok(Report {
        run_id,
        transcript_total: transcripts.len(),
        failed_total: transcripts.iter().filter(|t| t.status == TranscriptStatus::Failed).count(),
        topic_counts,
        group_by,
        groups,
        scores_included,
        excerpts,
        note: "Scores come from an LLM judge on a 0-5 rubric and are a machine proxy, not a human grade.".into(),
    })
}

impl Report {
    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        md.push_str(&format!("# Assessment report: {}\n\n", self.run_id));
        md.push_str(&format!(
            "{} transcripts, {} failed.\n\n",
            self.transcript_total, self.failed_total
        ));

        md.push_str("## Transcripts per topic\n\n| Topic | Transcripts |\n|---|---:|\n");
        let known = Topic::ALL.iter().map(|t| t.label());
        let unknown = self.topic_counts.keys().map(String::as_str).filter(|k| Topic::parse(k).is_none());
        for topic in known.chain(unknown) {
            if let Some(n) = self.topic_counts.get(topic) {
                md.push_str(&format!("| {topic} | {n} |\n"));
            }
        }

        md.push_str("\n## Comparison\n\n");
        let dims: Vec<&str> = self
            .group_by
            .iter()
            .map(|g| match g {
                GroupBy::Backend => "backend",
                GroupBy::Cot => "cot",
                GroupBy::Topic => "topic",
            })
            .collect();
        let mut header: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
        header.extend(["transcripts", "ok", "failed"].map(String::from));
        if self.scores_included {
            header.extend(["judged", "mean score", "median score"].map(String::from));
        }
        md.push_str(&format!("| {} |\n", header.join(" | ")));
        md.push_str(&format!("|{}\n", "---|".repeat(header.len())));
        for row in &self.groups {
            let mut cells: Vec<String> = dims.iter().map(|d| row.key.get(*d).cloned().unwrap_or_default()).collect();
            cells.extend([row.transcripts, row.ok, row.failed].map(|n| n.to_string()));
            if self.scores_included {
                cells.push(row.judged.to_string());
                cells.push(row.mean_score.map_or("-".into(), |v| format!("{v:.2}")));
                cells.push(row.median_score.map_or("-".into(), |v| format!("{v:.1}")));
            }
            md.push_str(&format!("| {} |\n", cells.join(" | ")));
        }
        if self.scores_included {
            md.push_str(&format!("\n_{}_\n", self.note));
        }

        if !self.excerpts.is_empty() {
            md.push_str("\n## Answer excerpts\n");
            for e in &self.excerpts {
                md.push_str(&format!("\n### {}: {}\n", e.item_id, e.question));
                for a in &e.answers {
                    let flag = if a.cot_enabled { "CoT" } else { "no CoT" };
                    let quoted = a.answer.lines().map(|l| format!("> {l}")).collect::<Vec<_>>().join("\n");
                    md.push_str(&format!("\n**{} ({flag})**\n\n{quoted}\n", a.backend_id));
                }
            }
        }
        md
    }
}

/// Loads every transcript log in a run directory, sorted by file name.
pub fn load_run_transcripts(run_dir: &Path) -> Result<Vec<Transcript>, AssessmentError> {
    let entries = fs::read_dir(run_dir).map_err(|source| AssessmentError::Io { path: run_dir.to_path_buf(), source })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("transcripts.") && n.ends_with(".jsonl"))
        })
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(read_transcript_log(&f)?);
    }
    Ok(out)
}

pub fn load_judgments(run_dir: &Path) -> Result<Vec<JudgedResult>, AssessmentError> {
    let path = run_dir.join(JUDGMENTS_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(jsonl::read_jsonl(&path)?)
}

pub fn write_report(report: &Report, dir: &Path) -> Result<(), AssessmentError> {
    jsonl::write_atomic(&dir.join(REPORT_MD), report.to_markdown().as_bytes())?;
    jsonl::write_json(&dir.join(REPORT_JSON), report)?;
    Ok(())
}
