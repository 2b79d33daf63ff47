//! Scripted offline backend.
//!
//! A script is a JSON array of entries tried in order. Each call uses the first
//! live entry whose optional `match` substring occurs in any message; entries
//! are consumed on use unless `repeat` is set. An entry does exactly one of:
//!
//! ```json
//! {"respond": "Answer to: {last_user}"}
//! {"fail": 503}            // HTTP status
//! {"fail": "timeout"}      // or "connect", "malformed"
//! {"derive": "qa"}         // synthesize Q/A pairs from the last user message
//! ```
//!
//! `{last_user}` in a response is replaced by the last user message. Calls
//! matching no entry fail with HTTP 400.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{last_user_content, ChatMessage, ChatParams, RawCompletion, Transport, TransportError};
use crate::ingest::{detect_language, Lang};
use crate::text::{approx_token_count, is_cjk};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockFailure {
    Status(u16),
    Kind(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MockAction {
    Respond(String),
    Fail(MockFailure),
    Derive(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockEntry {
    #[serde(rename = "match", alias = "match_substring", default, skip_serializing_if = "Option::is_none")]
    pub match_substring: Option<String>,
    #[serde(flatten)]
    pub action: MockAction,
    #[serde(default)]
    pub repeat: bool,
    #[serde(default)]
    pub delay_ms: u64,
}

impl MockEntry {
    pub fn respond(text: impl Into<String>) -> Self {
        Self { match_substring: None, action: MockAction::Respond(text.into()), repeat: false, delay_ms: 0 }
    }

    pub fn fail_status(code: u16) -> Self {
        Self { match_substring: None, action: MockAction::Fail(MockFailure::Status(code)), repeat: false, delay_ms: 0 }
    }

    pub fn derive_qa() -> Self {
        Self { match_substring: None, action: MockAction::Derive("qa".into()), repeat: false, delay_ms: 0 }
    }

    pub fn matching(mut self, needle: impl Into<String>) -> Self {
        self.match_substring = Some(needle.into());
        self
    }

    pub fn repeating(mut self) -> Self {
        self.repeat = true;
        self
    }

    pub fn delayed(mut self, ms: u64) -> Self {
        self.delay_ms = ms;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MockScript {
    pub entries: Vec<MockEntry>,
}

impl MockScript {
    pub fn new(entries: Vec<MockEntry>) -> Self {
        Self { entries }
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        let script: MockScript = serde_json::from_str(json)?;
        Ok(script)
    }

    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

struct Slot {
    entry: MockEntry,
    used: bool,
}

/// Scripted transport with call instrumentation.
pub struct MockTransport {
    slots: Mutex<Vec<Slot>>,
    requests: Mutex<Vec<Vec<ChatMessage>>>,
    calls: AtomicUsize,
    inflight: AtomicUsize,
    max_inflight: AtomicUsize,
    healthy: std::sync::atomic::AtomicBool,
}

impl std::fmt::Debug for MockTransport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockTransport").field("calls", &self.calls()).finish()
    }
}

impl MockTransport {
    pub fn new(script: MockScript) -> Self {
        let slots = script.entries.into_iter().map(|entry| Slot { entry, used: false }).collect();
        Self {
            slots: Mutex::new(slots),
            requests: Mutex::new(Vec::new()),
            calls: AtomicUsize::new(0),
            inflight: AtomicUsize::new(0),
            max_inflight: AtomicUsize::new(0),
            healthy: std::sync::atomic::AtomicBool::new(true),
        }
    }

    /// Number of `send` calls, including failed ones.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Highest number of simultaneously running `send` calls observed.
    pub fn max_inflight(&self) -> usize {
        self.max_inflight.load(Ordering::SeqCst)
    }

    /// Every message sequence received, in arrival order.
    pub fn requests(&self) -> Vec<Vec<ChatMessage>> {
        self.requests.lock().expect("mock lock").clone()
    }

    pub fn set_healthy(&self, healthy: bool) {
        self.healthy.store(healthy, Ordering::SeqCst);
    }

    fn pick(&self, messages: &[ChatMessage]) -> Option<MockEntry> {
        let mut slots = self.slots.lock().expect("mock lock");
        let slot = slots.iter_mut().find(|s| {
            !s.used
                && s.entry
                    .match_substring
                    .as_deref()
                    .is_none_or(|needle| messages.iter().any(|m| m.content.contains(needle)))
        })?;
        if !slot.entry.repeat {
            slot.used = true;
        }
        Some(slot.entry.clone())
    }
}

struct InflightGuard<'a>(&'a AtomicUsize);

impl Drop for InflightGuard<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

#[async_trait]
impl Transport for MockTransport {
    async fn send(&self, messages: &[ChatMessage], _params: &ChatParams) -> Result<RawCompletion, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.inflight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_inflight.fetch_max(now, Ordering::SeqCst);
        let _guard = InflightGuard(&self.inflight);
        self.requests.lock().expect("mock lock").push(messages.to_vec());

        let entry = self.pick(messages).ok_or_else(|| TransportError::Status {
            code: 400,
            body: "mock script has no matching entry".into(),
        })?;
        if entry.delay_ms > 0 {
            tokio::time::sleep(Duration::from_millis(entry.delay_ms)).await;
        }
        let last_user = last_user_content(messages).unwrap_or_default();
        let text = match entry.action {
            MockAction::Respond(template) => template.replace("{last_user}", last_user),
            MockAction::Fail(MockFailure::Status(code)) => {
                return Err(TransportError::Status { code, body: "scripted failure".into() })
            }
            MockAction::Fail(MockFailure::Kind(kind)) => {
                return Err(match kind.as_str() {
                    "timeout" => TransportError::Timeout,
                    "malformed" => TransportError::Malformed("scripted malformed response".into()),
                    _ => TransportError::Connect(format!("scripted {kind} failure")),
                })
            }
            MockAction::Derive(kind) if kind == "qa" => derive_qa(last_user),
            MockAction::Derive(kind) => {
                return Err(TransportError::Status { code: 400, body: format!("unknown derive mode `{kind}`") })
            }
        };
        Ok(RawCompletion { text, usage: None })
    }

    async fn health(&self) -> bool {
        self.healthy.load(Ordering::SeqCst)
    }
}

/// Deterministic stand-in for QA synthesis: one numbered pair per sentence
/// with at least three counting units, answered by the sentence itself.
pub(crate) fn derive_qa(text: &str) -> String {
    let mut out = String::new();
    let mut n = 0;
    for sentence in split_sentences(text) {
        if approx_token_count(sentence) < 3 {
            continue;
        }
        let Ok(lang) = detect_language(sentence) else { continue };
        let question = match lang {
            Lang::Zh => {
                let head: String = sentence.chars().filter(|c| is_cjk(*c)).take(8).collect();
                format!("关于“{head}”，原文是如何说明的？")
            }
            Lang::En => {
                let head: Vec<&str> = sentence.split_whitespace().take(6).collect();
                format!("What does the source state about \"{}\"?", head.join(" "))
            }
            Lang::Other => continue,
        };
        n += 1;
        out.push_str(&format!("Q{n}: {question}\nA{n}: {sentence}\n\n"));
    }
    if n == 0 {
        out.push_str("The passage does not contain enough material for question-answer pairs.");
    }
    out
}

fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if matches!(c, '.' | '!' | '?' | '。' | '！' | '？') {
            let end = i + c.len_utf8();
            let next_is_break = text[end..].chars().next().is_none_or(|n| n.is_whitespace() || !c.is_ascii());
            if next_is_break {
                let s = text[start..end].trim();
                if !s.is_empty() {
                    out.push(s);
                }
                start = end;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn script_json_shapes() {
        let script = MockScript::from_json(
            r#"[{"respond":"hi"},{"match":"x","fail":503,"repeat":true},{"fail":"timeout"},{"derive":"qa"}]"#,
        )
        .unwrap();
        assert_eq!(script.entries.len(), 4);
        assert_eq!(script.entries[0].action, MockAction::Respond("hi".into()));
        assert_eq!(script.entries[1].match_substring.as_deref(), Some("x"));
        assert!(script.entries[1].repeat);
        assert_eq!(script.entries[2].action, MockAction::Fail(MockFailure::Kind("timeout".into())));
    }

    #[test]
    fn sentences_split_on_terminal_punctuation() {
        let s = split_sentences("EAST is a tokamak. It is in Hefei! 核聚变是能源。等离子体很热");
        assert_eq!(s, vec!["EAST is a tokamak.", "It is in Hefei!", "核聚变是能源。", "等离子体很热"]);
        // decimal points are not sentence ends
        assert_eq!(split_sentences("Te reached 1.5 keV."), vec!["Te reached 1.5 keV."]);
    }

    #[test]
    fn derived_pairs_are_numbered() {
        let out = derive_qa("The tokamak confines plasma magnetically. Ok.");
        assert!(out.starts_with("Q1: What does the source state about \"The tokamak confines plasma magnetically.\"?"));
        assert!(out.contains("A1: The tokamak confines plasma magnetically."));
        assert!(!out.contains("Q2"));
    }

    #[tokio::test]
    async fn entries_are_consumed_in_order() {
        let mock = MockTransport::new(MockScript::new(vec![
            MockEntry::respond("first"),
            MockEntry::respond("echo {last_user}").repeating(),
        ]));
        let p = ChatParams::default();
        let msg = [ChatMessage::user("ping")];
        assert_eq!(mock.send(&msg, &p).await.unwrap().text, "first");
        assert_eq!(mock.send(&msg, &p).await.unwrap().text, "echo ping");
        assert_eq!(mock.send(&msg, &p).await.unwrap().text, "echo ping");
        assert_eq!(mock.calls(), 3);
    }

    #[tokio::test]
    async fn unmatched_call_is_rejected() {
        let mock = MockTransport::new(MockScript::new(vec![MockEntry::respond("x").matching("judge")]));
        let err = mock.send(&[ChatMessage::user("q")], &ChatParams::default()).await.unwrap_err();
        assert!(matches!(err, TransportError::Status { code: 400, .. }));
    }
}
