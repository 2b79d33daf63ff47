//! Chain-of-thought prompt assembly: a five-aspect answer scaffold in the
//! system message followed by eight worked question-answer exemplars.

use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::Lang;
use crate::llm_client::ChatMessage;

pub const ASPECT_COUNT: usize = 5;
pub const EXEMPLAR_COUNT: usize = 8;
/// One system message, eight exemplar pairs, one question.
pub const COT_MESSAGE_COUNT: usize = 1 + 2 * EXEMPLAR_COUNT + 1;

const ASPECTS_SLOT: &str = "{aspects}";
const DEFAULT_CONFIG_JSON: &str = include_str!("../assets/cot_default.json");

#[derive(Debug, Error)]
pub enum CotError {
    #[error("expected {ASPECT_COUNT} aspects, found {0}")]
    WrongAspectCount(usize),
    #[error("expected {EXEMPLAR_COUNT} exemplars, found {0}")]
    WrongExemplarCount(usize),
    #[error("empty field: {0}")]
    EmptyField(String),
    #[error("scaffold template `{0}` lacks the {{aspects}} slot")]
    MissingSlot(&'static str),
    #[error("question is empty")]
    EmptyQuestion,
    #[error("cannot read CoT config {path}: {reason}")]
    Load { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub q: String,
    pub a: String,
    /// Marks stand-in content meant to be replaced by curated examples.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub placeholder: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scaffold {
    pub zh: String,
    pub en: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotConfig {
    pub aspects: Vec<String>,
    /// Optional Chinese renderings, shown alongside the originals in zh prompts.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aspects_zh: Vec<String>,
    pub exemplars: Vec<Exemplar>,
    pub scaffold: Scaffold,
    /// Render exemplars into the system message instead of separate turns.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub inline: bool,
}

/// A [`CotConfig`] that passed [`validate_cot_config`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct ValidCotConfig(CotConfig);

impl Deref for ValidCotConfig {
    type Target = CotConfig;

    fn deref(&self) -> &CotConfig {
        &self.0
    }
}

impl ValidCotConfig {
    pub fn into_inner(self) -> CotConfig {
        self.0
    }
}

fn non_empty(value: &str, what: impl FnOnce() -> String) -> Result<(), CotError> {
    if value.trim().is_empty() {
        Err(CotError::EmptyField(what()))
    } else {
        Ok(())
    }
}

pub fn validate_cot_config(cfg: CotConfig) -> Result<ValidCotConfig, CotError> {
    if cfg.aspects.len() != ASPECT_COUNT {
        return Err(CotError::WrongAspectCount(cfg.aspects.len()));
    }
    if !cfg.aspects_zh.is_empty() && cfg.aspects_zh.len() != ASPECT_COUNT {
        return Err(CotError::WrongAspectCount(cfg.aspects_zh.len()));
    }
    if cfg.exemplars.len() != EXEMPLAR_COUNT {
        return Err(CotError::WrongExemplarCount(cfg.exemplars.len()));
    }
    for (i, a) in cfg.aspects.iter().chain(&cfg.aspects_zh).enumerate() {
        non_empty(a, || format!("aspects[{i}]"))?;
    }
    for (i, e) in cfg.exemplars.iter().enumerate() {
        non_empty(&e.q, || format!("exemplars[{i}].q"))?;
        non_empty(&e.a, || format!("exemplars[{i}].a"))?;
    }
    for (name, template) in [("zh", &cfg.scaffold.zh), ("en", &cfg.scaffold.en)] {
        non_empty(template, || format!("scaffold.{name}"))?;
        if !template.contains(ASPECTS_SLOT) {
            return Err(CotError::MissingSlot(name));
        }
    }
    Ok(ValidCotConfig(cfg))
}

/// The shipped configuration. Its exemplars are flagged as placeholders.
pub fn default_cot_config() -> ValidCotConfig {
    let cfg: CotConfig = serde_json::from_str(DEFAULT_CONFIG_JSON).expect("bundled CoT config parses");
    validate_cot_config(cfg).expect("bundled CoT config is valid")
}

pub fn default_cot_config_json() -> &'static str {
    DEFAULT_CONFIG_JSON
}

pub fn load_cot_config(path: &Path) -> Result<ValidCotConfig, CotError> {
    let load_err = |reason: String| CotError::Load { path: path.display().to_string(), reason };
    let text = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
    let cfg: CotConfig = serde_json::from_str(&text).map_err(|e| load_err(e.to_string()))?;
    validate_cot_config(cfg)
}

fn render_aspects(cfg: &CotConfig, lang: Lang) -> String {
    cfg.aspects
        .iter()
        .enumerate()
        .map(|(i, aspect)| match (lang, cfg.aspects_zh.get(i)) {
            (Lang::Zh, Some(zh)) => format!("{}. {zh}（{aspect}）", i + 1),
            _ => format!("{}. {aspect}", i + 1),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// System message for `lang`; anything other than zh uses the English scaffold.
pub fn render_system_prompt(cfg: &ValidCotConfig, lang: Lang) -> String {
    let template = if lang == Lang::Zh { &cfg.scaffold.zh } else { &cfg.scaffold.en };
    let mut system = template.replace(ASPECTS_SLOT, &render_aspects(cfg, lang));
    if cfg.inline {
        for (i, e) in cfg.exemplars.iter().enumerate() {
            system.push_str(&format!("\n\nExample {}\nQuestion: {}\nAnswer: {}", i + 1, e.q, e.a));
        }
    }
    system
}

/// Builds the message sequence sent upstream for `question`.
///
/// Enabled: system scaffold, the exemplars as alternating user/assistant
/// turns in config order, then the question ([`COT_MESSAGE_COUNT`] messages).
/// Disabled: the question alone. The question text is never altered.
pub fn assemble_cot_prompt(
    question: &str,
    lang: Lang,
    cfg: &ValidCotConfig,
    enabled: bool,
) -> Result<Vec<ChatMessage>, CotError> {
    if question.trim().is_empty() {
        return Err(CotError::EmptyQuestion);
    }
    if !enabled {
        return Ok(vec![ChatMessage::user(question)]);
    }
    let mut messages = Vec::with_capacity(COT_MESSAGE_COUNT);
    messages.push(ChatMessage::system(render_system_prompt(cfg, lang)));
    if !cfg.inline {
        for e in &cfg.exemplars {
            messages.push(ChatMessage::user(e.q.clone()));
            messages.push(ChatMessage::assistant(e.a.clone()));
        }
    }
    messages.push(ChatMessage::user(question));
    Ok(messages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_client::{validate_messages, Role};

    #[test]
    fn default_config_is_valid() {
        let cfg = default_cot_config();
        assert_eq!(cfg.aspects.len(), 5);
        assert_eq!(cfg.exemplars.len(), 8);
        assert_eq!(cfg.aspects[4], "Summary and interactive guidance");
        assert!(cfg.exemplars.iter().all(|e| e.placeholder));
    }

    #[test]
    fn seven_exemplars_rejected() {
        let mut cfg = default_cot_config().into_inner();
        cfg.exemplars.pop();
        assert!(matches!(validate_cot_config(cfg), Err(CotError::WrongExemplarCount(7))));
    }

    #[test]
    fn empty_aspect_rejected() {
        let mut cfg = default_cot_config().into_inner();
        cfg.aspects[2] = " ".into();
        assert!(matches!(validate_cot_config(cfg), Err(CotError::EmptyField(_))));
        let mut cfg = default_cot_config().into_inner();
        cfg.aspects.push("extra".into());
        assert!(matches!(validate_cot_config(cfg), Err(CotError::WrongAspectCount(6))));
    }

    #[test]
    fn template_needs_slot() {
        let mut cfg = default_cot_config().into_inner();
        cfg.scaffold.en = "Answer well.".into();
        assert!(matches!(validate_cot_config(cfg), Err(CotError::MissingSlot("en"))));
    }

    #[test]
    fn enabled_prompt_structure() {
        let cfg = default_cot_config();
        for lang in [Lang::En, Lang::Zh] {
            let m = assemble_cot_prompt("What is a tokamak?", lang, &cfg, true).unwrap();
            assert_eq!(m.len(), 18);
            assert_eq!(m[0].role, Role::System);
            for aspect in &cfg.aspects {
                assert!(m[0].content.contains(aspect.as_str()));
            }
            for (i, e) in cfg.exemplars.iter().enumerate() {
                assert_eq!(m[1 + 2 * i].content, e.q);
                assert_eq!(m[2 + 2 * i].content, e.a);
            }
            assert_eq!(m[17], ChatMessage::user("What is a tokamak?"));
            validate_messages(&m).unwrap();
        }
        let zh = assemble_cot_prompt("什么是托卡马克？", Lang::Zh, &cfg, true).unwrap();
        assert!(zh[0].content.contains("问题的背景介绍"));
    }

    #[test]
    fn disabled_prompt_is_the_question() {
        let cfg = default_cot_config();
        let q = "  What are the conditions for fusion ignition?\n";
        assert_eq!(assemble_cot_prompt(q, Lang::En, &cfg, false).unwrap(), vec![ChatMessage::user(q)]);
        assert!(matches!(assemble_cot_prompt("", Lang::En, &cfg, true), Err(CotError::EmptyQuestion)));
    }

    #[test]
    fn inline_mode_folds_exemplars() {
        let mut cfg = default_cot_config().into_inner();
        cfg.inline = true;
        let cfg = validate_cot_config(cfg).unwrap();
        let m = assemble_cot_prompt("q?", Lang::En, &cfg, true).unwrap();
        assert_eq!(m.len(), 2);
        assert!(m[0].content.contains("Example 8"));
    }

    #[test]
    fn assembly_is_pure() {
        let cfg = default_cot_config();
        let a = assemble_cot_prompt("What is H-mode?", Lang::En, &cfg, true).unwrap();
        let b = assemble_cot_prompt("What is H-mode?", Lang::En, &cfg, true).unwrap();
        assert_eq!(a, b);
    }
}
