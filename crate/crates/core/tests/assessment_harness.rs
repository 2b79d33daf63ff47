use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use fusionkit_core::assessment::{
    build_report, consistency_check, judge_transcript, load_questionnaire, load_run_transcripts, run_assessment,
    transcript_file_name, AssessmentError, AssessmentItem, Backend, GroupBy, ReportOptions, RunOptions, Topic,
    TranscriptStatus, DEFAULT_RUBRIC,
};
use fusionkit_core::cot_prompting::{default_cot_config, COT_MESSAGE_COUNT};
use fusionkit_core::llm_client::{ChatClient, ChatParams, ClientConfig, MockEntry, MockScript, MockTransport, RetryPolicy};
use fusionkit_core::Lang;

fn questionnaire() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/questionnaire.jsonl")
}

fn backend(id: &str, entries: Vec<MockEntry>) -> (Arc<MockTransport>, Backend) {
    let mock = Arc::new(MockTransport::new(MockScript::new(entries)));
    let config =
        ClientConfig { retry: RetryPolicy { base_delay_ms: 1, ..RetryPolicy::default() }, ..ClientConfig::default() };
    let b = Backend { id: id.into(), client: ChatClient::new(mock.clone(), config), params: ChatParams::default() };
    (mock, b)
}

fn echo() -> Vec<MockEntry> {
    vec![MockEntry::respond("Answer: {last_user}").repeating()]
}

fn items(n: usize) -> Vec<AssessmentItem> {
    (0..n)
        .map(|i| AssessmentItem {
            id: format!("t{i}"),
            topic: Topic::ALL[i % 10],
            question: format!("Question number {i} about plasma?"),
            lang: Lang::En,
            translation: None,
            placeholder: true,
        })
        .collect()
}

fn opts(cot: bool, resume: Option<PathBuf>) -> RunOptions {
    RunOptions { run_id: "run-1".into(), cot_enabled: cot, resume_dir: resume, concurrency: 4 }
}

#[test]
fn bundled_questionnaire_has_184_items_over_ten_topics() {
    let items = load_questionnaire(&questionnaire()).unwrap();
    assert_eq!(items.len(), 184);
    let mut per_topic: BTreeMap<Topic, usize> = BTreeMap::new();
    for i in &items {
        *per_topic.entry(i.topic).or_default() += 1;
    }
    assert_eq!(per_topic.len(), 10);
    assert_eq!(per_topic.values().sum::<usize>(), 184);
    assert!(items.iter().any(|i| i.question == "What are the conditions for fusion ignition?" && !i.placeholder));
}

#[test]
fn questionnaire_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.jsonl");
    let line = |id: &str, topic: &str| format!(r#"{{"id":"{id}","topic":"{topic}","question":"Why?","lang":"en"}}"#);

    fs::write(&path, format!("{}\n{}\n", line("a", "wave heating"), line("b", "astrophysics"))).unwrap();
    assert!(matches!(load_questionnaire(&path), Err(AssessmentError::UnknownTopic { line: 2, .. })));

    fs::write(&path, format!("{}\n{}\n", line("a", "wave heating"), line("a", "plasma boundary"))).unwrap();
    assert!(matches!(load_questionnaire(&path), Err(AssessmentError::DuplicateId(id)) if id == "a"));

    fs::write(&path, "{\"id\":\"a\",\"topic\":\"wave heating\"}\n").unwrap();
    assert!(matches!(load_questionnaire(&path), Err(AssessmentError::SchemaViolation(_))));
}

#[tokio::test]
async fn one_transcript_per_item_in_order() {
    let cot = default_cot_config();
    let (mock, b) = backend("mock", echo());
    let items = items(3);
    let out = run_assessment(&items, &b, &cot, &opts(true, None)).await.unwrap();
    assert_eq!(out.iter().map(|t| t.item_id.as_str()).collect::<Vec<_>>(), ["t0", "t1", "t2"]);
    assert!(out.iter().all(|t| t.status == TranscriptStatus::Ok && t.messages.len() == COT_MESSAGE_COUNT));
    assert_eq!(out[1].answer, "Answer: Question number 1 about plasma?");
    assert_eq!(mock.calls(), 3);

    let plain = run_assessment(&items, &b, &cot, &opts(false, None)).await.unwrap();
    assert!(plain.iter().all(|t| t.messages.len() == 1));
}

#[tokio::test]
async fn resume_only_asks_unfinished_items() {
    let cot = default_cot_config();
    let dir = tempfile::tempdir().unwrap();
    let items = items(3);
    let (_, b) = backend("mock", echo());
    run_assessment(&items[..2], &b, &cot, &opts(true, Some(dir.path().into()))).await.unwrap();

    let (mock, b) = backend("mock", echo());
    let out = run_assessment(&items, &b, &cot, &opts(true, Some(dir.path().into()))).await.unwrap();
    assert_eq!(mock.calls(), 1);
    assert_eq!(out.len(), 3);
    let log = load_run_transcripts(dir.path()).unwrap();
    assert_eq!(log.len(), 3, "final log holds one transcript per item");
}

#[tokio::test]
async fn torn_final_line_is_ignored_on_resume() {
    let cot = default_cot_config();
    let dir = tempfile::tempdir().unwrap();
    let items = items(3);
    let (_, b) = backend("mock", echo());
    run_assessment(&items[..1], &b, &cot, &opts(false, Some(dir.path().into()))).await.unwrap();
    let log = dir.path().join(transcript_file_name("mock", false));
    let mut text = fs::read_to_string(&log).unwrap();
    text.push_str("{\"run_id\":\"run-1\",\"item_id\":\"t1\",\"backe");
    fs::write(&log, text).unwrap();

    let (mock, b) = backend("mock", echo());
    run_assessment(&items, &b, &cot, &opts(false, Some(dir.path().into()))).await.unwrap();
    assert_eq!(mock.calls(), 2);
}

#[tokio::test]
async fn failing_item_is_isolated_and_retried_once() {
    let cot = default_cot_config();
    let items = items(3);
    let (mock, b) = backend(
        "mock",
        vec![MockEntry::fail_status(400).matching("number 1").repeating(), MockEntry::respond("fine").repeating()],
    );
    let out = run_assessment(&items, &b, &cot, &opts(false, None)).await.unwrap();
    let statuses: Vec<_> = out.iter().map(|t| t.status).collect();
    assert_eq!(statuses, [TranscriptStatus::Ok, TranscriptStatus::Failed, TranscriptStatus::Ok]);
    assert!(out[1].answer.is_empty() && out[1].error.is_some());
    assert_eq!(mock.calls(), 4, "three items plus one end-of-run retry");

    let (_, b) = backend("mock", vec![MockEntry::fail_status(400).matching("number 1"), MockEntry::respond("fine").repeating()]);
    let out = run_assessment(&items, &b, &cot, &opts(false, None)).await.unwrap();
    assert!(out.iter().all(|t| t.status == TranscriptStatus::Ok), "transient failure recovered at end of run");
}

#[tokio::test]
async fn judge_scores_and_errors() {
    let cot = default_cot_config();
    let (_, b) = backend("mock", echo());
    let t = run_assessment(&items(1), &b, &cot, &opts(true, None)).await.unwrap().remove(0);

    let (mock, judge) = backend("judge", vec![MockEntry::respond("Score: 4\nClear and grounded.")]);
    let r = judge_transcript(&t, DEFAULT_RUBRIC, &judge).await.unwrap();
    assert_eq!((r.score, r.rationale.as_str()), (4, "Clear and grounded."));
    let sent = &mock.requests()[0];
    assert!(sent[0].content.contains(DEFAULT_RUBRIC));
    assert!(sent[1].content.contains("Question number 0 about plasma?") && sent[1].content.contains(&t.answer));

    let (_, judge) = backend("judge", vec![MockEntry::respond("Score: 9")]);
    assert!(matches!(judge_transcript(&t, DEFAULT_RUBRIC, &judge).await, Err(AssessmentError::ScoreOutOfRange(9))));
    let (_, judge) = backend("judge", vec![MockEntry::respond("Looks right to me.")]);
    assert!(matches!(
        judge_transcript(&t, DEFAULT_RUBRIC, &judge).await,
        Err(AssessmentError::UnparsableJudgment(_))
    ));
}

#[tokio::test]
async fn consistency_check_pairs_languages() {
    let cot = default_cot_config();
    let item = AssessmentItem {
        id: "c1".into(),
        topic: Topic::OtherGeneral,
        question: "What is the Lawson criterion?".into(),
        lang: Lang::En,
        translation: Some("什么是劳森判据？".into()),
        placeholder: true,
    };
    let (mock, b) = backend("mock", echo());
    let (_, judge) = backend("judge", vec![MockEntry::respond("Score: 2\nThe answers diverge.")]);
    let r = consistency_check(&item, &b, &cot, &judge).await.unwrap();
    assert_eq!(r.score, 2);
    assert_eq!(r.answers.zh, "Answer: 什么是劳森判据？");
    assert_eq!(r.answers.en, "Answer: What is the Lawson criterion?");
    assert_eq!(mock.calls(), 2);

    let (_, b) = backend("mock", vec![MockEntry::fail_status(400).matching("劳森"), MockEntry::respond("x").repeating()]);
    let (judge_mock, judge) = backend("judge", vec![MockEntry::respond("Score: 5")]);
    assert!(consistency_check(&item, &b, &cot, &judge).await.is_err());
    assert_eq!(judge_mock.calls(), 0, "no partial result is judged");

    let untranslated = AssessmentItem { translation: None, ..item };
    let (mock, b) = backend(
        "mock",
        vec![MockEntry::respond("什么是劳森判据？").matching("Translate"), MockEntry::respond("A: {last_user}").repeating()],
    );
    let (_, judge) = backend("judge", vec![MockEntry::respond("Score: 5")]);
    let r = consistency_check(&untranslated, &b, &cot, &judge).await.unwrap();
    assert_eq!((r.score, r.questions.zh.as_str()), (5, "什么是劳森判据？"));
    assert_eq!(mock.calls(), 3);
}

#[tokio::test]
async fn report_groups_partition_transcripts() {
    let cot = default_cot_config();
    let items = items(20);
    let mut all = Vec::new();
    for id in ["alpha", "beta"] {
        for flag in [true, false] {
            let (_, b) = backend(id, echo());
            all.extend(run_assessment(&items, &b, &cot, &opts(flag, None)).await.unwrap());
        }
    }
    let report = build_report(&items, &all, &[], &ReportOptions::default()).unwrap();
    assert_eq!(report.groups.len(), 4);
    assert_eq!(report.groups.iter().map(|g| g.transcripts).sum::<usize>(), 80);
    assert_eq!(report.topic_counts.values().sum::<usize>(), 80);
    assert!(!report.scores_included);
    let md = report.to_markdown();
    assert!(!md.contains("mean score"));

    let (_, judge) = backend("judge", vec![MockEntry::respond("Score: 3\nok").repeating()]);
    let mut judged = Vec::new();
    for t in &all {
        judged.push(judge_transcript(t, DEFAULT_RUBRIC, &judge).await.unwrap());
    }
    let by_topic = ReportOptions { group_by: vec![GroupBy::Topic], excerpt_items: vec!["t3".into()], excerpt_chars: 20 };
    let report = build_report(&items, &all, &judged, &by_topic).unwrap();
    assert_eq!(report.groups.len(), 10);
    assert!(report.groups.iter().all(|g| g.mean_score == Some(3.0) && g.median_score == Some(3.0)));
    assert_eq!(report.excerpts[0].answers.len(), 4);
    assert!(report.to_markdown().contains("machine proxy"));

    let mut mixed = all.clone();
    mixed[5].run_id = "run-2".into();
    assert!(matches!(build_report(&items, &mixed, &[], &ReportOptions::default()), Err(AssessmentError::MixedRuns(..))));
}
