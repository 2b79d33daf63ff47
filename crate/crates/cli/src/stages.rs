//! One function per pipeline stage. Stages exchange data only through the
//! artifact files named here, all under the run's output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use fusionkit_core::assessment::{
    build_report, consistency_check, judge_each, load_judgments, load_questionnaire, load_run_transcripts,
    run_assessment, write_report, AssessmentItem, Backend, GroupBy, ReportOptions, RunOptions, TranscriptStatus,
    DEFAULT_RUBRIC, JUDGMENTS_FILE, REPORT_JSON, REPORT_MD,
};
use fusionkit_core::corpus::{
    assemble_corpus, export_corpus, export_training_set, import_corpus, plan_sampling, pools_by_source, read_dataset,
    split_records,
};
use fusionkit_core::cot_prompting::{default_cot_config, load_cot_config, ValidCotConfig};
use fusionkit_core::ingest::{chunk_document, load_source, SourceDocument};
use fusionkit_core::jsonl;
use fusionkit_core::llm_client::{ChatClient, ClientConfig, HttpTransport, MockScript, MockTransport};
use fusionkit_core::qagen::{augment_records, generate_all, make_training_record, AugmentOptions};
use fusionkit_gateway::GatewayConfig;
use serde_json::{json, Value};

use crate::config::{BackendConfig, RunConfig};
use crate::StageError;

pub const DOCUMENTS_FILE: &str = "documents.jsonl";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const GENERATION_STATS_FILE: &str = "generation_stats.json";
pub const CORPUS_DIR: &str = "corpus";
pub const TRAIN_DIR: &str = "train";
pub const ASSESS_DIR: &str = "assess";
pub const CONSISTENCY_FILE: &str = "consistency.jsonl";

fn require(path: &Path, producer: &str) -> Result<(), StageError> {
    if path.exists() {
        Ok(())
    } else {
        Err(StageError::MissingArtifact(format!("{} (run `{producer}` first)", path.display())))
    }
}

pub fn build_client(backend: &BackendConfig) -> Result<ChatClient, StageError> {
    build_client_with(backend, backend.client.clone())
}

fn build_client_with(backend: &BackendConfig, config: ClientConfig) -> Result<ChatClient, StageError> {
    if let Some(script) = &backend.mock_script {
        let script = MockScript::load(script)
            .map_err(|e| StageError::Config(format!("mock script {}: {e}", script.display())))?;
        return Ok(ChatClient::new(Arc::new(MockTransport::new(script)), config));
    }
    let Some(url) = &backend.upstream_url else {
        return Err(StageError::Config(format!("backend `{}` needs upstream_url or a mock script", backend.id)));
    };
    let timeout = Duration::from_secs(config.timeout_secs.max(1));
    let transport = HttpTransport::new(url.clone(), timeout).map_err(|e| StageError::Config(e.to_string()))?;
    Ok(ChatClient::new(Arc::new(transport), config))
}

fn backend(cfg: &BackendConfig) -> Result<Backend, StageError> {
    Ok(Backend { id: cfg.id.clone(), client: build_client(cfg)?, params: cfg.params() })
}

/// Worker count for a backend-bound stage.
fn backend_jobs(cfg: &RunConfig, backend: &BackendConfig) -> usize {
    cfg.jobs().min(backend.client.max_inflight.max(1))
}

fn cot_config(cfg: &RunConfig) -> Result<ValidCotConfig, StageError> {
    Ok(match &cfg.cot_config_path {
        Some(path) => load_cot_config(path)?,
        None => default_cot_config(),
    })
}

pub fn ingest(cfg: &RunConfig, dry_run: bool) -> Result<Value, StageError> {
    if cfg.sources.is_empty() {
        return Err(StageError::Config("no sources configured (use [sources] or --source kind=path)".into()));
    }
    let mut docs: Vec<SourceDocument> = Vec::new();
    let mut per_source = BTreeMap::new();
    for (&kind, path) in &cfg.sources {
        let before = docs.len();
        for doc in load_source(path, kind)? {
            docs.push(doc?);
        }
        per_source.insert(kind.name(), docs.len() - before);
    }
    let path = cfg.out_dir.join(DOCUMENTS_FILE);
    if !dry_run {
        jsonl::write_jsonl(&path, &docs)?;
    }
    Ok(json!({ "stage": "ingest", "documents": docs.len(), "per_source": per_source, "output": path, "dry_run": dry_run }))
}

pub async fn generate(cfg: &RunConfig, dry_run: bool) -> Result<Value, StageError> {
    let input = cfg.out_dir.join(DOCUMENTS_FILE);
    require(&input, "ingest")?;
    let docs: Vec<SourceDocument> = jsonl::read_jsonl(&input)?;
    let mut chunks = Vec::new();
    for doc in &docs {
        chunks.extend(chunk_document(doc, cfg.chunk_max_units, cfg.chunk_overlap)?);
    }
    if dry_run {
        let mut per_source: BTreeMap<&str, usize> = BTreeMap::new();
        for c in &chunks {
            *per_source.entry(c.source.name()).or_default() += 1;
        }
        return Ok(json!({
            "stage": "generate", "dry_run": true, "documents": docs.len(), "chunks": chunks.len(),
            "chunks_per_source": per_source, "backend_calls_planned": chunks.len(),
        }));
    }

    let client = build_client(&cfg.backend)?;
    let params = cfg.backend.params();
    let jobs = backend_jobs(cfg, &cfg.backend);
    let (pairs, stats) = generate_all(&chunks, &client, &params, jobs).await;
    if !chunks.is_empty() && stats.failed_chunks == chunks.len() {
        return Err(StageError::Failed(format!(
            "every chunk failed; first error: {}",
            stats.failures.first().map_or("", String::as_str)
        )));
    }
    let mut records: Vec<_> = pairs.iter().map(make_training_record).collect();
    let mut augmented = 0;
    if cfg.augment {
        let extra = augment_records(&records, &client, &params, AugmentOptions::default(), jobs)
            .await
            .map_err(|e| StageError::Failed(e.to_string()))?;
        augmented = extra.len();
        records.extend(extra);
    }

    jsonl::write_jsonl(&cfg.out_dir.join(PAIRS_FILE), &pairs)?;
    jsonl::write_jsonl(&cfg.out_dir.join(RECORDS_FILE), &records)?;
    jsonl::write_json(&cfg.out_dir.join(GENERATION_STATS_FILE), &stats)?;
    Ok(json!({
        "stage": "generate", "chunks": stats.chunks, "pairs": stats.pairs, "records": records.len(),
        "augmented": augmented, "failed_chunks": stats.failed_chunks, "skipped_chunks": stats.skipped_chunks,
        "output": cfg.out_dir.join(RECORDS_FILE),
    }))
}

pub fn assemble(cfg: &RunConfig, dry_run: bool) -> Result<Value, StageError> {
    let spec = cfg.sampling_spec();
    let quotas = plan_sampling(&spec)?;
    let quota_map: BTreeMap<&str, u64> = quotas.iter().map(|q| (q.source.name(), q.units)).collect();
    let input = cfg.out_dir.join(RECORDS_FILE);
    if dry_run {
        let mut plan = json!({ "stage": "assemble", "dry_run": true, "budget_units": spec.budget_units, "quotas": quota_map });
        if input.exists() {
            let pools = pools_by_source(read_dataset(&input)?);
            let available: BTreeMap<&str, u64> = pools
                .iter()
                .map(|(k, rs)| (k.name(), rs.iter().map(|r| r.meta.unit_count as u64).sum()))
                .collect();
            plan["available_units"] = json!(available);
        }
        return Ok(plan);
    }
    require(&input, "generate")?;
    let pools = pools_by_source(read_dataset(&input)?);
    let mut corpus = assemble_corpus(&pools, &quotas, cfg.seed);
    corpus.manifest.base_model = cfg.base_model.clone();
    corpus.manifest.proportions = spec.proportions.clone();
    let dir = cfg.out_dir.join(CORPUS_DIR);
    export_corpus(&corpus, &dir)?;
    let m = &corpus.manifest;
    Ok(json!({
        "stage": "assemble", "records": m.record_count, "budget_units": m.budget_units,
        "achieved_units": m.achieved_total(), "quotas": quota_map, "shortfalls": m.shortfalls,
        "duplicates_skipped": m.duplicates_skipped, "output": dir,
    }))
}

pub fn export_train(cfg: &RunConfig, validation_ratio: Option<f64>, dry_run: bool) -> Result<Value, StageError> {
    let dir = cfg.out_dir.join(CORPUS_DIR);
    require(&dir, "assemble")?;
    let corpus = import_corpus(&dir)?;
    let ratio = validation_ratio.unwrap_or(cfg.validation_ratio);
    if !(0.0..1.0).contains(&ratio) {
        return Err(StageError::Config("validation ratio must be in [0, 1)".into()));
    }
    if dry_run {
        let (train, val) = split_records(&corpus.records, ratio);
        return Ok(json!({
            "stage": "export-train", "dry_run": true, "train_count": train.len(), "validation_count": val.len(),
            "base_model": corpus.manifest.base_model, "hyperparameters": cfg.hyperparameters,
        }));
    }
    let out = cfg.out_dir.join(TRAIN_DIR);
    let manifest = export_training_set(&corpus, &out, ratio, cfg.hyperparameters.clone())?;
    Ok(json!({
        "stage": "export-train", "train_count": manifest.train_count,
        "validation_count": manifest.validation_count, "output": out,
    }))
}

pub fn default_run_id(cfg: &RunConfig) -> String {
    format!("run-{}", cfg.seed)
}

pub fn run_dir(cfg: &RunConfig, run_id: &str) -> PathBuf {
    cfg.out_dir.join(ASSESS_DIR).join(run_id)
}

fn questionnaire(cfg: &RunConfig) -> Result<Vec<AssessmentItem>, StageError> {
    let path = cfg
        .assess
        .questionnaire
        .as_ref()
        .ok_or_else(|| StageError::Config("no questionnaire configured (assess.questionnaire or --questionnaire)".into()))?;
    Ok(load_questionnaire(path)?)
}

#[derive(Debug, Clone)]
pub struct AssessArgs {
    pub run_id: String,
    pub cot_modes: Vec<bool>,
    pub judge: bool,
    /// Number of leading items given a bilingual consistency check.
    pub consistency: usize,
}

pub async fn assess(cfg: &RunConfig, args: &AssessArgs, dry_run: bool) -> Result<Value, StageError> {
    let items = questionnaire(cfg)?;
    let cot = cot_config(cfg)?;
    let backends = cfg.assess_backends();
    let dir = run_dir(cfg, &args.run_id);
    if args.judge && cfg.assess.judge.is_none() {
        return Err(StageError::Config("--judge needs an [assess.judge] backend".into()));
    }
    if dry_run {
        let mut per_topic: BTreeMap<&str, usize> = BTreeMap::new();
        for item in &items {
            *per_topic.entry(item.topic.label()).or_default() += 1;
        }
        let ids: Vec<&str> = backends.iter().map(|b| b.id.as_str()).collect();
        return Ok(json!({
            "stage": "assess", "dry_run": true, "run_id": args.run_id, "items": items.len(), "per_topic": per_topic,
            "backends": ids, "cot_modes": args.cot_modes, "transcripts_planned": items.len() * ids.len() * args.cot_modes.len(),
        }));
    }

    let mut combos = Vec::new();
    let mut transcripts = Vec::new();
    for bc in &backends {
        let b = backend(bc)?;
        for &cot_enabled in &args.cot_modes {
            let opts = RunOptions {
                run_id: args.run_id.clone(),
                cot_enabled,
                resume_dir: Some(dir.clone()),
                concurrency: backend_jobs(cfg, bc),
            };
            let out = run_assessment(&items, &b, &cot, &opts).await?;
            let failed = out.iter().filter(|t| t.status == TranscriptStatus::Failed).count();
            combos.push(json!({ "backend": bc.id, "cot": cot_enabled, "transcripts": out.len(), "failed": failed }));
            transcripts.extend(out);
        }
    }

    let mut summary = json!({ "stage": "assess", "run_id": args.run_id, "runs": combos, "output": dir });
    if let Some(judge_cfg) = cfg.assess.judge.as_ref().filter(|_| args.judge) {
        let judge = backend(judge_cfg)?;
        let rubric = cfg.assess.rubric.as_deref().unwrap_or(DEFAULT_RUBRIC);
        let mut judged = Vec::new();
        let mut errors = Vec::new();
        for outcome in judge_each(&transcripts, rubric, &judge, backend_jobs(cfg, judge_cfg)).await {
            match outcome {
                Ok(j) => judged.push(j),
                Err(e) => errors.push(e.to_string()),
            }
        }
        jsonl::write_jsonl(&dir.join(JUDGMENTS_FILE), &judged)?;
        summary["judged"] = json!(judged.len());
        summary["judge_errors"] = json!(errors);
    }
    if args.consistency > 0 {
        let judge_cfg = cfg.assess.judge.as_ref().unwrap_or(&backends[0]);
        let judge = backend(judge_cfg)?;
        let subject = backend(&backends[0])?;
        let mut results = Vec::new();
        let mut errors = Vec::new();
        for item in items.iter().take(args.consistency) {
            match consistency_check(item, &subject, &cot, &judge).await {
                Ok(r) => results.push(r),
                Err(e) => errors.push(format!("{}: {e}", item.id)),
            }
        }
        jsonl::write_jsonl(&dir.join(CONSISTENCY_FILE), &results)?;
        summary["consistency_checked"] = json!(results.len());
        summary["consistency_errors"] = json!(errors);
    }
    Ok(summary)
}

pub fn report(
    cfg: &RunConfig,
    run_id: &str,
    group_by: Vec<GroupBy>,
    excerpt_items: Option<Vec<String>>,
    dry_run: bool,
) -> Result<Value, StageError> {
    let dir = run_dir(cfg, run_id);
    require(&dir, "assess")?;
    let items = questionnaire(cfg)?;
    let transcripts = load_run_transcripts(&dir)?;
    let judged = load_judgments(&dir)?;
    if dry_run {
        return Ok(json!({
            "stage": "report", "dry_run": true, "run_id": run_id,
            "transcripts": transcripts.len(), "judgments": judged.len(),
        }));
    }
    let opts = ReportOptions {
        group_by: if group_by.is_empty() { ReportOptions::default().group_by } else { group_by },
        excerpt_items: excerpt_items.unwrap_or_else(|| cfg.assess.excerpt_items.clone()),
        ..ReportOptions::default()
    };
    let report = build_report(&items, &transcripts, &judged, &opts)?;
    write_report(&report, &dir)?;
    Ok(json!({
        "stage": "report", "run_id": run_id, "transcripts": report.transcript_total,
        "groups": report.groups.len(), "scores_included": report.scores_included,
        "output": [dir.join(REPORT_MD), dir.join(REPORT_JSON)],
    }))
}

/// The gateway settings, with the run's CoT config and main backend filling
/// anything the `[gateway]` table leaves unset.
pub fn gateway_config(cfg: &RunConfig, listen: Option<String>) -> GatewayConfig {
    let mut g = cfg.gateway.clone();
    if let Some(addr) = listen {
        g.listen_addr = addr;
    }
    if g.cot_config_path.is_none() {
        g.cot_config_path = cfg.cot_config_path.clone();
    }
    if g.upstream_url.is_none() && g.mock_script.is_none() {
        g.upstream_url = cfg.backend.upstream_url.clone();
        g.mock_script = cfg.backend.mock_script.clone();
        g.model_id = cfg.backend.model_id.clone();
        g.client = cfg.backend.client.clone();
    }
    g
}

pub async fn serve(cfg: &RunConfig, listen: Option<String>, dry_run: bool) -> Result<Value, StageError> {
    let g = gateway_config(cfg, listen);
    if dry_run {
        return Ok(json!({ "stage": "serve", "dry_run": true, "gateway": g }));
    }
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    fusionkit_gateway::run(&g, shutdown, |addr| {
        println!("{}", json!({ "stage": "serve", "listening": addr.to_string() }));
    })
    .await?;
    Ok(json!({ "stage": "serve", "stopped": true }))
}
