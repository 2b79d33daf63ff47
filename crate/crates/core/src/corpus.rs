//! Proportioned, budgeted and deduplicated corpus assembly.
//!
//! The token budget is split across the five source kinds by largest-remainder
//! apportionment. Each source then contributes records in pool order until its
//! quota is reached, and the union is shuffled under a fixed seed.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::SourceKind;
use crate::jsonl::{self, JsonlError};
use crate::qagen::TrainingRecord;
use crate::text::{is_latin_letter, is_punctuation};

pub use crate::text::approx_token_count;

pub const DEFAULT_BASE_MODEL: &str = "Qwen2.5-14B";
pub const DEFAULT_BUDGET_UNITS: u64 = 100_000;
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

const PROPORTION_SUM_TOLERANCE: f64 = 1e-9;
/// Proportions are apportioned as integer weights with this resolution.
const WEIGHT_SCALE: f64 = 1e12;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid sampling spec: {0}")]
    InvalidSpec(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<JsonlError> for CorpusError {
    fn from(e: JsonlError) -> Self {
        match e {
            JsonlError::Io { source, .. } => CorpusError::Io(source),
            schema @ JsonlError::Schema { .. } => CorpusError::SchemaViolation(schema.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub proportions: BTreeMap<SourceKind, f64>,
    pub budget_units: u64,
}

impl SamplingSpec {
    /// CommonCrawl 73%, CNKI 4%, eBooks 3%, arXiv 10%, dissertations 10%.
    pub fn default_mix(budget_units: u64) -> Self {
        let proportions = BTreeMap::from([
            (SourceKind::Commoncrawl, 0.73),
            (SourceKind::Cnki, 0.04),
            (SourceKind::Ebook, 0.03),
            (SourceKind::Arxiv, 0.10),
            (SourceKind::Dissertation, 0.10),
        ]);
        Self { proportions, budget_units }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        for kind in SourceKind::ALL {
            if !self.proportions.contains_key(&kind) {
                return Err(CorpusError::InvalidSpec(format!("missing proportion for {kind}")));
            }
        }
        let mut sum = 0.0;
        for (kind, &p) in &self.proportions {
            if !(0.0..=1.0).contains(&p) || p.is_nan() {
                return Err(CorpusError::InvalidSpec(format!("proportion for {kind} is {p}, outside [0, 1]")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > PROPORTION_SUM_TOLERANCE {
            return Err(CorpusError::InvalidSpec(format!("proportions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quota {
    pub source: SourceKind,
    pub units: u64,
}

/// Largest-remainder apportionment of the budget.
///
/// Each source first gets `floor(budget * p)`; the units left over go one each
/// to the largest fractional remainders, ties broken by source name. Quotas
/// come back in [`SourceKind::ALL`] order and sum to the budget exactly.
pub fn plan_sampling(spec: &SamplingSpec) -> Result<Vec<Quota>, CorpusError> {
    spec.validate()?;
    let weights: Vec<(SourceKind, u128)> = SourceKind::ALL
        .iter()
        .map(|&k| (k, (spec.proportions[&k] * WEIGHT_SCALE).round() as u128))
        .collect();
    let total: u128 = weights.iter().map(|(_, w)| w).sum();
    if total == 0 {
        return Err(CorpusError::InvalidSpec("all proportions are zero".into()));
    }
    let budget = u128::from(spec.budget_units);
    let mut quotas: Vec<(SourceKind, u128, u128)> = weights
        .iter()
        .map(|&(k, w)| {
            let exact = budget * w;
            (k, exact / total, exact % total)
        })
        .collect();
    let assigned: u128 = quotas.iter().map(|q| q.1).sum();
    let mut leftover = budget - assigned;

    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].2.cmp(&quotas[a].2).then_with(|| quotas[a].0.name().cmp(quotas[b].0.name())));
    for i in order {
        if leftover == 0 {
            break;
        }
        quotas[i].1 += 1;
        leftover -= 1;
    }
    Ok(quotas
        .into_iter()
        .map(|(source, units, _)| Quota { source, units: units as u64 })
        .collect())
}

fn normalize_key_part(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if c.is_whitespace() || is_punctuation(c) {
            continue;
        }
        if is_latin_letter(c) {
            out.extend(c.to_lowercase());
        } else {
            out.push(c);
        }
    }
    out
}

/// Normalized instruction and output joined by U+241F.
pub fn dedup_key(record: &TrainingRecord) -> String {
    format!("{}\u{241F}{}", normalize_key_part(&record.instruction), normalize_key_part(&record.output))
}

/// Keeps the first record for each [`dedup_key`], preserving order.
pub fn dedup_records(records: Vec<TrainingRecord>) -> Vec<TrainingRecord> {
    let mut seen = HashSet::new();
    records.into_iter().filter(|r| seen.insert(dedup_key(r))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub base_model: String,
    pub seed: u64,
    pub budget_units: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub proportions: BTreeMap<SourceKind, f64>,
    pub quotas: BTreeMap<SourceKind, u64>,
    pub achieved: BTreeMap<SourceKind, u64>,
    pub shortfalls: BTreeMap<SourceKind, u64>,
    pub record_count: usize,
    #[serde(default)]
    pub duplicates_skipped: usize,
}

impl Manifest {
    pub fn achieved_total(&self) -> u64 {
        self.achieved.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub records: Vec<TrainingRecord>,
    pub manifest: Manifest,
}

/// Groups records by source, keeping their relative order.
pub fn pools_by_source(records: impl IntoIterator<Item = TrainingRecord>) -> BTreeMap<SourceKind, Vec<TrainingRecord>> {
    let mut pools: BTreeMap<SourceKind, Vec<TrainingRecord>> = BTreeMap::new();
    for r in records {
        pools.entry(r.meta.source).or_default().push(r);
    }
    pools
}

/// Takes records per source until the quota is met (the record that crosses
/// the quota is kept), records any shortfall, then shuffles with `seed`.
///
/// Records whose dedup key was already taken from an earlier source are
/// skipped and counted in `duplicates_skipped`.
pub fn assemble_corpus(
    pools: &BTreeMap<SourceKind, Vec<TrainingRecord>>,
    quotas: &[Quota],
    seed: u64,
) -> Corpus {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut manifest = Manifest {
        base_model: DEFAULT_BASE_MODEL.to_string(),
        seed,
        budget_units: quotas.iter().map(|q| q.units).sum(),
        proportions: BTreeMap::new(),
        quotas: BTreeMap::new(),
        achieved: BTreeMap::new(),
        shortfalls: BTreeMap::new(),
        record_count: 0,
        duplicates_skipped: 0,
    };
    for quota in quotas {
        let mut achieved = 0u64;
        for record in pools.get(&quota.source).into_iter().flatten() {
            if achieved >= quota.units {
                break;
            }
            if !seen.insert(dedup_key(record)) {
                manifest.duplicates_skipped += 1;
                continue;
            }
            achieved += record.meta.unit_count as u64;
            records.push(record.clone());
        }
        manifest.quotas.insert(quota.source, quota.units);
        manifest.achieved.insert(quota.source, achieved);
        manifest.shortfalls.insert(quota.source, quota.units.saturating_sub(achieved));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records.shuffle(&mut rng);
    manifest.record_count = records.len();
    Corpus { records, manifest }
}

/// Writes `dataset.jsonl` and `manifest.json` into `dir`.
pub fn export_corpus(corpus: &Corpus, dir: &Path) -> Result<(), CorpusError> {
    jsonl::write_jsonl(&dir.join(DATASET_FILE), &corpus.records)?;
    jsonl::write_json(&dir.join(MANIFEST_FILE), &corpus.manifest)?;
    Ok(())
}

pub fn import_corpus(dir: &Path) -> Result<Corpus, CorpusError> {
    let records = read_dataset(&dir.join(DATASET_FILE))?;
    let manifest: Manifest = jsonl::read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.record_count != records.len() {
        return Err(CorpusError::SchemaViolation(format!(
            "manifest record_count {} but dataset has {} records",
            manifest.record_count,
            records.len()
        )));
    }
    Ok(Corpus { records, manifest })
}

/// Reads a five-field dataset, rejecting rows with missing fields or an
/// empty instruction/output.
pub fn read_dataset(path: &Path) -> Result<Vec<TrainingRecord>, CorpusError> {
    let records: Vec<TrainingRecord> = jsonl::read_jsonl(path)?;
    if let Some(i) = records.iter().position(|r| !r.is_valid()) {
        return Err(CorpusError::SchemaViolation(format!(
            "{}: record {} has an empty instruction or output",
            path.display(),
            i + 1
        )));
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparameters {
    pub learning_rate: f64,
    pub epochs: u32,
    pub max_seq_len: u32,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self { learning_rate: 1e-5, epochs: 3, max_seq_len: 4096 }
    }
}

/// Manifest handed to the fine-tuning launcher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftManifest {
    pub base_model: String,
    pub train_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_file: Option<String>,
    pub train_count: usize,
    pub validation_count: usize,
    pub seed: u64,
    pub hyperparameters: Hyperparameters,
    pub corpus: Manifest,
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VALIDATION_FILE: &str = "validation.jsonl";
pub const SFT_MANIFEST_FILE: &str = "sft_manifest.json";

/// Holds out the last `floor(n * ratio)` records for validation.
pub fn split_records(records: &[TrainingRecord], validation_ratio: f64) -> (&[TrainingRecord], &[TrainingRecord]) {
    let ratio = validation_ratio.clamp(0.0, 1.0);
    let n_val = (records.len() as f64 * ratio).floor() as usize;
    records.split_at(records.len() - n_val)
}

/// Writes the training split(s) and an [`SftManifest`] into `dir`.
pub fn export_training_set(
    corpus: &Corpus,
    dir: &Path,
    validation_ratio: f64,
    hyperparameters: Hyperparameters,
) -> Result<SftManifest, CorpusError> {
    let (train, val) = split_records(&corpus.records, validation_ratio);
    jsonl::write_jsonl(&dir.join(TRAIN_FILE), train)?;
    let validation_file = if val.is_empty() {
        None
    } else {
        jsonl::write_jsonl(&dir.join(VALIDATION_FILE), val)?;
        Some(VALIDATION_FILE.to_string())
    };
    let manifest = SftManifest {
        base_model: corpus.manifest.base_model.clone(),
        train_file: TRAIN_FILE.to_string(),
        validation_file,
        train_count: train.len(),
        validation_count: val.len(),
        seed: corpus.manifest.seed,
        hyperparameters,
        corpus: corpus.manifest.clone(),
    };
    jsonl::write_json(&dir.join(SFT_MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qagen::RecordMeta;
    use proptest::prelude::*;

    fn record(instruction: &str, output: &str, units: usize, source: SourceKind) -> TrainingRecord {
        TrainingRecord {
            instruction: instruction.into(),
            input: String::new(),
            output: output.into(),
            system: String::new(),
            history: Vec::new(),
            meta: RecordMeta { source, unit_count: units, augmented: false },
        }
    }

    fn quota_map(q: &[Quota]) -> Vec<u64> {
        q.iter().map(|q| q.units).collect()
    }

    #[test]
    fn default_mix_at_ten_thousand() {
        let q = plan_sampling(&SamplingSpec::default_mix(10_000)).unwrap();
        assert_eq!(quota_map(&q), vec![7300, 400, 300, 1000, 1000]);
    }

    #[test]
    fn default_mix_at_ten_uses_largest_remainder() {
        // floors 7,0,0,1,1; remainders .3,.4,.3,0,0 -> cnki gets the spare unit
        let q = plan_sampling(&SamplingSpec::default_mix(10)).unwrap();
        assert_eq!(quota_map(&q), vec![7, 1, 0, 1, 1]);
    }

    #[test]
    fn equal_remainders_go_to_lexicographically_first() {
        // five equal shares of 3: remainders all 0.6, so arxiv, cnki, commoncrawl get +1
        let proportions = SourceKind::ALL.iter().map(|&k| (k, 0.2)).collect();
        let q = plan_sampling(&SamplingSpec { proportions, budget_units: 3 }).unwrap();
        let by_kind: BTreeMap<_, _> = q.iter().map(|q| (q.source, q.units)).collect();
        assert_eq!(by_kind[&SourceKind::Arxiv], 1);
        assert_eq!(by_kind[&SourceKind::Cnki], 1);
        assert_eq!(by_kind[&SourceKind::Commoncrawl], 1);
        assert_eq!(by_kind[&SourceKind::Dissertation], 0);
        assert_eq!(by_kind[&SourceKind::Ebook], 0);
    }

    #[test]
    fn invalid_specs() {
        let mut spec = SamplingSpec::default_mix(100);
        spec.proportions.insert(SourceKind::Commoncrawl, 0.63);
        assert!(matches!(plan_sampling(&spec), Err(CorpusError::InvalidSpec(_))));
        let mut spec = SamplingSpec::default_mix(100);
        spec.proportions.remove(&SourceKind::Ebook);
        assert!(matches!(plan_sampling(&spec), Err(CorpusError::InvalidSpec(_))));
    }

    #[test]
    fn dedup_examples() {
        let a = record("What is EAST?", "A tokamak.", 5, SourceKind::Arxiv);
        assert_eq!(dedup_records(vec![a.clone(), a.clone()]).len(), 1);
        let b = record("what  is east", "a  TOKAMAK", 5, SourceKind::Arxiv);
        assert_eq!(dedup_records(vec![a.clone(), b]).len(), 1);
        let c = record("What is EAST?", "A stellarator.", 5, SourceKind::Arxiv);
        assert_eq!(dedup_records(vec![a, c]).len(), 2);
        let zh1 = record("什么是托卡马克？", "环形装置。", 5, SourceKind::Cnki);
        let zh2 = record("什么是 托卡马克", "环形装置", 5, SourceKind::Cnki);
        assert_eq!(dedup_records(vec![zh1, zh2]).len(), 1);
    }

    fn pool(n: usize, units: usize, kind: SourceKind) -> Vec<TrainingRecord> {
        (0..n).map(|i| record(&format!("q{i} {kind}"), &format!("a{i}"), units, kind)).collect()
    }

    #[test]
    fn exact_pool_fills_quota() {
        let pools = BTreeMap::from([(SourceKind::Arxiv, pool(10, 10, SourceKind::Arxiv))]);
        let c = assemble_corpus(&pools, &[Quota { source: SourceKind::Arxiv, units: 100 }], 1);
        assert_eq!(c.records.len(), 10);
        assert_eq!(c.manifest.achieved[&SourceKind::Arxiv], 100);
        assert_eq!(c.manifest.shortfalls[&SourceKind::Arxiv], 0);
    }

    #[test]
    fn half_pool_records_shortfall() {
        let pools = BTreeMap::from([(SourceKind::Arxiv, pool(5, 10, SourceKind::Arxiv))]);
        let c = assemble_corpus(&pools, &[Quota { source: SourceKind::Arxiv, units: 100 }], 1);
        assert_eq!(c.records.len(), 5);
        assert_eq!(c.manifest.shortfalls[&SourceKind::Arxiv], 50);
    }

    #[test]
    fn crossing_record_is_kept() {
        let pools = BTreeMap::from([(SourceKind::Cnki, pool(10, 30, SourceKind::Cnki))]);
        let c = assemble_corpus(&pools, &[Quota { source: SourceKind::Cnki, units: 100 }], 1);
        assert_eq!(c.records.len(), 4);
        assert_eq!(c.manifest.achieved[&SourceKind::Cnki], 120);
    }

    #[test]
    fn same_seed_same_order() {
        let pools = BTreeMap::from([(SourceKind::Arxiv, pool(50, 1, SourceKind::Arxiv))]);
        let q = [Quota { source: SourceKind::Arxiv, units: 50 }];
        assert_eq!(assemble_corpus(&pools, &q, 7), assemble_corpus(&pools, &q, 7));
        assert_ne!(assemble_corpus(&pools, &q, 7).records, assemble_corpus(&pools, &q, 8).records);
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pools = BTreeMap::from([(SourceKind::Arxiv, pool(3, 4, SourceKind::Arxiv))]);
        let c = assemble_corpus(&pools, &[Quota { source: SourceKind::Arxiv, units: 12 }], 3);
        export_corpus(&c, dir.path()).unwrap();
        assert_eq!(import_corpus(dir.path()).unwrap(), c);
        let lines = std::fs::read_to_string(dir.path().join(DATASET_FILE)).unwrap().lines().count();
        assert_eq!(lines, c.manifest.record_count);
    }

    #[test]
    fn import_rejects_missing_output() {
        let dir = tempfile::tempdir().unwrap();
        let row = r#"{"instruction":"q","input":"","system":"","history":[],"meta":{"source":"arxiv","unit_count":1}}"#;
        std::fs::write(dir.path().join(DATASET_FILE), format!("{row}\n")).unwrap();
        assert!(matches!(read_dataset(&dir.path().join(DATASET_FILE)), Err(CorpusError::SchemaViolation(_))));
    }

    #[test]
    fn validation_split() {
        let records = pool(10, 1, SourceKind::Arxiv);
        let (train, val) = split_records(&records, 0.25);
        assert_eq!((train.len(), val.len()), (8, 2));
        let (train, val) = split_records(&records, 0.0);
        assert_eq!((train.len(), val.len()), (10, 0));
    }

    fn arb_spec() -> impl Strategy<Value = SamplingSpec> {
        (proptest::collection::vec(0u32..1000, 5), 0u64..10_000_000).prop_filter_map("all zero", |(raw, budget)| {
            let total: u32 = raw.iter().sum();
            if total == 0 {
                return None;
            }
            let mut proportions: BTreeMap<SourceKind, f64> =
                SourceKind::ALL.iter().zip(&raw).map(|(&k, &r)| (k, f64::from(r) / f64::from(total))).collect();
            let sum: f64 = proportions.values().sum();
            // keep the float sum inside the validation tolerance
            *proportions.get_mut(&SourceKind::Commoncrawl).unwrap() += 1.0 - sum;
            Some(SamplingSpec { proportions, budget_units: budget })
        })
    }

    proptest! {
        #[test]
        fn apportionment_is_exact(spec in arb_spec()) {
            let quotas = plan_sampling(&spec).unwrap();
            prop_assert_eq!(quotas.iter().map(|q| q.units).sum::<u64>(), spec.budget_units);
            for q in &quotas {
                let ideal = spec.budget_units as f64 * spec.proportions[&q.source];
                prop_assert!((q.units as f64 - ideal).abs() < 1.0 + 1e-6);
            }
        }

        #[test]
        fn dedup_is_idempotent(raw in proptest::collection::vec(("[a-cA-C ]{1,4}", "[x-zX-Z.]{1,3}"), 0..40)) {
            let records: Vec<_> = raw.iter().map(|(i, o)| record(i, o, 1, SourceKind::Arxiv)).collect();
            let once = dedup_records(records);
            prop_assert_eq!(dedup_records(once.clone()), once.clone());
            let keys: HashSet<_> = once.iter().map(dedup_key).collect();
            prop_assert_eq!(keys.len(), once.len());
        }

        #[test]
        fn raising_quota_never_lowers_achieved(units in proptest::collection::vec(1usize..50, 0..30), q in 0u64..500, extra in 0u64..500) {
            let records: Vec<_> = units.iter().enumerate()
                .map(|(i, &u)| record(&format!("q{i}"), "a", u, SourceKind::Ebook)).collect();
            let pools = BTreeMap::from([(SourceKind::Ebook, records)]);
            let low = assemble_corpus(&pools, &[Quota { source: SourceKind::Ebook, units: q }], 0);
            let high = assemble_corpus(&pools, &[Quota { source: SourceKind::Ebook, units: q + extra }], 0);
            prop_assert!(high.manifest.achieved[&SourceKind::Ebook] >= low.manifest.achieved[&SourceKind::Ebook]);
        }
    }
}
