//! Run configuration: a TOML file overlaid by command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fusionkit_core::corpus::{Hyperparameters, SamplingSpec, DEFAULT_BASE_MODEL, DEFAULT_BUDGET_UNITS};
use fusionkit_core::ingest::{DEFAULT_MAX_UNITS, DEFAULT_OVERLAP};
use fusionkit_core::llm_client::{ChatParams, ClientConfig};
use fusionkit_core::SourceKind;
use fusionkit_gateway::GatewayConfig;
use serde::{Deserialize, Serialize};

use crate::StageError;

/// A chat backend: a real endpoint or a mock script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub id: String,
    pub upstream_url: Option<String>,
    pub mock_script: Option<PathBuf>,
    pub model_id: String,
    pub temperature: f32,
    pub max_output_units: Option<u32>,
    pub client: ClientConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        let params = ChatParams::default();
        Self {
            id: "default".into(),
            upstream_url: None,
            mock_script: None,
            model_id: params.model_id,
            temperature: params.temperature,
            max_output_units: None,
            client: ClientConfig::default(),
        }
    }
}

impl BackendConfig {
    pub fn params(&self) -> ChatParams {
        ChatParams {
            model_id: self.model_id.clone(),
            temperature: self.temperature,
            max_output_units: self.max_output_units,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssessConfig {
    pub questionnaire: Option<PathBuf>,
    /// Backends under comparison; the main backend when empty.
    pub backends: Vec<BackendConfig>,
    /// Scores transcripts when set.
    pub judge: Option<BackendConfig>,
    pub rubric: Option<String>,
    /// Items shown side by side in reports.
    pub excerpt_items: Vec<String>,
}

impl Default for AssessConfig {
    fn default() -> Self {
        Self { questionnaire: None, backends: Vec::new(), judge: None, rubric: None, excerpt_items: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub sources: BTreeMap<SourceKind, PathBuf>,
    /// Share of the budget per source; the reference mix when empty.
    pub proportions: BTreeMap<SourceKind, f64>,
    pub budget_units: u64,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub out_dir: PathBuf,
    pub cot_config_path: Option<PathBuf>,
    pub chunk_max_units: usize,
    pub chunk_overlap: usize,
    /// Adds back-translated paraphrases during `generate`.
    pub augment: bool,
    pub base_model: String,
    pub validation_ratio: f64,
    pub hyperparameters: Hyperparameters,
    pub backend: BackendConfig,
    pub assess: AssessConfig,
    pub gateway: GatewayConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sources: BTreeMap::new(),
            proportions: BTreeMap::new(),
            budget_units: DEFAULT_BUDGET_UNITS,
            seed: 0,
            jobs: None,
            out_dir: PathBuf::from("out"),
            cot_config_path: None,
            chunk_max_units: DEFAULT_MAX_UNITS,
            chunk_overlap: DEFAULT_OVERLAP,
            augment: false,
            base_model: DEFAULT_BASE_MODEL.into(),
            validation_ratio: 0.05,
            hyperparameters: Hyperparameters::default(),
            backend: BackendConfig::default(),
            assess: AssessConfig::default(),
            gateway: GatewayConfig::default(),
        }
    }
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub budget: Option<u64>,
    pub mock: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn rebase_opt(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        rebase(base, p);
    }
}

impl RunConfig {
    /// Loads `path` (paths inside resolve against its directory) or the
    /// defaults, then applies `overrides` and validates.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self, StageError> {
        let mut cfg = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| StageError::Config(format!("{}: {e}", path.display())))?;
                let mut cfg: RunConfig =
                    toml::from_str(&text).map_err(|e| StageError::Config(format!("{}: {e}", path.display())))?;
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                cfg.rebase(&base);
                cfg
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(jobs) = overrides.jobs {
            cfg.jobs = Some(jobs);
        }
        if let Some(budget) = overrides.budget {
            cfg.budget_units = budget;
        }
        if let Some(out) = &overrides.out {
            cfg.out_dir = out.clone();
        }
        if let Some(mock) = &overrides.mock {
            cfg.backend.mock_script = Some(mock.clone());
            for b in &mut cfg.assess.backends {
                b.mock_script = Some(mock.clone());
            }
            if let Some(judge) = &mut cfg.assess.judge {
                judge.mock_script = Some(mock.clone());
            }
            cfg.gateway.mock_script = Some(mock.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        if base.as_os_str().is_empty() {
            return;
        }
        for p in self.sources.values_mut() {
            rebase(base, p);
        }
        rebase(base, &mut self.out_dir);
        rebase_opt(base, &mut self.cot_config_path);
        rebase_opt(base, &mut self.backend.mock_script);
        rebase_opt(base, &mut self.assess.questionnaire);
        for b in &mut self.assess.backends {
            rebase_opt(base, &mut b.mock_script);
        }
        if let Some(judge) = &mut self.assess.judge {
            rebase_opt(base, &mut judge.mock_script);
        }
        rebase_opt(base, &mut self.gateway.mock_script);
        rebase_opt(base, &mut self.gateway.cot_config_path);
        rebase_opt(base, &mut self.gateway.ui_dir);
    }

    fn validate(&self) -> Result<(), StageError> {
        let mut paths: Vec<(&str, &Path)> = self.sources.values().map(|p| ("source", p.as_path())).collect();
        let optional = [
            ("cot_config_path", &self.cot_config_path),
            ("backend.mock_script", &self.backend.mock_script),
            ("assess.questionnaire", &self.assess.questionnaire),
            ("gateway.cot_config_path", &self.gateway.cot_config_path),
            ("gateway.ui_dir", &self.gateway.ui_dir),
        ];
        paths.extend(optional.iter().filter_map(|(k, p)| p.as_deref().map(|p| (*k, p))));
        for (key, path) in paths {
            if !path.exists() {
                return Err(StageError::Config(format!("{key} path does not exist: {}", path.display())));
            }
        }
        if self.chunk_max_units == 0 || self.chunk_overlap >= self.chunk_max_units {
            return Err(StageError::Config("chunk_overlap must be smaller than a positive chunk_max_units".into()));
        }
        if !(0.0..1.0).contains(&self.validation_ratio) {
            return Err(StageError::Config("validation_ratio must be in [0, 1)".into()));
        }
        self.sampling_spec().validate()?;
        Ok(())
    }

    pub fn sampling_spec(&self) -> SamplingSpec {
        if self.proportions.is_empty() {
            SamplingSpec::default_mix(self.budget_units)
        } else {
            SamplingSpec { proportions: self.proportions.clone(), budget_units: self.budget_units }
        }
    }

    /// Worker count; defaults to the logical CPU count.
    pub fn jobs(&self) -> usize {
        self.jobs
            .filter(|&j| j > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }

    pub fn assess_backends(&self) -> Vec<BackendConfig> {
        if self.assess.backends.is_empty() {
            vec![self.backend.clone()]
        } else {
            self.assess.backends.clone()
        }
    }
}
