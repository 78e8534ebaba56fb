//! Declarative run configuration (TOML). The verbatim config text is
//! snapshotted into the run manifest so every run is auditable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rolesum::gateway::GatewayMode;
use rolesum::pipeline::ComboSpec;
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub output_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub mode: GatewayMode,
    #[serde(default = "default_reps")]
    pub reps: u32,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    #[serde(default)]
    pub prompt_overrides: Option<PathBuf>,
    pub gen_models: Vec<String>,
    pub seeds: Seeds,
    pub backends: Vec<BackendEntry>,
    pub combos: Vec<ComboSpec>,
    pub prelim: PrelimConfig,
    pub similarity: SimilarityConfig,
    pub annotation: AnnotationConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub stats: StatsConfig,
}

fn default_reps() -> u32 {
    1
}

fn default_workers() -> usize {
    4
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub sampling: u64,
    pub annotation: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendEntry {
    pub backend_id: String,
    pub base_url: String,
    pub model_id: String,
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrelimConfig {
    pub judge_model: String,
    /// Generation model whose summaries are bias-scored; defaults to the
    /// first entry of `gen_models`.
    #[serde(default)]
    pub gen_model: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityConfig {
    /// Model used to extract facts from summaries and opinions for the
    /// overlap precision/recall columns.
    pub extract_model: String,
    #[serde(default = "default_threshold")]
    pub match_threshold: f64,
    #[serde(default = "default_true")]
    pub lowercase: bool,
    #[serde(default = "default_true")]
    pub strip_punctuation: bool,
    pub embedding: EmbeddingConfig,
}

fn default_threshold() -> f64 {
    0.5
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    /// "hash" (deterministic, offline) or "http" (remote endpoint).
    pub provider_id: String,
    pub dimension: usize,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub model_id: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationConfig {
    pub annotators: Vec<String>,
    /// Directory of completed sheets imported during `run`.
    #[serde(default)]
    pub filled_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Grouping labels for the favorability-bias aggregation.
    #[serde(default = "default_bias_group_by")]
    pub bias_group_by: Vec<String>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            bias_group_by: default_bias_group_by(),
        }
    }
}

fn default_bias_group_by() -> Vec<String> {
    ["domain", "stakeholder_role", "classifier", "kind"]
        .map(str::to_string)
        .to_vec()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsConfig {
    #[serde(default = "default_reference_level")]
    pub lmm_reference_level: String,
    #[serde(default = "default_icc_alpha")]
    pub icc_alpha: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            lmm_reference_level: default_reference_level(),
            icc_alpha: default_icc_alpha(),
        }
    }
}

fn default_reference_level() -> String {
    "judge".to_string()
}

fn default_icc_alpha() -> f64 {
    0.05
}

/// Loaded config plus its verbatim text and base directory (relative
/// paths in the file resolve against the file's location).
pub struct LoadedConfig {
    pub config: RunConfig,
    pub raw_toml: String,
}

pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let raw_toml = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let mut config: RunConfig = toml::from_str(&raw_toml)
        .with_context(|| format!("invalid config {}", path.display()))?;

    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &PathBuf| -> PathBuf {
        if p.is_absolute() {
            p.clone()
        } else {
            base.join(p)
        }
    };
    config.corpus = resolve(&config.corpus);
    config.output_dir = resolve(&config.output_dir);
    config.cache_dir = resolve(&config.cache_dir);
    config.prompt_overrides = config.prompt_overrides.as_ref().map(&resolve);
    config.annotation.filled_dir = config.annotation.filled_dir.as_ref().map(&resolve);

    validate(&config)?;
    Ok(LoadedConfig { config, raw_toml })
}

fn validate(config: &RunConfig) -> Result<()> {
    let backend_ids: Vec<&str> = config.backends.iter().map(|b| b.backend_id.as_str()).collect();
    let known = |id: &str| backend_ids.contains(&id);
    for model in &config.gen_models {
        if !known(model) {
            bail!("gen_models entry {model:?} has no backend block");
        }
    }
    for combo in &config.combos {
        for model in [
            combo.gen_model.as_str(),
            combo.extract_model.as_str(),
            combo.include_model.as_str(),
            combo.classifier(),
        ] {
            if !known(model) {
                bail!("combo {:?} references unconfigured backend {model:?}", combo.combo_id());
            }
        }
        if !config.gen_models.iter().any(|m| m == &combo.gen_model) {
            bail!("combo {:?} uses gen_model outside gen_models", combo.combo_id());
        }
    }
    if !known(&config.prelim.judge_model) {
        bail!("prelim.judge_model {:?} has no backend block", config.prelim.judge_model);
    }
    if let Some(model) = &config.prelim.gen_model {
        if !config.gen_models.iter().any(|m| m == model) {
            bail!("prelim.gen_model {model:?} is not in gen_models");
        }
    }
    if !known(&config.similarity.extract_model) {
        bail!(
            "similarity.extract_model {:?} has no backend block",
            config.similarity.extract_model
        );
    }
    match config.similarity.embedding.provider_id.as_str() {
        "hash" => {}
        "http" => {
            if config.similarity.embedding.base_url.is_none() {
                bail!("http embedding provider needs base_url");
            }
        }
        other => bail!("unknown embedding provider {other:?}"),
    }
    if config.reps < 1 {
        bail!("reps must be >= 1");
    }
    if config.annotation.annotators.is_empty() {
        bail!("annotation.annotators must not be empty");
    }
    Ok(())
}
