//! Run configuration: one strict JSON file drives every stage.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use gencl_core::backends::{
    ChatBackend, Concept, Generator, HttpChat, HttpChatConfig, HttpGenerator, MockChat,
    MockGenerator, SyntheticFeatureModel,
};
use gencl_core::hirpg::{node_count, HirpgConfig};
use gencl_core::selection::SelectionConfig;
use gencl_core::stream::LearnerConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub concepts: Vec<Concept>,
    pub hirpg: HirpgConfig,
    pub llm: LlmConfig,
    pub generators: Vec<GeneratorConfig>,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    #[serde(default)]
    pub selection: SelectionConfig,
    pub learner: LearnerConfig,
    pub eval_every: u64,
    pub feature_dim: usize,
    pub eval_data: EvalDataConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LlmConfig {
    Mock {
        #[serde(default)]
        seed: u64,
    },
    Http {
        base_url: String,
        model: String,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
        #[serde(default = "default_max_retries")]
        max_retries: u32,
    },
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_max_retries() -> u32 {
    3
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub generator_id: String,
    pub kind: GeneratorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Overrides `synthetic.offset_norm` for this mock generator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset_norm: Option<f64>,
    /// Overrides `synthetic.noise_sigma` for this mock generator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<u64>,
}

/// The synthetic world shared by all mock generators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_offset_norm")]
    pub offset_norm: f64,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
}

fn default_offset_norm() -> f64 {
    0.5
}

fn default_noise_sigma() -> f64 {
    0.3
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            offset_norm: default_offset_norm(),
            noise_sigma: default_noise_sigma(),
        }
    }
}

/// Held-out test data for the stream's periodic evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvalDataConfig {
    /// Centroid-plus-noise samples from the synthetic world.
    Synthetic {
        per_concept: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        noise_sigma: Option<f64>,
    },
    /// A features.jsonl file; the `concept` field is the label.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default = "default_coverage_k")]
    pub coverage_k: usize,
    /// JSONL of `{"prediction","label"}` pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<PathBuf>,
    /// JSON array of `{"candidate","references":[...]}`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captions: Option<PathBuf>,
}

fn default_coverage_k() -> usize {
    5
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            coverage_k: default_coverage_k(),
            predictions: None,
            captions: None,
        }
    }
}

/// Output locations. Relative entries live under `workdir`; a relative
/// `workdir` is taken from the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub workdir: PathBuf,
    pub prompts: PathBuf,
    pub features: PathBuf,
    pub coreset: PathBuf,
    pub metrics: PathBuf,
    pub manifest: PathBuf,
    pub report: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            workdir: "gencl-out".into(),
            prompts: "prompts.json".into(),
            features: "features.jsonl".into(),
            coreset: "coreset.json".into(),
            metrics: "metrics.csv".into(),
            manifest: "run_manifest.json".into(),
            report: "eval_report.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedPaths {
    pub workdir: PathBuf,
    pub prompts: PathBuf,
    pub features: PathBuf,
    pub coreset: PathBuf,
    pub metrics: PathBuf,
    pub manifest: PathBuf,
    pub report: PathBuf,
}

#[derive(Debug)]
pub enum ConfigError {
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    Parse {
        pointer: String,
        message: String,
    },
    Invalid {
        pointer: String,
        message: String,
    },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io { path, source } => {
                write!(f, "cannot read {}: {source}", path.display())
            }
            ConfigError::Parse { pointer, message } => {
                write!(f, "parse error at {pointer}: {message}")
            }
            ConfigError::Invalid { pointer, message } => {
                write!(f, "invalid config at {pointer}: {message}")
            }
        }
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    pub fn pointer(&self) -> Option<&str> {
        match self {
            ConfigError::Io { .. } => None,
            ConfigError::Parse { pointer, .. } | ConfigError::Invalid { pointer, .. } => {
                Some(pointer)
            }
        }
    }
}

fn to_pointer(path: &serde_path_to_error::Path) -> String {
    let mut out = String::new();
    for segment in path.iter() {
        use serde_path_to_error::Segment;
        match segment {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{key}")),
            Segment::Enum { variant } => out.push_str(&format!("/{variant}")),
            Segment::Unknown => {}
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: RunConfig =
        serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            pointer: to_pointer(e.path()),
            message: e.inner().to_string(),
        })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

fn invalid(pointer: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        pointer: pointer.into(),
        message: message.into(),
    }
}

fn check_positive(pointer: &str, value: f64) -> Result<(), ConfigError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(invalid(pointer, format!("must be positive, got {value}")))
    }
}

fn check_non_negative(pointer: &str, value: f64) -> Result<(), ConfigError> {
    if value >= 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(invalid(
            pointer,
            format!("must be non-negative, got {value}"),
        ))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.concepts.is_empty() {
            return Err(invalid("/concepts", "at least one concept is required"));
        }
        let mut ids = HashSet::new();
        for (i, c) in self.concepts.iter().enumerate() {
            if c.concept_id.trim().is_empty() {
                return Err(invalid(
                    format!("/concepts/{i}/concept_id"),
                    "must not be empty",
                ));
            }
            if c.name.trim().is_empty() {
                return Err(invalid(format!("/concepts/{i}/name"), "must not be empty"));
            }
            if !ids.insert(&c.concept_id) {
                return Err(invalid(
                    format!("/concepts/{i}/concept_id"),
                    format!("duplicate concept {}", c.concept_id),
                ));
            }
        }

        let h = &self.hirpg;
        if h.branching == 0 {
            return Err(invalid("/hirpg/branching", "must be at least 1"));
        }
        let nodes =
            node_count(h.branching, h.depth).map_err(|e| invalid("/hirpg/depth", e.to_string()))?;
        if h.prompt_budget == 0 || h.prompt_budget > nodes {
            return Err(invalid(
                "/hirpg/prompt_budget",
                format!("must be in 1..={nodes}, got {}", h.prompt_budget),
            ));
        }

        if let LlmConfig::Http {
            base_url, model, ..
        } = &self.llm
        {
            if base_url.trim().is_empty() {
                return Err(invalid("/llm/base_url", "must not be empty"));
            }
            if model.trim().is_empty() {
                return Err(invalid("/llm/model", "must not be empty"));
            }
        }

        if self.generators.is_empty() {
            return Err(invalid("/generators", "at least one generator is required"));
        }
        let mut gids = HashSet::new();
        for (i, g) in self.generators.iter().enumerate() {
            let at = |field: &str| format!("/generators/{i}/{field}");
            if g.generator_id.trim().is_empty() || g.generator_id.contains(':') {
                return Err(invalid(
                    at("generator_id"),
                    "must be non-empty and free of ':'",
                ));
            }
            if !gids.insert(&g.generator_id) {
                return Err(invalid(
                    at("generator_id"),
                    format!("duplicate generator {}", g.generator_id),
                ));
            }
            if g.kind == GeneratorKind::Http
                && g.endpoint.as_deref().is_none_or(|e| e.trim().is_empty())
            {
                return Err(invalid(at("endpoint"), "required for http generators"));
            }
            if let Some(v) = g.offset_norm {
                check_non_negative(&at("offset_norm"), v)?;
            }
            if let Some(v) = g.noise_sigma {
                check_non_negative(&at("noise_sigma"), v)?;
            }
        }
        check_non_negative("/synthetic/offset_norm", self.synthetic.offset_norm)?;
        check_non_negative("/synthetic/noise_sigma", self.synthetic.noise_sigma)?;

        let s = &self.selection;
        check_positive("/selection/tau", s.tau)?;
        if !(0.0..50.0).contains(&s.trunc_percent) {
            return Err(invalid(
                "/selection/trunc_percent",
                format!("must be in [0, 50), got {}", s.trunc_percent),
            ));
        }
        if s.total_quota == Some(0) {
            return Err(invalid("/selection/total_quota", "must be positive"));
        }

        let l = &self.learner;
        check_positive("/learner/learning_rate", l.learning_rate)?;
        if l.batch_size == 0 {
            return Err(invalid("/learner/batch_size", "must be at least 1"));
        }
        check_positive("/learner/iterations_per_sample", l.iterations_per_sample)?;
        if !(0.0..=1.0).contains(&l.replay_fraction) {
            return Err(invalid(
                "/learner/replay_fraction",
                format!("must be in [0, 1], got {}", l.replay_fraction),
            ));
        }

        if self.eval_every == 0 {
            return Err(invalid("/eval_every", "must be at least 1"));
        }
        if self.feature_dim == 0 {
            return Err(invalid("/feature_dim", "must be at least 1"));
        }
        match &self.eval_data {
            EvalDataConfig::Synthetic {
                per_concept,
                noise_sigma,
            } => {
                if *per_concept == 0 {
                    return Err(invalid("/eval_data/per_concept", "must be at least 1"));
                }
                if let Some(v) = noise_sigma {
                    check_non_negative("/eval_data/noise_sigma", *v)?;
                }
            }
            EvalDataConfig::File { path } => {
                if path.as_os_str().is_empty() {
                    return Err(invalid("/eval_data/path", "must not be empty"));
                }
            }
        }
        if self.evaluation.coverage_k == 0 {
            return Err(invalid("/evaluation/coverage_k", "must be at least 1"));
        }
        Ok(())
    }

    /// Replaces every seed in the configuration with `seed`.
    pub fn apply_seed(&mut self, seed: u64) {
        self.hirpg.seed = seed;
        self.selection.seed = seed;
        self.learner.seed = seed;
        self.synthetic.seed = seed;
        if let LlmConfig::Mock { seed: s } = &mut self.llm {
            *s = seed;
        }
    }

    pub fn resolve_paths(
        &self,
        config_dir: &Path,
        workdir_override: Option<&Path>,
    ) -> ResolvedPaths {
        let workdir = match workdir_override {
            Some(dir) => dir.to_path_buf(),
            None if self.paths.workdir.is_absolute() => self.paths.workdir.clone(),
            None => config_dir.join(&self.paths.workdir),
        };
        let under = |p: &PathBuf| {
            if p.is_absolute() {
                p.clone()
            } else {
                workdir.join(p)
            }
        };
        ResolvedPaths {
            prompts: under(&self.paths.prompts),
            features: under(&self.paths.features),
            coreset: under(&self.paths.coreset),
            metrics: under(&self.paths.metrics),
            manifest: under(&self.paths.manifest),
            report: under(&self.paths.report),
            workdir,
        }
    }

    pub fn world_model(&self) -> SyntheticFeatureModel {
        SyntheticFeatureModel {
            dim: self.feature_dim,
            offset_norm: self.synthetic.offset_norm,
            noise_sigma: self.synthetic.noise_sigma,
        }
    }

    pub fn build_llm(&self) -> Box<dyn ChatBackend> {
        match &self.llm {
            LlmConfig::Mock { seed } => Box::new(MockChat::new(*seed)),
            LlmConfig::Http {
                base_url,
                model,
                timeout_secs,
                max_retries,
            } => {
                let mut cfg = HttpChatConfig::new(base_url.clone(), model.clone());
                cfg.timeout = Duration::from_secs(*timeout_secs);
                cfg.max_retries = *max_retries;
                Box::new(HttpChat::new(cfg))
            }
        }
    }

    pub fn build_generators(&self) -> Vec<Box<dyn Generator>> {
        let world = self.world_model();
        self.generators
            .iter()
            .map(|g| -> Box<dyn Generator> {
                match g.kind {
                    GeneratorKind::Mock => {
                        let model = SyntheticFeatureModel {
                            offset_norm: g.offset_norm.unwrap_or(world.offset_norm),
                            noise_sigma: g.noise_sigma.unwrap_or(world.noise_sigma),
                            ..world
                        };
                        Box::new(MockGenerator::new(
                            g.generator_id.clone(),
                            self.synthetic.seed,
                            model,
                        ))
                    }
                    GeneratorKind::Http => Box::new(HttpGenerator::new(
                        g.generator_id.clone(),
                        g.endpoint.clone().unwrap_or_default(),
                        Duration::from_secs(g.timeout_secs.unwrap_or(default_timeout_secs())),
                    )),
                }
            })
            .collect()
    }
}
