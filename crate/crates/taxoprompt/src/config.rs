//! Declarative pipeline configuration.
//!
//! One TOML file holds the run hyperparameters, the base prompt, dataset
//! paths, the output directory, execution knobs, and one backend section per
//! role. Relative paths are resolved against the config file's directory.
//!
//! ```toml
//! [run]
//! k_collection_runs = 5
//! batch_size = 6
//! max_categories = 10
//! guidance_style = "detailed"
//! domain_description = "competition mathematics"
//!
//! [prompt]
//! base = "Please think step by step and then solve the task."
//!
//! [dataset]
//! validation = "validation.jsonl"
//! test = "test.jsonl"
//!
//! [output]
//! dir = "out"
//!
//! [backends.backbone]
//! kind = "http"
//! base_url = "https://api.openai.com/v1"
//! api_key_env_var = "OPENAI_API_KEY"
//! model = "gpt-4.1-mini"
//!
//! [backends.optimizer]
//! kind = "http"
//! base_url = "https://api.openai.com/v1"
//! api_key_env_var = "OPENAI_API_KEY"
//! model = "gpt-4.1"
//! ```
//!
//! A backend with `kind = "mock"` takes `script = "steps.jsonl"` instead,
//! one scripted step per line.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use crate::collection::ExecutionOptions;
use crate::gateway::{BackendConfig, Endpoint, MockScript};
use crate::model::{GuidanceStyle, RunConfig};

/// Default sampling temperatures per role. Local defaults, not claims about
/// any published setup.
pub const DEFAULT_BACKBONE_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_OPTIMIZER_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_JUDGE_TEMPERATURE: f64 = 0.0;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config `{path}`: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse config `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    k_collection_runs: Option<u32>,
    batch_size: Option<usize>,
    max_categories: Option<usize>,
    guidance_style: Option<GuidanceStyle>,
    min_problem_count: Option<usize>,
    domain_description: Option<String>,
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptSection {
    base: Option<String>,
    base_file: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetSection {
    validation: PathBuf,
    test: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputSection {
    dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExecutionSection {
    max_parallel: Option<usize>,
    max_error_fraction: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BackendSection {
    kind: String,
    base_url: Option<String>,
    api_key_env_var: Option<String>,
    script: Option<PathBuf>,
    model: Option<String>,
    temperature: Option<f64>,
    max_output_tokens: Option<u32>,
    timeout_secs: Option<u64>,
    max_retries: Option<u32>,
    retry_base_delay_ms: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BackendsSection {
    backbone: BackendSection,
    optimizer: BackendSection,
    judge: Option<BackendSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileRoot {
    #[serde(default)]
    run: RunSection,
    prompt: PromptSection,
    dataset: DatasetSection,
    #[serde(default)]
    output: OutputSection,
    #[serde(default)]
    execution: ExecutionSection,
    backends: BackendsSection,
}

/// Fully resolved pipeline configuration.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub run: RunConfig,
    pub base_prompt: String,
    pub validation_path: PathBuf,
    pub test_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub execution: ExecutionOptions,
    pub backbone: Endpoint,
    pub optimizer: Endpoint,
    pub judge: Option<Endpoint>,
}

fn resolve_path(base_dir: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base_dir.join(path)
    }
}

fn resolve_backend(
    section: &BackendSection,
    role: &str,
    default_temperature: f64,
    base_dir: &Path,
) -> Result<Endpoint, ConfigError> {
    let mut backend = match section.kind.as_str() {
        "http" => {
            let base_url = section.base_url.clone().ok_or_else(|| {
                ConfigError::Invalid(format!("backend `{role}`: kind=http requires base_url"))
            })?;
            let env_var = section.api_key_env_var.clone().ok_or_else(|| {
                ConfigError::Invalid(format!(
                    "backend `{role}`: kind=http requires api_key_env_var"
                ))
            })?;
            BackendConfig::http(base_url, env_var)
        }
        "mock" => {
            let script_path = section.script.as_ref().ok_or_else(|| {
                ConfigError::Invalid(format!("backend `{role}`: kind=mock requires script"))
            })?;
            let script_path = resolve_path(base_dir, script_path);
            let text = std::fs::read_to_string(&script_path).map_err(|source| ConfigError::Io {
                path: script_path.display().to_string(),
                source,
            })?;
            let script = MockScript::from_jsonl(&text)
                .map_err(|e| ConfigError::Invalid(format!("backend `{role}`: bad script: {e}")))?;
            BackendConfig::mock(script)
        }
        other => {
            return Err(ConfigError::Invalid(format!(
                "backend `{role}`: unknown kind `{other}` (expected `http` or `mock`)"
            )))
        }
    };
    if let Some(secs) = section.timeout_secs {
        backend.timeout = Duration::from_secs(secs);
    }
    if let Some(retries) = section.max_retries {
        backend.max_retries = retries;
    }
    if let Some(ms) = section.retry_base_delay_ms {
        backend.retry_base_delay = Duration::from_millis(ms);
    }

    let model = match (&section.model, section.kind.as_str()) {
        (Some(model), _) => model.clone(),
        (None, "mock") => "mock".to_string(),
        (None, _) => {
            return Err(ConfigError::Invalid(format!(
                "backend `{role}`: kind=http requires model"
            )))
        }
    };
    let mut endpoint = Endpoint::new(
        backend,
        model,
        section.temperature.unwrap_or(default_temperature),
    );
    endpoint.max_output_tokens = section.max_output_tokens;
    Ok(endpoint)
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml(&text, base_dir).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    /// Parse from TOML text; relative paths resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let root: FileRoot = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: "<config>".to_string(),
            message: e.to_string(),
        })?;

        let defaults = RunConfig::default();
        let run = RunConfig {
            k_collection_runs: root
                .run
                .k_collection_runs
                .unwrap_or(defaults.k_collection_runs),
            batch_size: root.run.batch_size.unwrap_or(defaults.batch_size),
            max_categories: root.run.max_categories.unwrap_or(defaults.max_categories),
            guidance_style: root.run.guidance_style.unwrap_or(defaults.guidance_style),
            min_problem_count: root
                .run
                .min_problem_count
                .unwrap_or(defaults.min_problem_count),
            domain_description: root
                .run
                .domain_description
                .unwrap_or_else(|| defaults.domain_description.clone()),
            seed: root.run.seed.unwrap_or(defaults.seed),
        };
        run.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;

        let base_prompt = match (&root.prompt.base, &root.prompt.base_file) {
            (Some(base), None) => base.clone(),
            (None, Some(file)) => {
                let path = resolve_path(base_dir, file);
                std::fs::read_to_string(&path).map_err(|source| ConfigError::Io {
                    path: path.display().to_string(),
                    source,
                })?
            }
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid(
                    "prompt: set either `base` or `base_file`, not both".into(),
                ))
            }
            (None, None) => {
                return Err(ConfigError::Invalid(
                    "prompt: one of `base` or `base_file` is required".into(),
                ))
            }
        };
        if base_prompt.is_empty() {
            return Err(ConfigError::Invalid("prompt: base prompt is empty".into()));
        }

        let execution = ExecutionOptions {
            max_parallel: root.execution.max_parallel.unwrap_or(1).max(1),
            max_error_fraction: root.execution.max_error_fraction.unwrap_or(0.2),
        };
        if !(0.0..=1.0).contains(&execution.max_error_fraction) {
            return Err(ConfigError::Invalid(
                "execution: max_error_fraction must be within [0, 1]".into(),
            ));
        }

        let backbone = resolve_backend(
            &root.backends.backbone,
            "backbone",
            DEFAULT_BACKBONE_TEMPERATURE,
            base_dir,
        )?;
        let optimizer = resolve_backend(
            &root.backends.optimizer,
            "optimizer",
            DEFAULT_OPTIMIZER_TEMPERATURE,
            base_dir,
        )?;
        let judge = root
            .backends
            .judge
            .as_ref()
            .map(|section| resolve_backend(section, "judge", DEFAULT_JUDGE_TEMPERATURE, base_dir))
            .transpose()?;

        Ok(Self {
            run,
            base_prompt,
            validation_path: resolve_path(base_dir, &root.dataset.validation),
            test_path: root
                .dataset
                .test
                .as_ref()
                .map(|p| resolve_path(base_dir, p)),
            out_dir: resolve_path(
                base_dir,
                root.output.dir.as_deref().unwrap_or(Path::new("out")),
            ),
            execution,
            backbone,
            optimizer,
            judge,
        })
    }
}
