use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::dataset::sha256_hex;
use crate::gateway::mock::MockProvider;
use crate::gateway::openai::{OpenAiConfig, OpenAiProvider};
use crate::gateway::Provider;
use crate::partition::PartitionOptions;
use crate::synth::SynthOptions;
use crate::templates::TemplateSet;
use crate::tree::PartitionConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    /// Any OpenAI-compatible HTTP endpoint.
    #[default]
    Openai,
    MockUniform,
    MockSubspace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: String,
    pub model: String,
    pub embedding_model: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
    /// Values per dimension produced by the mock providers.
    pub mock_branching: usize,
    pub mock_seed: u64,
    /// Append every provider attempt to `requests.jsonl` in the run directory.
    pub request_log: bool,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Openai,
            endpoint: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            embedding_model: "text-embedding-3-small".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 120,
            mock_branching: 3,
            mock_seed: 0,
            request_log: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub pivot_temperature: f64,
    pub split_temperature: f64,
    pub sample_temperature: f64,
    pub answer_temperature: f64,
    pub max_tokens: u32,
    pub baseline_batch: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        let p = PartitionOptions::default();
        let s = SynthOptions::default();
        Self {
            pivot_temperature: p.pivot_temperature,
            split_temperature: p.split_temperature,
            sample_temperature: s.temperature,
            answer_temperature: s.answer_temperature,
            max_tokens: s.max_tokens,
            baseline_batch: s.baseline_batch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub description: String,
    /// Bundled template set name (`gsm`, `math`, `code`, `tom`) or a directory.
    #[serde(default = "default_templates")]
    pub templates: String,
}

fn default_templates() -> String {
    "gsm".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Parent of the run directory.
    pub dir: PathBuf,
    pub run_id: Option<String>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs"), run_id: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub task: TaskConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub provider: ProviderConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub output: OutputConfig,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let config: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.task.description.trim().is_empty() {
            return Err(PipelineError::Config("task.description is empty".into()));
        }
        self.partition.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        let s = &self.sampling;
        for (name, t) in [
            ("pivot_temperature", s.pivot_temperature),
            ("split_temperature", s.split_temperature),
            ("sample_temperature", s.sample_temperature),
            ("answer_temperature", s.answer_temperature),
        ] {
            if !(0.0..=2.0).contains(&t) {
                return Err(PipelineError::Config(format!("sampling.{name} must lie in [0, 2], got {t}")));
            }
        }
        if s.max_tokens == 0 || s.baseline_batch == 0 {
            return Err(PipelineError::Config("sampling.max_tokens and sampling.baseline_batch must be positive".into()));
        }
        if self.provider.kind != ProviderKind::Openai && self.provider.mock_branching == 0 {
            return Err(PipelineError::Config("provider.mock_branching must be positive".into()));
        }
        if let Some(id) = &self.output.run_id {
            if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
                return Err(PipelineError::Config(format!("invalid run id `{id}`")));
            }
        }
        Ok(())
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// Everything that determines outputs; the output location is excluded.
    pub fn fingerprint(&self) -> String {
        let value = serde_json::json!({
            "task": self.task,
            "partition": self.partition,
            "provider": self.provider,
            "sampling": self.sampling,
        });
        sha256_hex(value.to_string().as_bytes())
    }

    pub fn run_id(&self) -> String {
        match &self.output.run_id {
            Some(id) => id.clone(),
            None => format!("run-{}", &self.fingerprint()[..12]),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolve(&self.output.dir).join(self.run_id())
    }

    pub fn templates(&self) -> Result<TemplateSet, PipelineError> {
        let spec = &self.task.templates;
        let local = self.resolve(Path::new(spec));
        let result = if local.is_dir() { TemplateSet::load_dir(&local) } else { TemplateSet::resolve(spec) };
        result.map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn provider(&self) -> Result<Arc<dyn Provider>, PipelineError> {
        let p = &self.provider;
        Ok(match p.kind {
            ProviderKind::MockUniform => Arc::new(MockProvider::uniform(p.mock_branching)),
            ProviderKind::MockSubspace => Arc::new(MockProvider::subspace(p.mock_branching, p.mock_seed)),
            ProviderKind::Openai => {
                let api_key = std::env::var(&p.api_key_env).ok().filter(|k| !k.is_empty());
                if api_key.is_none() {
                    log::warn!("{} is not set; sending requests without an API key", p.api_key_env);
                }
                let provider = OpenAiProvider::new(OpenAiConfig {
                    endpoint: p.endpoint.clone(),
                    model: p.model.clone(),
                    embedding_model: p.embedding_model.clone(),
                    api_key,
                    timeout: Duration::from_secs(p.timeout_secs),
                })
                .map_err(|e| PipelineError::Config(e.to_string()))?;
                Arc::new(provider)
            }
        })
    }

    pub fn partition_options(&self) -> PartitionOptions {
        PartitionOptions {
            pivot_temperature: self.sampling.pivot_temperature,
            split_temperature: self.sampling.split_temperature,
            max_tokens: self.sampling.max_tokens,
            ..PartitionOptions::default()
        }
    }

    pub fn synth_options(&self) -> SynthOptions {
        SynthOptions {
            temperature: self.sampling.sample_temperature,
            answer_temperature: self.sampling.answer_temperature,
            max_tokens: self.sampling.max_tokens,
            baseline_batch: self.sampling.baseline_batch,
        }
    }
}
