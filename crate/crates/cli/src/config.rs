use std::path::{Path, PathBuf};

use briefx_core::corpus::{CleanConfig, ColumnMap, IngestMode};
use briefx_core::eval::ReportFormat;
use briefx_core::inferclient::EndpointConfig;
use briefx_core::promptkit::ManifestOverrides;
use serde::Deserialize;

use crate::CliError;

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_WORK_DIR: &str = "work";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub input_csv: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    /// Second annotator's labels, for agreement.
    pub gold_b: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub exclude_ids: Option<PathBuf>,
    pub work_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleanSection {
    pub min_length: Option<usize>,
    pub columns: Option<ColumnMap>,
    pub ingest_mode: Option<IngestMode>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointSection {
    pub base_url: Option<String>,
    pub model_name: Option<String>,
    pub api_key_env: Option<String>,
    pub temperature: Option<f64>,
    pub max_output_tokens: Option<u32>,
    pub stream: Option<bool>,
    pub timeout_secs: Option<f64>,
    pub max_retries: Option<u32>,
    pub backoff_base_secs: Option<f64>,
    pub backoff_max_secs: Option<f64>,
    pub max_parallel_requests: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldSection {
    pub k: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    /// Built-in template language when no template file is given: "en" or "zh".
    pub language: Option<String>,
    pub few_shot: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub tokenizer: Option<String>,
    pub format: Option<String>,
}

/// The declarative run configuration. Command-line flags override it.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub clean: CleanSection,
    pub endpoint: EndpointSection,
    pub folds: FoldSection,
    pub prompt: PromptSection,
    pub eval: EvalSection,
    pub manifest: ManifestOverrides,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn clean_config(&self, min_length: Option<usize>) -> CleanConfig {
        let mut c = CleanConfig::default();
        if let Some(n) = min_length.or(self.clean.min_length) {
            c.min_length = n;
        }
        c
    }

    pub fn report_format(&self, flag: Option<&str>) -> Result<ReportFormat, CliError> {
        let name = flag.or(self.eval.format.as_deref()).unwrap_or("markdown");
        ReportFormat::parse(name).ok_or_else(|| CliError::Usage(format!("unknown report format {name:?}")))
    }
}

/// Endpoint flags; each one overrides the config file entry.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct EndpointFlags {
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the api key.
    #[arg(long)]
    pub api_key_env: Option<String>,
    #[arg(long)]
    pub max_parallel: Option<usize>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    #[arg(long)]
    pub timeout_secs: Option<f64>,
    #[arg(long)]
    pub backoff_base_secs: Option<f64>,
    #[arg(long)]
    pub max_output_tokens: Option<u32>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Request streamed completions.
    #[arg(long)]
    pub stream: bool,
}

impl EndpointFlags {
    pub fn resolve(&self, section: &EndpointSection) -> Result<EndpointConfig, CliError> {
        let base_url = self
            .base_url
            .clone()
            .or_else(|| section.base_url.clone())
            .ok_or_else(|| CliError::Usage("no endpoint base_url (flag --base-url or [endpoint] base_url)".into()))?;
        let model = self
            .model
            .clone()
            .or_else(|| section.model_name.clone())
            .ok_or_else(|| CliError::Usage("no model name (flag --model or [endpoint] model_name)".into()))?;
        let mut c = EndpointConfig::new(base_url, model);
        c.api_key_env = self.api_key_env.clone().or_else(|| section.api_key_env.clone());
        macro_rules! pick {
            ($field:ident, $flag:expr) => {
                if let Some(v) = $flag.or(section.$field) {
                    c.$field = v;
                }
            };
        }
        pick!(temperature, self.temperature);
        pick!(max_output_tokens, self.max_output_tokens);
        pick!(timeout_secs, self.timeout_secs);
        pick!(max_retries, self.max_retries);
        pick!(backoff_base_secs, self.backoff_base_secs);
        pick!(backoff_max_secs, None);
        pick!(max_parallel_requests, self.max_parallel);
        c.stream = self.stream || section.stream.unwrap_or(false);
        c.check().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(c)
    }
}
