//! Layered configuration: built-in defaults, then a TOML file, then
//! `HALO_*` environment variables, then command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use halo_core::eval::{Split, DEFAULT_CHECKPOINT_EVERY, DEFAULT_PARALLELISM};
use halo_core::expansion::ExpansionConfig;
use halo_core::gateway::ProviderConfig;
use halo_core::mmr::MmrConfig;
use halo_core::retrieval::{PubmedConfig, DEFAULT_MAX_CHUNK_CHARS, DEFAULT_PER_QUERY_MAX};

pub const ENV_PREFIX: &str = "HALO_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Hash,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingSettings {
    pub kind: EmbedderKind,
    pub endpoint: String,
    pub model: String,
    pub dim: usize,
    pub auth_token_env_var: String,
    pub seed: u64,
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Hash,
            endpoint: "https://api.openai.com/v1/embeddings".into(),
            model: "text-embedding-3-small".into(),
            dim: halo_core::embedding::DEFAULT_HASH_DIM,
            auth_token_env_var: "OPENAI_API_KEY".into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PubmedSettings {
    pub enabled: bool,
    #[serde(flatten)]
    pub client: PubmedConfig,
}

impl Default for PubmedSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            client: PubmedConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalSettings {
    pub per_query_max: usize,
    pub max_chunk_chars: usize,
    pub chunk_overlap_chars: usize,
    /// JSON-lines corpus of `{id, title, body}` records.
    pub corpus: Option<PathBuf>,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        Self {
            per_query_max: DEFAULT_PER_QUERY_MAX,
            max_chunk_chars: DEFAULT_MAX_CHUNK_CHARS,
            chunk_overlap_chars: 0,
            corpus: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnswerSettings {
    pub model_id: String,
    pub max_output_tokens: u32,
}

impl Default for AnswerSettings {
    fn default() -> Self {
        Self {
            model_id: ExpansionConfig::default().model_id,
            max_output_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptSettings {
    pub fewshots: Option<PathBuf>,
    /// Directory with optional `system.txt`, `cot.txt`, `final.txt`.
    pub template_dir: Option<PathBuf>,
    /// Expansion prompt template file, replacing the built-in one.
    pub expansion_template: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub split: Split,
    pub parallelism: usize,
    pub checkpoint_every: usize,
    pub output_dir: PathBuf,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            split: Split::Dev,
            parallelism: DEFAULT_PARALLELISM,
            checkpoint_every: DEFAULT_CHECKPOINT_EVERY,
            output_dir: "halo-eval".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpansionSettings {
    pub target_n: usize,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub model_id: String,
}

impl Default for ExpansionSettings {
    fn default() -> Self {
        let d = ExpansionConfig::default();
        Self {
            target_n: d.target_n,
            temperature: d.temperature,
            max_output_tokens: d.max_output_tokens,
            model_id: d.model_id,
        }
    }
}

/// The fully resolved configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CliConfig {
    pub offline: bool,
    pub cache_dir: PathBuf,
    /// Canned chat responses; replaces the live provider.
    pub mock: Option<PathBuf>,
    /// Recorded HTTP exchanges; replaces the network for every client.
    pub replay: Option<PathBuf>,
    pub provider: ProviderConfig,
    pub embedding: EmbeddingSettings,
    pub pubmed: PubmedSettings,
    pub retrieval: RetrievalSettings,
    pub expansion: ExpansionSettings,
    pub mmr: MmrConfig,
    pub answer: AnswerSettings,
    pub prompts: PromptSettings,
    pub eval: EvalSettings,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            offline: false,
            cache_dir: ".halo-cache".into(),
            mock: None,
            replay: None,
            provider: ProviderConfig::default(),
            embedding: EmbeddingSettings::default(),
            pubmed: PubmedSettings::default(),
            retrieval: RetrievalSettings::default(),
            expansion: ExpansionSettings::default(),
            mmr: MmrConfig::default(),
            answer: AnswerSettings::default(),
            prompts: PromptSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Values are read as TOML when they parse (`0.5`, `true`, `["a"]`),
/// otherwise as plain strings.
fn env_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// `HALO_MMR__LAMBDA=0.5` becomes `{mmr = {lambda = 0.5}}`.
pub fn env_layer(env: &BTreeMap<String, String>) -> Table {
    let mut out = Table::new();
    for (k, v) in env {
        let Some(rest) = k.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let path: Vec<String> = rest.split("__").map(str::to_ascii_lowercase).collect();
        if path.iter().any(String::is_empty) {
            continue;
        }
        let mut layer = Table::new();
        let mut cursor = &mut layer;
        for seg in &path[..path.len() - 1] {
            cursor = cursor
                .entry(seg.clone())
                .or_insert_with(|| Value::Table(Table::new()))
                .as_table_mut()
                .expect("fresh table");
        }
        cursor.insert(path[path.len() - 1].clone(), env_value(v));
        merge(&mut out, layer);
    }
    out
}

/// Sets `a.b.c = value` inside a table, creating intermediate tables.
pub fn set_path(t: &mut Table, dotted: &str, value: Value) {
    let mut layer = Table::new();
    let parts: Vec<&str> = dotted.split('.').collect();
    let mut cursor = &mut layer;
    for seg in &parts[..parts.len() - 1] {
        cursor = cursor
            .entry(seg.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .expect("fresh table");
    }
    cursor.insert(parts[parts.len() - 1].to_string(), value);
    merge(t, layer);
}

pub fn path_value(p: &Path) -> Value {
    Value::String(p.display().to_string())
}

pub fn resolve(
    file: Option<&Path>,
    env: &BTreeMap<String, String>,
    flags: Table,
) -> Result<CliConfig, String> {
    let mut merged = Table::try_from(CliConfig::default()).map_err(|e| e.to_string())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let t: Table = text
            .parse()
            .map_err(|e| format!("config {} is not valid TOML: {e}", path.display()))?;
        merge(&mut merged, t);
    }
    merge(&mut merged, env_layer(env));
    merge(&mut merged, flags);
    Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| format!("invalid configuration: {}", e.message()))
}

pub fn to_toml(cfg: &CliConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serializes to TOML")
}
