use std::path::Path;

use ctxcite_core::decoder::DecodeConfig;
use ctxcite_core::trainer::TrainConfig;
use ctxcite_core::BackboneConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_examples: usize,
    pub n_heldout: usize,
    pub n_docs: usize,
    pub facts_per_doc: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_examples: 2000,
            n_heldout: 200,
            n_docs: 4,
            facts_per_doc: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2] }
    }
}

/// Everything a command can be configured with. A top-level `seed`, when
/// present, overrides the seeds of every section.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub corpus: CorpusConfig,
    pub model: BackboneConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    /// File values over defaults, then `key=value` overrides (dotted keys,
    /// TOML values; bare words are taken as strings), then `seed`. A `.json`
    /// file may be a run manifest, whose resolved config is reused.
    pub fn resolve(file: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut table = toml::Table::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let bad = |e: String| CliError::Usage(format!("{}: {e}", path.display()));
            table = if path.extension().is_some_and(|x| x == "json") {
                let mut v: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
                if let Some(inner) = v.get_mut("config") {
                    v = inner.take();
                }
                serde_json::from_value(v).map_err(|e| bad(e.to_string()))?
            } else {
                text.parse::<toml::Table>().map_err(|e| bad(e.to_string()))?
            };
        }
        for set in sets {
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{set}`")))?;
            insert_dotted(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        let mut config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("invalid configuration: {}", e.message())))?;
        if seed.is_some() {
            config.seed = seed;
        }
        if let Some(s) = config.seed {
            config.corpus.seed = s;
            config.model.seed = s;
            config.train.seed = s;
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: ctxcite_core::Error| CliError::Usage(e.to_string());
        self.model.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.decode.validate().map_err(usage)?;
        let c = &self.corpus;
        let limit = self.model.n_citation;
        if c.n_docs > limit {
            return Err(CliError::Usage(format!(
                "n_docs {} exceeds the citation-token limit N_max = {limit}",
                c.n_docs
            )));
        }
        if c.n_docs == 0 || c.facts_per_doc == 0 || c.n_examples == 0 {
            return Err(CliError::Usage(
                "n_docs, facts_per_doc and n_examples must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn insert_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| CliError::Usage(format!("empty key in `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
