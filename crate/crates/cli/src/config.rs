//! Effective configuration: defaults, then the `--config` file, then flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use s2st::corpus::{ToyCorpusConfig, DEFAULT_SIMILARITY_THRESHOLD};
use s2st::pipeline::PipelineConfig;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// Root seed; every component seed is derived from it.
    pub seed: u64,
    pub corpus: ToyCorpusConfig,
    /// Held-out pairs written by `gen-corpus`.
    pub val_pairs: usize,
    pub similarity_threshold: f64,
    pub pipeline: PipelineConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: ToyCorpusConfig::default(),
            val_pairs: 50,
            similarity_threshold: DEFAULT_SIMILARITY_THRESHOLD,
            pipeline: PipelineConfig::toy(0),
        }
    }
}

/// Overlays `patch` on `base`. Keys absent from `base` are rejected so
/// typos fail loudly; tagged enums (objects with a `kind` key) are
/// replaced whole.
fn merge(base: &mut Value, patch: Value, path: &str) -> CliResult<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) if !b.contains_key("kind") => {
            for (k, v) in p {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(&k).ok_or_else(|| CliError::usage(format!("unknown config key `{sub}`")))?;
                merge(slot, v, &sub)?;
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// `a.b.c=value` as a one-key nested object; `value` is read as a TOML
/// value when it parses as one, else as a bare string.
pub fn parse_assignment(s: &str) -> CliResult<Value> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("expected key=value, got `{s}`")))?;
    let parsed: Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => serde_json::to_value(t.remove("v").expect("key v")).expect("toml to json"),
        Err(_) => Value::String(raw.to_string()),
    };
    let mut v = parsed;
    for part in key.trim().split('.').rev() {
        if part.is_empty() {
            return Err(CliError::usage(format!("empty key segment in `{key}`")));
        }
        v = Value::Object([(part.to_string(), v)].into_iter().collect());
    }
    Ok(v)
}

pub fn load(file: Option<&Path>, assignments: &[String], seed: Option<u64>) -> CliResult<CliConfig> {
    let mut v = serde_json::to_value(CliConfig::default()).expect("serializable");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let table: toml::Table = toml::from_str(&text)
            .map_err(|e| CliError::usage(format!("config file {}: {e}", path.display())))?;
        merge(&mut v, serde_json::to_value(table).expect("toml to json"), "")?;
    }
    for a in assignments {
        merge(&mut v, parse_assignment(a)?, "")?;
    }
    let mut cfg: CliConfig =
        serde_json::from_value(v).map_err(|e| CliError::usage(format!("invalid configuration: {e}")))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.pipeline.set_seed(cfg.seed);
    Ok(cfg)
}
