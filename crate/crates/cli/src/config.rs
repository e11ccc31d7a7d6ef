//! Run configuration: one JSON document per run, layered as
//! preset or config file, then `HEADLAB_*` environment overrides, then
//! command-line flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use clap::ValueEnum;
use headlab_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::presets;

pub const ENV_PREFIX: &str = "HEADLAB_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    DeltaFit,
    Allocate,
    Tradeoff,
    JacobianScan,
    ScoreRange,
    LogitsNorm,
    Compress,
    Train,
    Construct,
    GenData,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::DeltaFit => "delta-fit",
            Command::Allocate => "allocate",
            Command::Tradeoff => "tradeoff",
            Command::JacobianScan => "jacobian-scan",
            Command::ScoreRange => "score-range",
            Command::LogitsNorm => "logits-norm",
            Command::Compress => "compress",
            Command::Train => "train",
            Command::Construct => "construct",
            Command::GenData => "gen-data",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("headlab-out")
}

fn default_threads() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Command,
    /// Command-specific parameters; missing keys take their defaults.
    #[serde(default = "empty_object")]
    pub params: Value,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub format: Format,
    #[serde(default = "default_threads")]
    pub threads: usize,
}

fn empty_object() -> Value {
    Value::Object(Map::new())
}

impl ExperimentConfig {
    pub fn new(command: Command) -> Self {
        ExperimentConfig {
            command,
            params: empty_object(),
            seed: 0,
            out_dir: default_out_dir(),
            format: Format::Csv,
            threads: 1,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::config("threads must be at least 1"));
        }
        if !(self.params.is_object() || self.params.is_null()) {
            return Err(Error::config("params must be a JSON object"));
        }
        Ok(())
    }

    /// Parses `params` into the command's parameter type, rejecting
    /// unknown keys.
    pub fn params<T: DeserializeOwned>(&self) -> Result<T> {
        let v = if self.params.is_null() { empty_object() } else { self.params.clone() };
        serde_json::from_value(v).map_err(|e| Error::config(format!("{} params: {e}", self.command)))
    }

    /// SHA-256 of the canonical JSON of every field that affects results
    /// (`out_dir` and `threads` are excluded). Object keys are sorted, so
    /// the hash does not depend on key order in the source document.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("out_dir");
            m.remove("threads");
        }
        let canonical = serde_json::to_string(&v).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Flag values that override the layered document.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub format: Option<Format>,
    pub threads: Option<usize>,
}

/// Where the base document comes from.
#[derive(Debug, Clone)]
pub enum Source {
    Default,
    Preset(String),
    File(PathBuf),
}

/// Builds the effective configuration for `command`.
pub fn resolve(
    command: Command,
    source: &Source,
    env: &BTreeMap<String, String>,
    flags: &Overrides,
) -> Result<ExperimentConfig> {
    let mut doc = match source {
        Source::Default => serde_json::json!({ "command": command }),
        Source::Preset(name) => presets::params_document(name, command)?,
        Source::File(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Io(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?
        }
    };
    let obj = doc
        .as_object_mut()
        .ok_or_else(|| Error::config("config must be a JSON object"))?;
    obj.entry("command").or_insert_with(|| serde_json::json!(command));
    apply_env(obj, env);
    if let Some(s) = flags.seed {
        obj.insert("seed".into(), s.into());
    }
    if let Some(p) = &flags.out_dir {
        obj.insert("out_dir".into(), p.to_string_lossy().into_owned().into());
    }
    if let Some(f) = flags.format {
        obj.insert("format".into(), serde_json::to_value(f).expect("format serializes"));
    }
    if let Some(t) = flags.threads {
        obj.insert("threads".into(), t.into());
    }
    let cfg: ExperimentConfig = serde_json::from_value(doc).map_err(|e| Error::config(e.to_string()))?;
    if cfg.command != command {
        return Err(Error::config(format!(
            "config is for `{}` but `{command}` was invoked",
            cfg.command
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `HEADLAB_SEED=7` sets the top-level `seed` key. Values are read as JSON
/// when they parse, as plain strings otherwise.
fn apply_env(obj: &mut Map<String, Value>, env: &BTreeMap<String, String>) {
    for (k, raw) in env {
        let Some(key) = k.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
        obj.insert(key.to_ascii_lowercase(), value);
    }
}

/// The process environment restricted to `HEADLAB_*` variables.
pub fn process_env() -> BTreeMap<String, String> {
    std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect()
}
