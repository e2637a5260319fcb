//! Run configuration: one strict JSON document plus dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agent::{AgentKind, TrainConfig};
use crate::env::{EnvConfig, TrafficPattern};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::explainer::ExplainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub agent: AgentKind,
    pub out: PathBuf,
    pub env: EnvConfig,
    /// `"a"`, `"b"` or a full pattern object.
    pub traffic: TrafficPattern,
    pub train: TrainConfig,
    pub explain: ExplainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            agent: AgentKind::GnnReinforce,
            out: PathBuf::from("out"),
            env: EnvConfig::default(),
            traffic: TrafficPattern::default_b(),
            train: TrainConfig::default(),
            explain: ExplainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn preset(name: &str) -> Option<TrafficPattern> {
    match name.to_ascii_lowercase().as_str() {
        "a" | "poisson_a" => Some(TrafficPattern::default_a()),
        "b" | "periodic_b" => Some(TrafficPattern::default_b()),
        _ => None,
    }
}

fn expand_traffic_preset(doc: &mut Value) -> Result<()> {
    if let Some(Value::String(name)) = doc.get("traffic") {
        let p = preset(name).ok_or_else(|| Error::Config(format!("unknown traffic preset `{name}` (expected a or b)")))?;
        doc["traffic"] = serde_json::to_value(p).expect("pattern serialises");
    }
    Ok(())
}

/// Parses an override value as JSON, falling back to a bare string.
fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn apply_override(doc: &mut Value, path: &str, raw: &str) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed override path `{path}`")));
    }
    if keys[0] == "traffic" && keys.len() > 1 {
        // A nested override needs an object to land in: expand a preset
        // given earlier, or start from the default pattern.
        expand_traffic_preset(doc)?;
        if doc.get("traffic").is_none() {
            doc["traffic"] = serde_json::to_value(TrafficPattern::default_b()).expect("pattern serialises");
        }
    }
    let mut node = doc;
    for key in &keys[..keys.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{path}`: `{key}` is not inside an object")))?;
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("override `{path}` does not address an object field")))?;
    obj.insert(keys[keys.len() - 1].to_string(), override_value(raw));
    Ok(())
}

impl RunConfig {
    /// Parses a JSON document strictly, so unknown keys are reported with
    /// their line and column.
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if matches!(doc.get("traffic"), Some(Value::String(_))) {
            // Presets are expanded on the value tree, which has no positions.
            return RunConfig::from_value(doc);
        }
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_value(mut doc: Value) -> Result<RunConfig> {
        if !doc.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        expand_traffic_preset(&mut doc)?;
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or the defaults when `None`) and applies `(dotted.path, value)` overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                // Fail early with line/column diagnostics from the file itself.
                RunConfig::from_json(&text).map_err(|e| match e {
                    Error::Config(msg) => Error::Config(format!("{}: {msg}", p.display())),
                    other => other,
                })?;
                serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
            }
            None => Value::Object(Default::default()),
        };
        expand_traffic_preset(&mut doc)?;
        for (k, v) in overrides {
            apply_override(&mut doc, k, v)?;
        }
        RunConfig::from_value(doc)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.traffic.validate()?;
        self.train.validate()?;
        self.explain.validate()?;
        self.eval.validate()?;
        if self.train.static_action >= self.env.num_chunks {
            return Err(Error::Config(format!(
                "train.static_action {} is out of range for {} actions",
                self.train.static_action, self.env.num_chunks
            )));
        }
        Ok(())
    }

    /// Single-line JSON echo, stored in policy files.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }
}
