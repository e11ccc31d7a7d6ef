//! Named configurations shipped with the binary. Each preset maps command
//! names to a partial run configuration (usually just `params`).

use headlab_core::{Error, Result};
use serde_json::Value;

use crate::config::Command;

pub const PRESETS: &[(&str, &str)] = &[
    ("tradeoff-trend", include_str!("../presets/tradeoff-trend.json")),
    ("fourgram", include_str!("../presets/fourgram.json")),
    ("jacobian-scan", include_str!("../presets/jacobian-scan.json")),
    ("compress-sweep", include_str!("../presets/compress-sweep.json")),
    ("sixlayer-dims", include_str!("../presets/sixlayer-dims.json")),
];

pub fn names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.0).collect()
}

fn preset(name: &str) -> Result<Value> {
    let text = PRESETS
        .iter()
        .find(|p| p.0 == name)
        .map(|p| p.1)
        .ok_or_else(|| Error::config(format!("unknown preset `{name}`; available: {}", names().join(", "))))?;
    serde_json::from_str(text).map_err(|e| Error::config(format!("preset {name}: {e}")))
}

/// The configuration document that `name` provides for `command`.
pub fn params_document(name: &str, command: Command) -> Result<Value> {
    let mut doc = preset(name)?;
    let obj = doc.as_object_mut().ok_or_else(|| Error::config("preset must be an object"))?;
    let available: Vec<String> = obj.keys().cloned().collect();
    let mut entry = obj.remove(command.name()).ok_or_else(|| {
        Error::config(format!(
            "preset `{name}` has no `{command}` entry; it covers {}",
            available.join(", ")
        ))
    })?;
    if let Value::Object(m) = &mut entry {
        m.insert("command".into(), serde_json::json!(command));
    }
    Ok(entry)
}
