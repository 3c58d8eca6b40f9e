use std::fs;
use std::path::Path;

use laip::data::DataConfig;
use laip::model::ModelConfig;
use laip::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Everything a run can be configured with, as read from `--config`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl CliConfig {
    pub fn load(path: &Path) -> laip::Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| laip::Error::Config(format!("{}: {e}", path.display())))
    }

    /// `section.field` for every key, sorted within each section.
    pub fn keys() -> Vec<String> {
        let value = serde_json::to_value(Self::default()).expect("config serializes");
        let mut out = Vec::new();
        if let Value::Object(sections) = value {
            for (section, fields) in sections {
                if let Value::Object(fields) = fields {
                    out.extend(fields.keys().map(|f| format!("{section}.{f}")));
                }
            }
        }
        out
    }
}

/// Help epilogue listing every key with its default.
pub fn keys_help() -> String {
    let value = serde_json::to_value(CliConfig::default()).expect("config serializes");
    let mut s = String::from("Config file keys (JSON, all optional; defaults shown):\n");
    for key in CliConfig::keys() {
        let (section, field) = key.split_once('.').unwrap_or((key.as_str(), ""));
        let default = &value[section][field];
        s.push_str(&format!("  {key} = {default}\n"));
    }
    s
}
