//! Flat `key = value` run configuration.
//!
//! ```toml
//! preset = "tiny"        # or "default"; the base every other key overrides
//! deep_channels = 24     # any DRNetConfig field
//! steps = 500            # any TrainConfig field
//! ```

use serde::Serialize;
use toml::{Table, Value};

use super::train::TrainConfig;
use crate::error::{Error, Result};
use crate::model::DRNetConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: DRNetConfig,
    pub train: TrainConfig,
}

/// The tiny preset with default training settings.
impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: DRNetConfig::tiny(),
            train: TrainConfig::default(),
        }
    }
}

fn as_table<T: Serialize>(v: &T) -> Table {
    Table::try_from(v).expect("flat structs serialize to tables")
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(vec![msg.into()])
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        let base = match table.remove("preset") {
            None => DRNetConfig::tiny(),
            Some(Value::String(p)) if p == "tiny" => DRNetConfig::tiny(),
            Some(Value::String(p)) if p == "default" => DRNetConfig::default(),
            Some(other) => return Err(config_err(format!("unknown preset {other}"))),
        };
        let mut model = as_table(&base);
        let mut train = as_table(&TrainConfig::default());
        let mut unknown = Vec::new();
        for (key, value) in table {
            if model.contains_key(&key) {
                model.insert(key, value);
            } else if train.contains_key(&key) {
                train.insert(key, value);
            } else {
                unknown.push(format!("unknown key `{key}`"));
            }
        }
        if !unknown.is_empty() {
            return Err(Error::Config(unknown));
        }
        let model: DRNetConfig = model.try_into().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        let train: TrainConfig = train.try_into().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        model.validate()?;
        train.validate()?;
        Ok(Self { model, train })
    }

    pub fn to_text(&self) -> String {
        let mut table = as_table(&self.model);
        table.extend(as_table(&self.train));
        toml::to_string(&table).expect("table serializes")
    }
}
