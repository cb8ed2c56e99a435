//! Run configuration files.
//!
//! A TOML file with the sections `[data]`, `[model]`, `[privacy]`,
//! `[linkage]` and `[train]`; every key is optional and falls back to its
//! default. Unknown sections or keys are reported together in one
//! validation error.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{Experiment, TrainConfig};
use crate::linkage::SynthConfig;
use crate::model::ModelConfig;
use crate::splitavg::PrivacySpec;

/// Where the training data comes from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Raw table with a `label` column; split among parties on the fly.
    pub raw: Option<PathBuf>,
    /// Party files written by `synthesize` (used when `raw` is unset).
    pub parties: Vec<PathBuf>,
    /// Keep only the first `rows` records of the raw table.
    pub rows: Option<usize>,
    /// Divide every raw feature by this value (e.g. 255 for pixels).
    pub feature_scale: Option<f64>,
}

/// How a raw table is turned into fuzzy parties.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkageConfig {
    /// Total number of parties including the primary.
    pub parties: usize,
    pub key_dims: usize,
    pub key_noise: f64,
    pub fuzz_primary: bool,
    pub reduce_primary: bool,
}

impl Default for LinkageConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            parties: s.parties,
            key_dims: s.key_dims,
            key_noise: s.key_noise,
            fuzz_primary: s.fuzz_primary,
            reduce_primary: s.reduce_primary,
        }
    }
}

impl LinkageConfig {
    pub fn synth(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            parties: self.parties,
            key_dims: self.key_dims,
            key_noise: self.key_noise,
            fuzz_primary: self.fuzz_primary,
            reduce_primary: self.reduce_primary,
            seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub privacy: PrivacySpec,
    pub linkage: LinkageConfig,
    pub train: TrainConfig,
}

fn known_keys<T: Serialize + Default>() -> Vec<String> {
    match serde_json::to_value(T::default()) {
        Ok(serde_json::Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

/// Every `section.key` in `table` that the schema does not define.
fn unknown_keys(table: &toml::Table) -> Vec<String> {
    let sections: [(&str, Vec<String>); 5] = [
        ("data", known_keys::<DataConfig>()),
        ("model", known_keys::<ModelConfig>()),
        ("privacy", known_keys::<PrivacySpec>()),
        ("linkage", known_keys::<LinkageConfig>()),
        ("train", known_keys::<TrainConfig>()),
    ];
    let mut bad = Vec::new();
    for (name, value) in table {
        match sections.iter().find(|(s, _)| s == name) {
            None => bad.push(name.clone()),
            Some((_, keys)) => match value {
                toml::Value::Table(t) => {
                    bad.extend(t.keys().filter(|k| !keys.contains(k)).map(|k| format!("{name}.{k}")));
                }
                _ => bad.push(name.clone()),
            },
        }
    }
    bad
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse()?;
        let bad = unknown_keys(&table);
        if !bad.is_empty() {
            return Err(Error::Validation(vec![format!("unknown config keys: {}", bad.join(", "))]));
        }
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        // Relative data paths are resolved against the config file.
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(r) = cfg.data.raw.as_mut() {
            resolve(r);
        }
        cfg.data.parties.iter_mut().for_each(resolve);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Cross-section consistency checks.
    pub fn validate(&self) -> Result<()> {
        let mut p = self.model.problems();
        p.extend(self.train.problems());
        if self.data.raw.is_some() {
            if self.linkage.parties < 2 {
                p.push(format!("linkage.parties {} must be ≥ 2", self.linkage.parties));
            } else if self.model.num_parties + 1 != self.linkage.parties {
                p.push(format!(
                    "model.num_parties {} must equal linkage.parties − 1 = {}",
                    self.model.num_parties,
                    self.linkage.parties - 1
                ));
            }
            if self.model.key_dims != self.linkage.key_dims {
                p.push(format!(
                    "model.key_dims {} differs from linkage.key_dims {}",
                    self.model.key_dims, self.linkage.key_dims
                ));
            }
            if self.linkage.key_noise < 0.0 {
                p.push(format!("linkage.key_noise {} is negative", self.linkage.key_noise));
            }
        }
        if self.privacy.enabled && self.model.aggregator_mode == crate::model::AggregatorMode::Concat {
            p.push("privacy.enabled is incompatible with model.aggregator_mode = \"concat\"".into());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            synth: self.linkage.synth(self.train.seed),
            model: self.model.clone(),
            privacy: self.privacy.clone(),
            train: self.train.clone(),
        }
    }
}

/// A Markdown reference of every configuration key and its default.
pub fn key_reference() -> String {
    let mut out = String::from("| key | default |\n|---|---|\n");
    let sections: [(&str, serde_json::Value); 5] = [
        ("data", serde_json::to_value(DataConfig::default()).unwrap()),
        ("model", serde_json::to_value(ModelConfig::default()).unwrap()),
        ("privacy", serde_json::to_value(PrivacySpec::default()).unwrap()),
        ("linkage", serde_json::to_value(LinkageConfig::default()).unwrap()),
        ("train", serde_json::to_value(TrainConfig::default()).unwrap()),
    ];
    for (name, v) in sections {
        if let serde_json::Value::Object(m) = v {
            for (k, d) in m {
                out.push_str(&format!("| `{name}.{k}` | `{d}` |\n"));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = RunConfig::parse("[model]\nhidden = 3\nfoo = 1\n[bogus]\nx = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("model.hidden") && msg.contains("model.foo") && msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn optional_keys_are_known() {
        let cfg = RunConfig::parse("[privacy]\nepsilon_cap = 8.0\n[data]\nrows = 10\n").unwrap();
        assert_eq!(cfg.privacy.epsilon_cap, Some(8.0));
        assert_eq!(cfg.data.rows, Some(10));
    }

    #[test]
    fn format_notes_list_every_key() {
        let doc = include_str!("../../../docs/FORMATS.md");
        assert!(doc.contains(&key_reference()), "docs/FORMATS.md is out of date");
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.model.hidden_size = 32;
        cfg.train.seed = 7;
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }
}
