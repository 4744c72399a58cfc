//! Run configuration: a TOML file layered under `--set key=value` overrides
//! and named flags, validated once and echoed next to the outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use trajgmm::network::ModelConfig;
use trajgmm::preprocess::ENERGY_THRESHOLD;
use trajgmm::scenario::{ScenarioConfig, SUPPORTED_LEAD_TIMES};
use trajgmm::training::TrainConfig;
use trajgmm::{Error, Result};

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";
pub const OUT_ROOT_ENV: &str = "TRAJGMM_OUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Generator seed for `gen-data`; model initialisation seed otherwise.
    pub seed: u64,
    pub lead_times: Vec<u32>,
    /// Share of flights held out for validation when no validation set is
    /// given.
    pub validation_fraction: f64,
    pub energy_threshold: f64,
    pub folds: usize,
    pub jobs: usize,
    pub generator: ScenarioConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lead_times: SUPPORTED_LEAD_TIMES.to_vec(),
            validation_fraction: 0.2,
            energy_threshold: ENERGY_THRESHOLD,
            folds: 5,
            jobs: 1,
            generator: ScenarioConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        if !(self.energy_threshold > 0.0 && self.energy_threshold < 1.0) {
            return Err(Error::Config(format!("energy_threshold must lie in (0, 1), got {}", self.energy_threshold)));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.lead_times.is_empty() {
            return Err(Error::Config("lead_times is empty".into()));
        }
        for t in &self.lead_times {
            if !SUPPORTED_LEAD_TIMES.contains(t) {
                return Err(Error::Config(format!(
                    "lead time {t} is not one of {SUPPORTED_LEAD_TIMES:?}"
                )));
            }
        }
        self.generator.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    /// Builds the configuration from an optional file, then `--set` pairs,
    /// then flag pairs (later layers win).
    pub fn load(file: Option<&Path>, sets: &[String], flags: &[(String, String)]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects key=value, got `{s}`")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        for (k, v) in flags {
            set_path(&mut table, k, parse_value(v))?;
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_effective(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        let path = dir.join(EFFECTIVE_CONFIG);
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }
}

/// A TOML literal if the text parses as one, otherwise a bare string.
fn parse_value(text: &str) -> Value {
    format!("v = {text}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Usage(format!("malformed key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// The explicit directory, else `$TRAJGMM_OUT_ROOT/<command>`, else
/// `runs/<command>`.
pub fn output_dir(explicit: Option<PathBuf>, command: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(command)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        let cfg = RunConfig::load(None, &[], &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "seed = 3\n[model]\ndropout = 0.1\nfilters = 4\n").unwrap();
        let cfg = RunConfig::load(
            Some(&p),
            &["model.dropout=0.3".into(), "model.activation=tanh".into()],
            &[("model.filters".into(), "12".into())],
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.model.dropout, 0.3);
        assert_eq!(cfg.model.filters, 12);
        assert_eq!(cfg.model.activation, trajgmm::network::Activation::Tanh);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for set in ["bogus=1", "model.bogus=1", "train.nope=2", "generator.x=1"] {
            let e = RunConfig::load(None, &[set.into()], &[]).unwrap_err();
            assert_eq!(e.category(), "config", "{set}: {e}");
        }
        assert_eq!(RunConfig::load(None, &["seed".into()], &[]).unwrap_err().category(), "usage");
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for set in ["validation_fraction=1.5", "lead_times=[3]", "model.dropout=1.0", "train.batch_size=0"] {
            assert_eq!(RunConfig::load(None, &[set.into()], &[]).unwrap_err().category(), "config", "{set}");
        }
    }

    #[test]
    fn effective_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::load(None, &["model.dense_width=17".into(), "train.epochs=3".into()], &[]).unwrap();
        cfg.write_effective(dir.path()).unwrap();
        let back = RunConfig::load(Some(&dir.path().join(EFFECTIVE_CONFIG)), &[], &[]).unwrap();
        assert_eq!(back, cfg);
    }
}
