use std::path::PathBuf;

use crate::config::{parse_value, KeyValues};
use crate::error::{Error, Result};
use crate::layers::ModelConfig;
use crate::trainer::TrainConfig;

const OWN_KEYS: &[&str] = &["data", "test_fraction", "name"];

/// Merged experiment settings. Every key must be known to the model, the
/// trainer or the experiment itself.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub test_fraction: f64,
    /// Model label in reports; `auto` derives it from the pooling options.
    pub name: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: None,
            test_fraction: 0.2,
            name: "auto".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn known_keys() -> Vec<&'static str> {
        let mut keys: Vec<&str> = OWN_KEYS.to_vec();
        for k in ModelConfig::KEYS.iter().chain(TrainConfig::KEYS) {
            if !keys.contains(k) {
                keys.push(k);
            }
        }
        keys
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let mut cfg = ExperimentConfig::default();
        for (k, v) in kv.iter() {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Applies one setting to every consumer of `key`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut known = self.model.apply(key, value)?;
        known |= self.train.apply(key, value)?;
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "test_fraction" => self.test_fraction = parse_value(key, value)?,
            "name" => self.name = value.to_owned(),
            _ if known => {}
            _ => {
                return Err(Error::Config(format!(
                    "unknown key `{key}` (known: {})",
                    Self::known_keys().join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction {} outside (0, 1)",
                self.test_fraction
            )));
        }
        if self.model.seed != self.train.seed {
            return Err(Error::Config("model and trainer seeds diverged".into()));
        }
        self.train.validate()
    }

    pub fn model_name(&self) -> String {
        if self.name != "auto" {
            return self.name.clone();
        }
        let pool = if self.model.enable_gagm { "gagm" } else { "gap" };
        if self.model.enable_sevector {
            format!("{pool}+se")
        } else {
            pool.to_owned()
        }
    }

    /// Full snapshot, sufficient to reproduce a run together with the data
    /// file.
    pub fn to_text(&self) -> String {
        let mut kv = KeyValues::new();
        if let Some(d) = &self.data {
            kv.set("data", d.display());
        }
        kv.set("test_fraction", self.test_fraction);
        kv.set("name", &self.name);
        self.model.write_into(&mut kv);
        self.train.write_into(&mut kv);
        kv.to_text()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("enable_gagm", "off").unwrap();
        cfg.set("lambda_fs", "0.25").unwrap();
        cfg.set("data", "d.mids").unwrap();
        cfg.set_seed(11);
        let back = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.model_name(), "gap+se");
    }

    #[test]
    fn unknown_and_bad_keys() {
        let err = ExperimentConfig::from_text("colour = blue\n").unwrap_err();
        assert!(err.to_string().contains("unknown key `colour`"));
        assert!(ExperimentConfig::from_text("seed = x\n").is_err());
        assert!(ExperimentConfig::from_text("seed = 1\nseed = 2\n").is_err());
    }

    #[test]
    fn seed_reaches_model_and_trainer() {
        let cfg = ExperimentConfig::from_text("seed = 5\n").unwrap();
        assert_eq!((cfg.model.seed, cfg.train.seed), (5, 5));
        cfg.validate().unwrap();
    }
}
