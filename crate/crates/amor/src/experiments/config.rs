//! Layered experiment configuration.
//!
//! Resolution order: built-in defaults, then a flat `key = value` config
//! file, then command-line flags. Unknown keys are rejected so typos fail
//! loudly instead of silently running the defaults.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AmorError, Result};
use crate::model::ModelConfig;
use crate::tasks::TaskConfig;
use crate::train::TrainConfig;

/// Flat override map parsed from a config file and/or CLI flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    entries: BTreeMap<String, String>,
}

const KNOWN_KEYS: &[&str] = &[
    // model
    "d_model",
    "n_ssm_layers",
    "n_heads",
    "top_k",
    "dropout",
    "tau_init",
    "alpha_init",
    "ff_mult",
    "detach_gate_input",
    // training
    "learning_rate",
    "batch_size",
    "epochs",
    "batches_per_epoch",
    "balance_weight",
    "target_rate",
    "grad_clip",
    "weight_decay",
    "eval_sequences",
    // task
    "seq_len",
    "noise_min",
    "noise_max",
    "impossible_prob",
];

impl Overrides {
    pub fn new() -> Self {
        Overrides::default()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(AmorError::UnknownConfigKey(key.to_string()));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Parse a flat `key = value` file (one pair per line; `#` comments).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut overrides = Overrides::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(AmorError::BadConfigValue {
                    key: format!("line {}", lineno + 1),
                    msg: format!("expected `key = value`, got {line:?}"),
                });
            };
            overrides.set(key.trim(), value.trim())?;
        }
        Ok(overrides)
    }

    /// Later layers win key-by-key.
    pub fn merged_with(&self, later: &Overrides) -> Overrides {
        let mut entries = self.entries.clone();
        for (k, v) in &later.entries {
            entries.insert(k.clone(), v.clone());
        }
        Overrides { entries }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                AmorError::BadConfigValue {
                    key: key.to_string(),
                    msg: format!("cannot parse {raw:?}"),
                }
            }),
        }
    }

    fn apply_usize(&self, key: &str, slot: &mut usize) -> Result<()> {
        if let Some(v) = self.parse::<usize>(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn apply_f64(&self, key: &str, slot: &mut f64) -> Result<()> {
        if let Some(v) = self.parse::<f64>(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Apply model-level overrides.
    pub fn apply_model(&self, cfg: &mut ModelConfig) -> Result<()> {
        self.apply_usize("d_model", &mut cfg.d_model)?;
        self.apply_usize("n_ssm_layers", &mut cfg.n_ssm_layers)?;
        self.apply_usize("n_heads", &mut cfg.n_heads)?;
        self.apply_usize("top_k", &mut cfg.top_k)?;
        self.apply_f64("dropout", &mut cfg.dropout)?;
        self.apply_f64("tau_init", &mut cfg.tau_init)?;
        self.apply_f64("alpha_init", &mut cfg.alpha_init)?;
        self.apply_usize("ff_mult", &mut cfg.ff_mult)?;
        if let Some(v) = self.parse::<bool>("detach_gate_input")? {
            cfg.detach_gate_input = v;
        }
        Ok(())
    }

    /// Apply training overrides.
    pub fn apply_train(&self, cfg: &mut TrainConfig) -> Result<()> {
        self.apply_f64("learning_rate", &mut cfg.learning_rate)?;
        self.apply_usize("batch_size", &mut cfg.batch_size)?;
        self.apply_usize("epochs", &mut cfg.epochs)?;
        self.apply_usize("batches_per_epoch", &mut cfg.batches_per_epoch)?;
        self.apply_f64("balance_weight", &mut cfg.balance_weight)?;
        self.apply_f64("target_rate", &mut cfg.target_rate)?;
        self.apply_f64("grad_clip", &mut cfg.grad_clip)?;
        self.apply_f64("weight_decay", &mut cfg.weight_decay)?;
        self.apply_usize("eval_sequences", &mut cfg.eval_sequences)?;
        Ok(())
    }

    /// Apply task overrides.
    pub fn apply_task(&self, cfg: &mut TaskConfig) -> Result<()> {
        self.apply_usize("seq_len", &mut cfg.seq_len)?;
        self.apply_usize("noise_min", &mut cfg.noise_len.0)?;
        self.apply_usize("noise_max", &mut cfg.noise_len.1)?;
        self.apply_f64("impossible_prob", &mut cfg.impossible_prob)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let mut o = Overrides::new();
        assert!(matches!(
            o.set("learnig_rate", "1"),
            Err(AmorError::UnknownConfigKey(_))
        ));
        o.set("learning_rate", "0.001").unwrap();
    }

    #[test]
    fn file_parse_and_layering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# comment\nepochs = 3\nlearning_rate = 0.01\n").unwrap();
        let from_file = Overrides::from_file(&path).unwrap();

        let mut flags = Overrides::new();
        flags.set("epochs", "5").unwrap();
        let merged = from_file.merged_with(&flags);

        let mut train = TrainConfig::default();
        merged.apply_train(&mut train).unwrap();
        assert_eq!(train.epochs, 5, "flags beat the file");
        assert_eq!(train.learning_rate, 0.01, "file beats defaults");
    }

    #[test]
    fn bad_values_are_reported() {
        let mut o = Overrides::new();
        o.set("epochs", "three").unwrap();
        let mut train = TrainConfig::default();
        assert!(matches!(
            o.apply_train(&mut train),
            Err(AmorError::BadConfigValue { .. })
        ));
    }

    #[test]
    fn bad_file_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        std::fs::write(&path, "epochs: 3\n").unwrap();
        assert!(Overrides::from_file(&path).is_err());
    }
}
