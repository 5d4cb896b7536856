//! Flat `key = value` configuration files.
//!
//! Keys use the same spelling as the command-line flags; `-` and `_` are
//! interchangeable. Blank lines and lines starting with `#` are skipped.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Keys understood by [`ConfigFile::apply_train`].
pub const TRAIN_KEYS: &[&str] = &[
    "learning_rate",
    "batch_size",
    "iters",
    "weight_decay",
    "clip_norm",
    "max_patches",
    "seed",
    "variant",
    "arch",
    "channels",
    "augment",
    "eval_every",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

fn canonical(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = canonical(k);
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: `{key}` set twice", i + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(&canonical(key)).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| Error::Config(format!("`{key}`: {e}"))))
            .transpose()
    }

    /// Fails on the first key outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(Error::Config(format!("unknown configuration key `{k}`"))),
            None => Ok(()),
        }
    }

    /// Overwrites the fields of `cfg` named in the file.
    pub fn apply_train(&self, cfg: &mut TrainConfig) -> Result<()> {
        macro_rules! set {
            ($key:literal => $field:ident) => {
                if let Some(v) = self.get($key)? {
                    cfg.$field = v;
                }
            };
        }
        set!("learning_rate" => learning_rate);
        set!("batch_size" => batch_size);
        set!("iters" => max_iterations);
        set!("weight_decay" => weight_decay);
        set!("clip_norm" => clip_norm);
        set!("max_patches" => max_patches);
        set!("seed" => seed);
        set!("variant" => variant);
        set!("arch" => arch);
        set!("channels" => channels);
        set!("augment" => augment);
        set!("eval_every" => eval_every);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::train::ArchPreset;

    #[test]
    fn parses_and_applies() {
        let cfg = ConfigFile::parse(
            "# run settings\n\
             learning-rate = 0.01\n\
             \n\
             iters=50\n\
             variant = variant2\n\
             arch = compact\n\
             augment = true\n",
        )
        .unwrap();
        let mut t = TrainConfig::default();
        cfg.apply_train(&mut t).unwrap();
        assert_eq!(t.learning_rate, 0.01);
        assert_eq!(t.max_iterations, 50);
        assert_eq!(t.variant, Variant::Variant2);
        assert_eq!(t.arch, ArchPreset::Compact);
        assert!(t.augment);
        assert_eq!(t.batch_size, 32);
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(ConfigFile::parse("just words").is_err());
        assert!(ConfigFile::parse("= 3").is_err());
        assert!(ConfigFile::parse("seed = 1\nseed = 2").is_err());
    }

    #[test]
    fn bad_values_name_the_key() {
        let cfg = ConfigFile::parse("batch_size = many").unwrap();
        let err = cfg.apply_train(&mut TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("batch_size"));
        let cfg = ConfigFile::parse("variant = both").unwrap();
        assert!(cfg.apply_train(&mut TrainConfig::default()).is_err());
    }

    #[test]
    fn unknown_keys_are_reported() {
        let cfg = ConfigFile::parse("seed = 1\nlearning_rat = 0.1").unwrap();
        let err = cfg.check_keys(TRAIN_KEYS).unwrap_err();
        assert!(err.to_string().contains("learning_rat"));
        assert!(ConfigFile::parse("seed = 1").unwrap().check_keys(TRAIN_KEYS).is_ok());
    }
}
