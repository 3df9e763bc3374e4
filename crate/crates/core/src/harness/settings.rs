//! Flat `key = value` configuration shared by every command.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::synth::SyntheticTaskSpec;
use crate::decoding::DecodeConfig;
use crate::las::LasConfig;
use crate::training::TrainConfig;
use crate::{Error, Result};

/// Everything a command can be configured with.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub data: SyntheticTaskSpec,
    pub model: LasConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub lm_order: usize,
    pub unk_penalty: f64,
    /// Per-speaker mean/variance normalization on load.
    pub normalize: bool,
    /// Decode workers.
    pub threads: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            data: SyntheticTaskSpec::default(),
            model: LasConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            lm_order: 3,
            unk_penalty: -10.0,
            normalize: true,
            threads: 1,
        }
    }
}

impl Settings {
    /// Every effective setting, sorted by key.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut v = self.data.to_pairs();
        v.extend(self.model.to_pairs());
        v.extend(self.train.to_pairs());
        v.extend(self.decode.to_pairs());
        v.push(("lm_order", self.lm_order.to_string()));
        v.push(("unk_penalty", self.unk_penalty.to_string()));
        v.push(("normalize", self.normalize.to_string()));
        v.push(("threads", self.threads.to_string()));
        v.sort();
        v
    }

    pub fn keys(&self) -> Vec<&'static str> {
        self.to_pairs().into_iter().map(|(k, _)| k).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let bad = |what: &str| Error::Config(format!("{key} expects {what}, got {value:?}"));
        let known = match key {
            "lm_order" => {
                self.lm_order = value.parse().map_err(|_| bad("an integer"))?;
                true
            }
            "unk_penalty" => {
                self.unk_penalty = value.parse().map_err(|_| bad("a number"))?;
                true
            }
            "normalize" => {
                self.normalize = value.parse().map_err(|_| bad("true or false"))?;
                true
            }
            "threads" => {
                self.threads = value.parse().map_err(|_| bad("an integer"))?;
                true
            }
            _ => {
                self.data.set(key, value)?
                    || self.model.set(key, value)?
                    || self.train.set(key, value)?
                    || self.decode.set(key, value)?
            }
        };
        if known {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown setting {key:?}; valid keys: {}",
                self.keys().join(", ")
            )))
        }
    }

    /// Applies `key = value` lines. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        if self.lm_order == 0 {
            return Err(Error::Config("lm_order must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    /// Canonical text: one `key = value` line per setting, sorted.
    pub fn canonical(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of [`Settings::canonical`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// Reproducibility stamp for `command`.
    pub fn stamp(&self, command: &str) -> String {
        format!(
            "command = {command}\nconfig_hash = {}\nseed = {}\ndata_seed = {}\nversion = {}\n\n{}",
            self.hash(),
            self.train.seed,
            self.data.seed,
            env!("CARGO_PKG_VERSION"),
            self.canonical()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_unique() {
        let keys = Settings::default().keys();
        let mut dedup = keys.clone();
        dedup.dedup();
        assert_eq!(keys, dedup);
    }

    #[test]
    fn every_key_round_trips_through_text() {
        let s = Settings::default();
        let mut t = Settings {
            unk_penalty: -1.0,
            ..Settings::default()
        };
        t.model.enc_hidden = 3;
        t.apply_text(&s.canonical()).unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn hash_changes_iff_a_setting_changes() {
        let base = Settings::default();
        for (key, value) in base.to_pairs() {
            let mut s = base.clone();
            s.set(key, &value).unwrap();
            assert_eq!(s.hash(), base.hash(), "{key}");
            let changed = match value.as_str() {
                "true" => "false".to_string(),
                "false" => "true".to_string(),
                "auto" => "7".to_string(),
                "content" => "location".to_string(),
                "new_state" => "prev_state".to_string(),
                "per_step" => "rescore".to_string(),
                "f32" => "f64".to_string(),
                v => match v.parse::<f64>() {
                    Ok(x) => (x + 1.0).to_string(),
                    Err(_) => panic!("no mutation for {key} = {v}"),
                },
            };
            s.set(key, &changed).unwrap();
            assert_ne!(s.hash(), base.hash(), "{key}");
        }
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = Settings::default().apply_text("bogus = 1").unwrap_err().to_string();
        assert!(err.contains("bogus") && err.contains("beam") && err.contains("lr_initial"), "{err}");
        let mut s = Settings::default();
        s.apply_text("# comment\nbeam = 5  # trailing\n\n").unwrap();
        assert_eq!(s.decode.beam, 5);
        assert!(s.apply_overrides(&["beam"]).is_err());
        assert_eq!(Error::Config(String::new()).exit_code(), 1);
    }
}
