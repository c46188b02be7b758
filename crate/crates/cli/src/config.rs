//! `key = value` settings files.
//!
//! Blank lines and `#` comments are ignored. Keys not listed in
//! [`Settings`] are rejected so that typos do not silently fall back to
//! defaults.

use std::path::Path;
use std::str::FromStr;

use abn_core::metrics::Baseline;
use abn_core::train::{FinetuneConfig, TrainConfig};
use abn_core::{Mechanism, ModelConfig};
use anyhow::{anyhow, bail, Context, Result};

/// Fine-tuning weight: a fixed value, or calibrated from the edited samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gamma {
    Fixed(f64),
    Auto,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    pub seed: Option<u64>,
    // dataset generation
    pub samples: Option<usize>,
    pub train_samples: Option<usize>,
    pub num_classes: Option<usize>,
    pub distractor_rate: Option<f64>,
    // model
    pub extractor_channels: Option<Vec<usize>>,
    pub map_size: Option<usize>,
    pub attention_channels: Option<usize>,
    pub perception_channels: Option<Vec<usize>>,
    pub mechanism: Option<Mechanism>,
    // optimization
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f32>,
    pub momentum: Option<f32>,
    pub gamma: Option<Gamma>,
    pub freeze_extractor: Option<bool>,
    pub edited_only: Option<bool>,
    // evaluation
    pub steps: Option<usize>,
    pub baseline: Option<Baseline>,
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse().map_err(|e| anyhow!("`{key}`: cannot parse `{raw}`: {e}"))
}

fn list(key: &str, raw: &str) -> Result<Vec<usize>> {
    raw.split(',').map(|p| value(key, p.trim())).collect()
}

impl Settings {
    pub fn parse(text: &str) -> Result<Settings> {
        let mut s = Settings::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", n + 1))?;
            let (key, raw) = (key.trim(), raw.trim());
            s.set(key, raw).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Settings> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Settings::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "seed" => self.seed = Some(value(key, raw)?),
            "samples" => self.samples = Some(value(key, raw)?),
            "train_samples" => self.train_samples = Some(value(key, raw)?),
            "num_classes" => self.num_classes = Some(value(key, raw)?),
            "distractor_rate" => self.distractor_rate = Some(value(key, raw)?),
            "extractor_channels" => self.extractor_channels = Some(list(key, raw)?),
            "map_size" => self.map_size = Some(value(key, raw)?),
            "attention_channels" => self.attention_channels = Some(value(key, raw)?),
            "perception_channels" => self.perception_channels = Some(list(key, raw)?),
            "mechanism" => self.mechanism = Some(value(key, raw)?),
            "epochs" => self.epochs = Some(value(key, raw)?),
            "batch_size" => self.batch_size = Some(value(key, raw)?),
            "learning_rate" => self.learning_rate = Some(value(key, raw)?),
            "momentum" => self.momentum = Some(value(key, raw)?),
            "gamma" => {
                self.gamma = Some(if raw == "auto" {
                    Gamma::Auto
                } else {
                    Gamma::Fixed(value(key, raw)?)
                })
            }
            "freeze_extractor" => self.freeze_extractor = Some(value(key, raw)?),
            "edited_only" => self.edited_only = Some(value(key, raw)?),
            "steps" => self.steps = Some(value(key, raw)?),
            "baseline" => self.baseline = Some(value(key, raw)?),
            other => bail!("unknown key `{other}`"),
        }
        Ok(())
    }

    /// Model configuration for `num_classes` classes on `input_size` images.
    pub fn model_config(&self, num_classes: usize, input_size: (usize, usize), channels: usize) -> ModelConfig {
        let d = ModelConfig::default();
        let map = self.map_size.map(|m| (m, m)).unwrap_or(d.map_size);
        ModelConfig {
            input_size,
            input_channels: channels,
            num_classes,
            extractor_channels: self.extractor_channels.clone().unwrap_or(d.extractor_channels),
            map_size: map,
            attention_channels: self.attention_channels.unwrap_or(d.attention_channels.max(num_classes)),
            perception_channels: self.perception_channels.clone().unwrap_or(d.perception_channels),
            mechanism: self.mechanism.unwrap_or(d.mechanism),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            momentum: self.momentum.unwrap_or(d.momentum),
            seed,
        }
    }

    /// Fine-tuning configuration; `gamma` is resolved by the caller.
    pub fn finetune_config(&self, seed: u64, gamma: f64) -> FinetuneConfig {
        let d = FinetuneConfig::default();
        FinetuneConfig {
            gamma,
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            momentum: self.momentum.unwrap_or(d.momentum),
            seed,
            freeze_extractor: self.freeze_extractor.unwrap_or(d.freeze_extractor),
            edited_only: self.edited_only.unwrap_or(d.edited_only),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_known_keys() {
        let s = Settings::parse(
            "# base run\nepochs = 3\nextractor_channels=4, 8\nmechanism = product\ngamma = auto # calibrate\n\nbaseline=zero\n",
        )
        .unwrap();
        assert_eq!(s.epochs, Some(3));
        assert_eq!(s.extractor_channels, Some(vec![4, 8]));
        assert_eq!(s.mechanism, Some(Mechanism::Product));
        assert_eq!(s.gamma, Some(Gamma::Auto));
        assert_eq!(s.baseline, Some(Baseline::Zero));
        assert_eq!(s.train_config(5).epochs, 3);
        assert_eq!(s.train_config(5).seed, 5);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let err = Settings::parse("epoch = 3").unwrap_err();
        assert!(format!("{err:#}").contains("unknown key `epoch`"));
        assert!(Settings::parse("epochs 3").is_err());
        assert!(Settings::parse("epochs = three").is_err());
    }
}
