//! Flat `key = value` run settings: built-in defaults, then a config file,
//! then command-line overrides. Every run writes the resolved set back out.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use futureseg::data::{GenConfig, ShapeKind};
use futureseg::segnet::{LstmMode, ModelConfig};
use futureseg::train_eval::{AdamConfig, TrainConfig};

/// Every recognised key with its default value.
const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "7"),
    ("classes", "4"),
    ("height", "64"),
    ("width", "64"),
    ("frames", "8"),
    ("train_sequences", "500"),
    ("val_sequences", "100"),
    ("shapes", "3"),
    ("min_size", "10"),
    ("max_size", "18"),
    ("max_speed", "3"),
    ("kinds", "rectangle,disc"),
    ("widths", "16,32,64,64"),
    ("mode", "uni"),
    ("share_directions", "false"),
    ("epochs", "6"),
    ("batch_size", "8"),
    ("learning_rate", "0.001"),
    ("beta1", "0.9"),
    ("beta2", "0.999"),
    ("epsilon", "1e-8"),
    ("augment", "true"),
    ("horizon", "3"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|&(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let slot = self
            .values
            .get_mut(key)
            .ok_or_else(|| anyhow!("unknown setting {key:?}"))?;
        *slot = value.trim().to_string();
        Ok(())
    }

    /// Applies `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| anyhow!("expected key=value, got {pair:?}"))?;
        self.set(k.trim(), v)
    }

    /// Applies every `key = value` line of `text`; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text)
            .with_context(|| format!("in config {}", path.display()))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = &self.values[key];
        raw.parse()
            .map_err(|e| anyhow!("setting {key} = {raw:?}: {e}"))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.values[key]
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| anyhow!("setting {key}: {s:?}: {e}"))
            })
            .collect()
    }

    /// The resolved settings in config-file syntax.
    pub fn render(&self) -> String {
        let mut out = String::from("# resolved settings\n");
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn gen_config(&self) -> Result<GenConfig> {
        let kinds = self
            .values["kinds"]
            .split(',')
            .map(|s| match s.trim() {
                "rectangle" => Ok(ShapeKind::Rectangle),
                "disc" => Ok(ShapeKind::Disc),
                other => bail!("unknown shape kind {other:?} (rectangle, disc)"),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GenConfig {
            height: self.get("height")?,
            width: self.get("width")?,
            num_classes: self.get("classes")?,
            shapes_per_sequence: self.get("shapes")?,
            min_size: self.get("min_size")?,
            max_size: self.get("max_size")?,
            max_speed: self.get("max_speed")?,
            kinds,
            frames: self.get("frames")?,
            sequences: self.get("train_sequences")?,
            seed: self.get("seed")?,
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let widths: Vec<usize> = self.list("widths")?;
        let widths: [usize; 4] = widths
            .try_into()
            .map_err(|w: Vec<usize>| anyhow!("widths needs 4 values, got {}", w.len()))?;
        let mode: LstmMode = self.get("mode")?;
        Ok(ModelConfig {
            num_classes: self.get("classes")?,
            height: self.get("height")?,
            width: self.get("width")?,
            widths,
            mode,
            share_directions: self.get("share_directions")?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            model: self.model_config()?,
            epochs: self.get("epochs")?,
            batch_size: self.get("batch_size")?,
            adam: AdamConfig {
                learning_rate: self.get("learning_rate")?,
                beta1: self.get("beta1")?,
                beta2: self.get("beta2")?,
                epsilon: self.get("epsilon")?,
            },
            seed: self.get("seed")?,
            augment: self.get("augment")?,
            horizon: self.get("horizon")?,
        })
    }
}
