//! Flat `key = value` run configuration.
//!
//! Values are layered: built-in defaults, then an optional preset, then a
//! config file, then command-line overrides. Unknown keys are errors. The
//! effective configuration is written next to every run's outputs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::{Channels, SplitMode};
use crate::error::{Error, Result};
use crate::model::{parse_stage_list, HeadVariant, ModelConfig};
use crate::sim::SimConfig;
use crate::sim::ShapeFamily;
use crate::tensor::BnConfig;
use crate::train::TrainConfig;

/// Every recognised key with its default.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("dataset", "synthetic"),
    ("dataset_root", ""),
    ("channels", "rgbd"),
    ("seed", "0"),
    ("split", "iw"),
    ("folds", "5"),
    ("fold", "0"),
    ("input_size", "224"),
    ("branch_channels", "18,36,72,144"),
    ("blocks_per_stage", "1,1,2,2"),
    ("head", "fused"),
    ("bn_momentum", "0.1"),
    ("lr", "0.0001"),
    ("weight_decay", "0.05"),
    ("batch_size", "32"),
    ("epochs", "50"),
    ("checkpoint_every", "1"),
    ("eval_every", "1"),
    ("augment", "true"),
    ("synthetic_count", "64"),
    ("synthetic_objects", "1"),
    ("train_on_test", "false"),
    ("k", "1"),
    ("episodes", "50"),
    ("scene_objects", "2"),
    ("scene_family", "box"),
    ("adjacency", "0"),
    ("sim_model", "noisy"),
    ("noise_center_px", "1.5"),
    ("noise_angle", "0.1"),
    ("z_max", "600"),
    ("clearance", "40"),
    ("rate", "25"),
    ("gain", "400"),
];

/// Settings of the eight-sample overfit run.
pub const OVERFIT_PRESET: &[(&str, &str)] = &[
    ("dataset", "synthetic"),
    ("synthetic_count", "8"),
    ("train_on_test", "true"),
    ("input_size", "64"),
    ("batch_size", "8"),
    ("lr", "0.0003"),
    ("epochs", "200"),
    ("augment", "false"),
    ("eval_every", "25"),
    ("checkpoint_every", "0"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl fmt::Display for RunConfig {
    /// One `key = value` line per key, sorted.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.values {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::config(key, "unknown key")),
        }
    }

    pub fn apply(&mut self, pairs: &[(&str, &str)]) -> Result<()> {
        pairs.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    /// Overlay `key = value` lines; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::parse(origin, format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.merge_text(&text, path)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| Error::config(key, format!("cannot parse {:?}", self.get(key))))
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(Error::config(key, format!("expected true or false, got {v:?}"))),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn channels(&self) -> Result<Channels> {
        self.get("channels").parse()
    }

    pub fn split_mode(&self) -> Result<SplitMode> {
        self.get("split").parse()
    }

    /// `None` when `fold = all`.
    pub fn fold(&self) -> Result<Option<usize>> {
        match self.get("fold") {
            "all" => Ok(None),
            _ => self.parse("fold").map(Some),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let size: usize = self.parse("input_size")?;
        let cfg = ModelConfig {
            input_channels: self.channels()?.count(),
            branch_channels: parse_stage_list("branch_channels", self.get("branch_channels"))?,
            blocks_per_stage: parse_stage_list("blocks_per_stage", self.get("blocks_per_stage"))?,
            head: self.get("head").parse::<HeadVariant>()?,
            input_size: (size, size),
            bn: BnConfig {
                momentum: self.parse("bn_momentum")?,
                ..BnConfig::default()
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr: self.parse("lr")?,
            weight_decay: self.parse("weight_decay")?,
            batch_size: self.parse("batch_size")?,
            epochs: self.parse("epochs")?,
            seed: self.seed()?,
            checkpoint_every: self.parse("checkpoint_every")?,
            eval_every: self.parse("eval_every")?,
            augment: self.flag("augment")?,
            ..TrainConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let cfg = SimConfig {
            z_max: self.parse("z_max")?,
            clearance: self.parse("clearance")?,
            rate: self.parse("rate")?,
            gain: self.parse("gain")?,
            ..SimConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scene_family(&self) -> Result<ShapeFamily> {
        self.get("scene_family").parse()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layering_and_unknown_keys() {
        let mut c = RunConfig::default();
        c.merge_text("# comment\nlr = 0.001  # inline\n\nseed=7\n", Path::new("x.cfg")).unwrap();
        assert_eq!(c.get("lr"), "0.001");
        assert_eq!(c.seed().unwrap(), 7);
        let err = c.merge_text("colour = red\n", Path::new("x.cfg")).unwrap_err().to_string();
        assert!(err.contains("colour") && err.contains("line 1"), "{err}");
        assert!(c.merge_text("just words\n", Path::new("x.cfg")).is_err());
    }

    #[test]
    fn display_round_trips() {
        let mut c = RunConfig::default();
        c.apply(OVERFIT_PRESET).unwrap();
        let mut back = RunConfig::default();
        back.merge_text(&c.to_string(), Path::new("frozen")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn typed_views() {
        let mut c = RunConfig::default();
        assert_eq!(c.model_config().unwrap(), ModelConfig::default());
        assert_eq!(c.train_config().unwrap(), TrainConfig::default());
        c.set("channels", "d").unwrap();
        assert_eq!(c.model_config().unwrap().input_channels, 1);
        c.set("fold", "all").unwrap();
        assert_eq!(c.fold().unwrap(), None);
        c.set("input_size", "100").unwrap();
        assert!(c.model_config().is_err());
        c.set("augment", "maybe").unwrap();
        assert!(c.train_config().is_err());
    }
}
